"""Minimal dense-network machinery: manual reverse mode, pixel/KL losses,
and Adam/RAdam optimizers.

The network is a fixed affine chain with ReLU on hidden layers and identity
on the output, so the backward pass is written out by hand instead of taping.
All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError


@dataclass
class Mlp:
    """Affine layers stored as (in, out) weight matrices plus bias vectors.

    ReLU after every layer except the last.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_params(rng: np.random.Generator, dims) -> Mlp:
    """Kaiming-style uniform init: W ~ U(-sqrt(2/fan_in), +sqrt(2/fan_in)),
    biases zero."""
    dims = list(dims)
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least input and output dims")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(2.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def mlp_forward(params: Mlp, x: np.ndarray):
    """Returns (output, cache); the cache holds each layer's input and
    pre-activation for the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ConfigError(
            f"input dim {x.shape[-1]} does not match first layer {params.weights[0].shape[0]}"
        )
    last = len(params.weights) - 1
    inputs, preacts = [], []
    a = x
    for idx, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w + b
        preacts.append(z)
        a = np.maximum(z, 0.0) if idx < last else z
    return a, (inputs, preacts)


def mlp_backward(params: Mlp, cache, cotangent: np.ndarray, with_param_grads: bool = True):
    """Reverse-mode pass. Returns (input cotangent, grads as an Mlp or None).

    ReLU subgradient at exactly 0 is taken as 0. ``with_param_grads=False``
    computes only the input cotangent, which halves the work when the
    parameters are frozen.
    """
    inputs, preacts = cache
    last = len(params.weights) - 1
    if cotangent.shape[-1] != params.weights[last].shape[1]:
        raise ConfigError("cotangent dim does not match output layer")
    dW = [None] * len(params.weights)
    db = [None] * len(params.biases)
    d = np.asarray(cotangent, dtype=np.float64)
    for idx in range(last, -1, -1):
        if idx < last:
            d = d * (preacts[idx] > 0.0)
        if with_param_grads:
            dW[idx] = inputs[idx].T @ d
            db[idx] = d.sum(axis=0) if d.ndim > 1 else d.copy()
        d = d @ params.weights[idx].T
    grads = Mlp(dW, db) if with_param_grads else None
    return d, grads


def bernoulli_nll(pixel_logits: np.ndarray, targets: np.ndarray):
    """Negative Bernoulli log-likelihood summed over all entries.

    Per pixel: softplus(l) - t*l, stable for large |l|. Returns the scalar
    total and the cotangent sigmoid(l) - t.
    """
    l = np.asarray(pixel_logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("targets must lie in [0, 1]")
    softplus = np.maximum(l, 0.0) + np.log1p(np.exp(-np.abs(l)))
    value = float((softplus - t * l).sum())
    # sigmoid without overflow on either tail
    sig = np.empty_like(l)
    pos = l >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-l[pos]))
    e = np.exp(l[~pos])
    sig[~pos] = e / (1.0 + e)
    return value, sig - t


def bernoulli_nll_per_row(pixel_logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row negative Bernoulli log-likelihood (no cotangent)."""
    l = np.asarray(pixel_logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    softplus = np.maximum(l, 0.0) + np.log1p(np.exp(-np.abs(l)))
    return (softplus - t * l).sum(axis=-1)


def kl_uniform_categorical(logits: np.ndarray):
    """KL(q || uniform) summed over all leading axes, q = softmax(logits).

    Returns the scalar total and the analytic cotangent
    q * (log q - sum q log q) with respect to the logits.
    """
    x = np.asarray(logits, dtype=np.float64)
    n = x.shape[-1]
    z = x - x.max(axis=-1, keepdims=True)
    log_q = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    q = np.exp(log_q)
    qlogq = q * log_q  # exactly 0 where q underflows to 0
    ent = qlogq.sum(axis=-1, keepdims=True)
    value = float((np.log(n) + ent[..., 0]).sum())
    cot = q * (log_q - ent)
    return value, cot


@dataclass
class OptimizerState:
    """Adam / RAdam state over a flat list of parameter arrays."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("adam", "radam"):
            raise ConfigError(f"optimizer kind must be adam|radam, got {self.kind!r}")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be positive, got {self.lr}")


def init_optimizer(kind: str, lr: float, params: list[np.ndarray], **hyper) -> OptimizerState:
    state = OptimizerState(kind=kind, lr=lr, **hyper)
    state.m = [np.zeros_like(p) for p in params]
    state.v = [np.zeros_like(p) for p in params]
    return state


def adam_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, gr, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * gr
        v *= b2
        v += (1.0 - b2) * gr * gr
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state, params


def radam_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Rectified Adam: plain momentum while the variance estimate is
    untrustworthy (rho_t <= 4), rectified adaptive step afterwards."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    t = state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2**t / c2
    if rho_t > 4.0:
        r_t = np.sqrt(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
    else:
        r_t = None
    for p, gr, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * gr
        v *= b2
        v += (1.0 - b2) * gr * gr
        m_hat = m / c1
        if r_t is None:
            p -= state.lr * m_hat
        else:
            p -= state.lr * r_t * m_hat / (np.sqrt(v / c2) + state.eps)
    return state, params


def optimizer_step(state: OptimizerState, params: list[np.ndarray], grads: list[np.ndarray]):
    step = adam_step if state.kind == "adam" else radam_step
    return step(state, params, grads)
