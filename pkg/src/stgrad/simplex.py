"""Categorical / Gumbel primitives shared by every estimator.

Vectors live on the last axis; every function broadcasts over leading axes,
so the same code serves a single slot (shape ``(n,)``) and a batch of slots
(shape ``(B, L, n)``). One-hot outcomes are represented by their integer
index.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DomainError
from .rng import uniform_open


def _as_float_array(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} must be finite")
    return a


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return tau


def softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Tempered softmax exp(x/tau) / sum exp(x/tau), stabilised by max-shift."""
    x = _as_float_array(logits, "logits")
    tau = _check_tau(tau)
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian(pi) -> np.ndarray:
    """Jacobian diag(pi) - pi pi^T of softmax at probabilities ``pi``.

    Symmetric, positive semidefinite, rows and columns sum to zero.
    """
    p = np.asarray(pi, dtype=np.float64)
    return np.diag(p) - np.outer(p, p)


def log_partition(logits) -> np.ndarray:
    """log sum exp(logits) over the last axis, stable under max-shift."""
    x = _as_float_array(logits, "logits")
    m = x.max(axis=-1, keepdims=True)
    out = m[..., 0] + np.log(np.exp(x - m).sum(axis=-1))
    return out if out.ndim else float(out)


def one_hot(index, n: int) -> np.ndarray:
    """Dense one-hot vector(s) for integer index(es)."""
    idx = np.asarray(index)
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out.reshape(-1, n), np.reshape(idx, (-1, 1)), 1.0, axis=-1)
    return out


def argmax_onehot(values) -> np.ndarray | int:
    """Index of the maximum along the last axis; ties break to the lowest index."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] < 1:
        raise DomainError("argmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("argmax input must be finite")
    idx = np.argmax(v, axis=-1)
    return int(idx) if idx.ndim == 0 else idx


def categorical_from_uniform(pi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF lookup: index such that cdf[index-1] <= u < cdf[index]."""
    cdf = np.cumsum(pi, axis=-1)
    idx = (cdf <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, pi.shape[-1] - 1)


def sample_categorical(pi, rng: np.random.Generator) -> np.ndarray | int:
    """Sample index(es) with probability ``pi`` by inverse CDF over cumulative sums."""
    p = np.asarray(pi, dtype=np.float64)
    u = rng.random(p.shape[:-1])
    idx = categorical_from_uniform(p, np.asarray(u))
    return int(idx) if idx.ndim == 0 else idx


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Gumbel(0,1) draws; uniforms are rejected at the endpoints first."""
    return gumbel_from_uniform(uniform_open(rng, shape))


def gumbel_argmax_sample(logits, rng: np.random.Generator):
    """Sample (index, gumbel) with index = argmax(logits + gumbel).

    The index is distributed as softmax(logits); ties break to the lowest
    index.
    """
    x = _as_float_array(logits, "logits")
    g = sample_gumbel(x.shape, rng)
    return argmax_onehot(x + g), g


def conditional_gumbel_from_uniform(logits: np.ndarray, index: int, u: np.ndarray) -> np.ndarray:
    """Perturbed logits Y = logits + G conditioned on argmax(Y) = index.

    ``u`` supplies the underlying uniforms; its last axis matches ``logits``
    and extra leading axes give multiple draws. Built from exponential
    variates: with E = -log(u) and g = -log(E), the conditioned coordinate is
    g_i + logZ and the others are -log(E_j / exp(theta_j) + E_i / Z),
    evaluated in log space so extreme logits cannot overflow.
    """
    x = np.asarray(logits, dtype=np.float64)
    g = gumbel_from_uniform(u)
    lz = log_partition(x)
    i = int(index)
    g_i = g[..., i : i + 1]
    y = -np.logaddexp(-(g + x), -(g_i + lz))
    y[..., i] = g[..., i] + lz
    return y


def conditional_gumbel_sample(logits, index: int, rng: np.random.Generator, k: int | None = None) -> np.ndarray:
    """Draw perturbed logits Y = logits + G given that ``index`` is the argmax.

    Returns shape ``(n,)`` or ``(k, n)`` when ``k`` is given. The argmax of
    every draw equals ``index`` by construction; the measure-zero event of an
    exact floating-point tie is rejected and resampled.
    """
    x = _as_float_array(logits, "logits")
    n = x.shape[-1]
    i = int(index)
    shape = (n,) if k is None else (int(k), n)
    y = conditional_gumbel_from_uniform(x, i, uniform_open(rng, shape))
    flat = y.reshape(-1, n)
    bad = np.argmax(flat, axis=-1) != i
    while bad.any():
        flat[bad] = conditional_gumbel_from_uniform(x, i, uniform_open(rng, (int(bad.sum()), n)))
        bad = np.argmax(flat, axis=-1) != i
    return y if k is not None else y.reshape(n)
