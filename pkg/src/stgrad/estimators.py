"""Gradient estimators for a single categorical slot, plus reference
approximations and brute-force expectation oracles.

Every estimator consumes a cotangent ``g``, the gradient of the loss at the
sampled one-hot outcome, from one forward/backward pass, and returns the
estimated gradient with respect to the slot's logits. The sampled outcome is
passed as an integer index ``d``.

Single-slot functions here are the reference implementations; the batched
dispatcher :func:`estimate_rows` routes whole arrays of slots through the
kernels in :mod:`stgrad.kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConfigError, GuardError
from .rng import stream, uniform_open
from .simplex import (
    argmax_onehot,
    conditional_gumbel_sample,
    one_hot,
    sample_gumbel,
    softmax,
)

KINDS = (
    "exact",
    "st",
    "stgs",
    "gumbel_rao",
    "reinmax",
    "reinmax_argmax",
    "reinmax_rao",
    "reinmax_cv",
    "reinmax_rk2",
)

# Estimators whose value is a deterministic function of (g, d, logits).
DETERMINISTIC_KINDS = frozenset({"st", "reinmax", "reinmax_argmax", "reinmax_rk2"})
STOCHASTIC_KINDS = frozenset({"stgs", "gumbel_rao", "reinmax_rao", "reinmax_cv"})

CV_CONDITIONING = ("coupled_fresh", "reuse_original")
CV_LEADING_COEFF = ("as_printed", "factor_two")
RAO_SECOND_TERM = ("theta_D_as_printed", "theta")

ENUMERATION_GUARD = 16
EXACT_GUARD = 64


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator kind plus its knobs.

    ``cv_conditioning`` selects which outcome conditions the Gumbel-averaged
    term inside the control-variate estimator: ``coupled_fresh`` conditions on
    the argmax of the freshly perturbed logits (the pairing that keeps the
    correction mean-zero), ``reuse_original`` conditions on the forward
    sample. ``cv_leading_coeff`` and ``rao_second_term_point`` switch between
    the two readings of the composite estimators' first and second terms.
    """

    kind: str
    tau: float = 1.0
    eta: float = 0.0
    beta: float = 0.5
    k_samples: int = 100
    cv_conditioning: str = "coupled_fresh"
    cv_leading_coeff: str = "as_printed"
    rao_second_term_point: str = "theta_D_as_printed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown estimator kind {self.kind!r}")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not (np.isfinite(self.eta) and self.eta >= 0):
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if not np.isfinite(self.beta):
            raise ConfigError(f"beta must be finite, got {self.beta}")
        if self.k_samples < 1:
            raise ConfigError(f"k_samples must be >= 1, got {self.k_samples}")
        if self.cv_conditioning not in CV_CONDITIONING:
            raise ConfigError(f"cv_conditioning must be one of {CV_CONDITIONING}")
        if self.cv_leading_coeff not in CV_LEADING_COEFF:
            raise ConfigError(f"cv_leading_coeff must be one of {CV_LEADING_COEFF}")
        if self.rao_second_term_point not in RAO_SECOND_TERM:
            raise ConfigError(f"rao_second_term_point must be one of {RAO_SECOND_TERM}")


@dataclass(frozen=True)
class LossOracle:
    """A loss with its analytic gradient, defined on all of R^n.

    ``grad`` must be valid at relaxed (non-vertex) points too; the reference
    approximations differentiate at one-hot vertices only, but gradient
    checking probes arbitrary points.
    """

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]


def linear_loss(c) -> LossOracle:
    c = np.asarray(c, dtype=np.float64)
    return LossOracle(lambda x: float(c @ x), lambda x: c.copy())


def quadratic_loss(a, b) -> LossOracle:
    """f(x) = x^T A x + b^T x."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sym = a + a.T
    return LossOracle(lambda x: float(x @ a @ x + b @ x), lambda x: sym @ x + b)


def constant_loss(c0: float) -> LossOracle:
    return LossOracle(lambda x: float(c0), lambda x: np.zeros_like(np.asarray(x, dtype=np.float64)))


def random_quadratic(rng: np.random.Generator, n: int) -> LossOracle:
    return quadratic_loss(rng.standard_normal((n, n)), rng.standard_normal(n))


# ---------------------------------------------------------------------------
# building blocks


def _st_from_probs(g: np.ndarray, p: np.ndarray) -> np.ndarray:
    """g^T (diag(p) - p p^T) for a single slot."""
    return p * (g - np.dot(g, p))


def shifted_logits(d: int, logits, tau: float = 1.0) -> np.ndarray:
    """Logits whose unit-temperature softmax is the half-mix (pi_tau + D)/2."""
    pi_tau = softmax(logits, tau)
    return np.log((pi_tau + one_hot(d, pi_tau.shape[-1])) / 2.0)


# ---------------------------------------------------------------------------
# estimators


def straight_through(g, d: int, logits, tau: float = 1.0) -> np.ndarray:
    """Surrogate jacobian diag(pi_tau) - pi_tau pi_tau^T applied to g."""
    g = np.asarray(g, dtype=np.float64)
    return _st_from_probs(g, softmax(logits, tau))


def st_gumbel_softmax(g, gumbel, logits, tau: float) -> np.ndarray:
    """Differentiates the tempered softmax relaxation at the perturbed logits.

    Unlike :func:`straight_through`, this is the true jacobian of
    softmax_tau(logits + gumbel), so it carries the 1/tau chain factor.
    """
    g = np.asarray(g, dtype=np.float64)
    s = softmax(np.asarray(logits, dtype=np.float64) + np.asarray(gumbel, dtype=np.float64), tau)
    return _st_from_probs(g, s) / tau


def gumbel_rao(g, d: int, logits, tau: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Mean over k conditional draws of the relaxed jacobian applied to g.

    The jacobian is taken with respect to the perturbed logits themselves,
    not through the conditional reparameterisation, so each draw matches what
    :func:`st_gumbel_softmax` would produce for that perturbation.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    g = np.asarray(g, dtype=np.float64)
    y = conditional_gumbel_sample(logits, d, rng, k=k)
    s = softmax(y, tau)
    dots = (s * g).sum(axis=-1, keepdims=True)
    return (s * (g - dots) / tau).mean(axis=0)


def reinmax(g, d: int, logits, tau: float = 1.0) -> np.ndarray:
    """Two-point surrogate whose expectation matches the trapezoid-rule
    approximation of the exact gradient at tau = 1.

    The first term evaluates at the half-mix (pi_tau + D)/2; the second uses
    the untempered probabilities regardless of tau.
    """
    g = np.asarray(g, dtype=np.float64)
    pi_tau = softmax(logits, tau)
    pi = softmax(logits, 1.0)
    m = (pi_tau + one_hot(d, pi.shape[-1])) * 0.5
    return 2.0 * _st_from_probs(g, m) - 0.5 * _st_from_probs(g, pi)


def reinmax_two_st(g, d: int, logits, tau: float = 1.0) -> np.ndarray:
    """Equivalent decomposition of :func:`reinmax` as two straight-through
    instances: one at the shifted logits (temperature 1, since the shift
    already embeds pi_tau) and one at the original logits."""
    g = np.asarray(g, dtype=np.float64)
    first = straight_through(g, d, shifted_logits(d, logits, tau), 1.0)
    second = straight_through(g, d, logits, 1.0)
    return 2.0 * first - 0.5 * second


def reinmax_argmax(g, logits, tau: float = 1.0) -> np.ndarray:
    """Variance diagnostic: the sampled outcome in the shifted logits is
    replaced by argmax(logits), making the surrogate deterministic given the
    cotangent. Only ``g`` still depends on the sampled outcome."""
    g = np.asarray(g, dtype=np.float64)
    pi_tau = softmax(logits, tau)
    pi = softmax(logits, 1.0)
    a = argmax_onehot(np.asarray(logits, dtype=np.float64))
    m = (pi_tau + one_hot(a, pi.shape[-1])) * 0.5
    return 2.0 * _st_from_probs(g, m) - 0.5 * _st_from_probs(g, pi)


def reinmax_rao(
    g,
    d: int,
    logits,
    tau: float,
    k: int,
    rng: np.random.Generator,
    second_term_point: str = "theta_D_as_printed",
) -> np.ndarray:
    """Rao-Blackwellised variant: the high-variance first term is replaced by
    the k-sample conditional average at the shifted logits.

    ``second_term_point`` selects where the subtracted straight-through term
    is evaluated: at the shifted logits with temperature tau, or at the
    original logits with temperature 1.
    """
    g = np.asarray(g, dtype=np.float64)
    th_d = shifted_logits(d, logits, tau)
    first = gumbel_rao(g, d, th_d, tau, k, rng)
    if second_term_point == "theta_D_as_printed":
        second = straight_through(g, d, th_d, tau)
    elif second_term_point == "theta":
        second = straight_through(g, d, logits, 1.0)
    else:
        raise ConfigError(f"second_term_point must be one of {RAO_SECOND_TERM}")
    return 2.0 * first - 0.5 * second


def reinmax_cv(
    g,
    d: int,
    logits,
    tau: float,
    eta: float,
    k: int,
    rng: np.random.Generator,
    conditioning: str = "coupled_fresh",
    leading_coeff: str = "as_printed",
    gumbel=None,
) -> np.ndarray:
    """Control-variate variant: a relaxed-jacobian draw at the shifted logits
    is subtracted and its conditional mean added back.

    When ``gumbel`` carries the forward perturbation that produced ``d``, the
    subtracted draw co-varies with the sampled outcome and the correction
    reduces variance; without it a fresh perturbation is drawn, which keeps
    the correction mean-zero but adds variance. The first and last terms keep
    temperature 1 (they are the plain two-term surrogate); only the
    correction pair uses ``tau``, so the shifted logits are built from the
    untempered probabilities.
    """
    if eta < 0:
        raise ConfigError(f"eta must be >= 0, got {eta}")
    g = np.asarray(g, dtype=np.float64)
    n = np.asarray(logits).shape[-1]
    th_d = shifted_logits(d, logits, 1.0)
    coeff = 1.0 if leading_coeff == "as_printed" else 2.0
    if leading_coeff not in CV_LEADING_COEFF:
        raise ConfigError(f"leading_coeff must be one of {CV_LEADING_COEFF}")
    out = coeff * straight_through(g, d, th_d, 1.0) - 0.5 * straight_through(g, d, logits, 1.0)
    if eta > 0:
        gtilde = sample_gumbel((n,), rng) if gumbel is None else np.asarray(gumbel, dtype=np.float64)
        if conditioning == "coupled_fresh":
            dstar = argmax_onehot(th_d + gtilde)
        elif conditioning == "reuse_original":
            dstar = d
        else:
            raise ConfigError(f"conditioning must be one of {CV_CONDITIONING}")
        out = out - eta * st_gumbel_softmax(g, gtilde, th_d, tau)
        out = out + eta * gumbel_rao(g, dstar, th_d, tau, k, rng)
    return out


def reinmax_rk2(g, d: int, logits, beta: float) -> np.ndarray:
    """One-parameter family matching the beta-weighted endpoint rule in
    expectation; beta = 0.5 reproduces :func:`reinmax` at temperature 1,
    bit for bit. Uses untempered probabilities throughout.

    The two bracketed terms alone are unbiased only at beta = 0.5; away from
    it a score-style leakage term (1 - 2 beta) <g, pi - D> pi remains, which
    is subtracted here so the expectation identity holds at every beta. The
    term is skipped entirely when its coefficient is zero, keeping the
    beta = 0.5 path identical to :func:`reinmax`.
    """
    g = np.asarray(g, dtype=np.float64)
    pi = softmax(logits, 1.0)
    dvec = one_hot(d, pi.shape[-1])
    pb = beta * pi + (1.0 - beta) * dvec
    m = (pi + dvec) * 0.5
    first = m * (g - np.dot(g, pb))
    out = 2.0 * first - beta * _st_from_probs(g, pi)
    c = 1.0 - 2.0 * beta
    if c != 0.0:
        out = out - c * np.dot(g, pi - dvec) * pi
    return out


# ---------------------------------------------------------------------------
# exact gradient and reference approximations (enumeration oracles)


def _enumeration_inputs(loss: LossOracle, logits, guard: int):
    x = np.asarray(logits, dtype=np.float64)
    n = x.shape[-1]
    if n > guard:
        raise GuardError(f"enumeration refused for n={n} > {guard}")
    pi = softmax(x, 1.0)
    jac = np.diag(pi) - np.outer(pi, pi)
    return x, n, pi, jac


def exact_gradient(loss: LossOracle, logits) -> np.ndarray:
    """d/d(logits) of the expected loss, by enumerating all n outcomes."""
    _, n, pi, jac = _enumeration_inputs(loss, logits, EXACT_GUARD)
    fvals = np.array([loss.value(one_hot(i, n)) for i in range(n)])
    return jac @ fvals


def exact_gradient_baseline(loss: LossOracle, logits) -> np.ndarray:
    """Same quantity as :func:`exact_gradient`, written as the double sum
    with the expected loss subtracted as a baseline."""
    _, n, pi, jac = _enumeration_inputs(loss, logits, EXACT_GUARD)
    fvals = np.array([loss.value(one_hot(i, n)) for i in range(n)])
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            out += pi[j] * (fvals[i] - fvals[j]) * jac[i]
    return out


def first_order_reference(loss: LossOracle, logits) -> np.ndarray:
    """Endpoint (rectangle) rule: loss differences replaced by the gradient
    at the source vertex."""
    _, n, pi, jac = _enumeration_inputs(loss, logits, EXACT_GUARD)
    grads = [loss.grad(one_hot(j, n)) for j in range(n)]
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            out += pi[j] * (grads[j][i] - grads[j][j]) * jac[i]
    return out


def second_order_reference(loss: LossOracle, logits) -> np.ndarray:
    """Trapezoid rule: loss differences replaced by the averaged endpoint
    gradients. Exact for quadratics."""
    _, n, pi, jac = _enumeration_inputs(loss, logits, EXACT_GUARD)
    grads = [loss.grad(one_hot(j, n)) for j in range(n)]
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            slope = grads[j] + grads[i]
            out += (pi[j] / 2.0) * (slope[i] - slope[j]) * jac[i]
    return out


def rk2_reference(loss: LossOracle, logits, beta: float) -> np.ndarray:
    """beta-weighted endpoint rule; beta = 0 is the rectangle rule and
    beta = 0.5 the trapezoid rule."""
    _, n, pi, jac = _enumeration_inputs(loss, logits, EXACT_GUARD)
    grads = [loss.grad(one_hot(j, n)) for j in range(n)]
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            slope = (1.0 - beta) * grads[j] + beta * grads[i]
            out += pi[j] * (slope[i] - slope[j]) * jac[i]
    return out


# ---------------------------------------------------------------------------
# dispatch


def estimate(
    config: EstimatorConfig,
    g,
    d: int,
    logits,
    rng: np.random.Generator | None = None,
    gumbel=None,
) -> np.ndarray:
    """Evaluate one estimator for a single slot.

    ``gumbel`` must carry the forward perturbation for the relaxation-based
    estimator; ``rng`` is required by the kinds that draw fresh randomness.
    """
    kind = config.kind
    if kind == "st":
        return straight_through(g, d, logits, config.tau)
    if kind == "stgs":
        if gumbel is None:
            raise ConfigError("stgs requires the forward gumbel perturbation")
        return st_gumbel_softmax(g, gumbel, logits, config.tau)
    if kind == "gumbel_rao":
        _require_rng(rng, kind)
        return gumbel_rao(g, d, logits, config.tau, config.k_samples, rng)
    if kind == "reinmax":
        return reinmax(g, d, logits, config.tau)
    if kind == "reinmax_argmax":
        return reinmax_argmax(g, logits, config.tau)
    if kind == "reinmax_rao":
        _require_rng(rng, kind)
        return reinmax_rao(
            g, d, logits, config.tau, config.k_samples, rng, config.rao_second_term_point
        )
    if kind == "reinmax_cv":
        _require_rng(rng, kind)
        return reinmax_cv(
            g,
            d,
            logits,
            config.tau,
            config.eta,
            config.k_samples,
            rng,
            config.cv_conditioning,
            config.cv_leading_coeff,
            gumbel=gumbel,
        )
    if kind == "reinmax_rk2":
        return reinmax_rk2(g, d, logits, config.beta)
    if kind == "exact":
        raise ConfigError("the exact estimator needs a loss oracle, not a cotangent")
    raise ConfigError(f"unknown estimator kind {kind!r}")


def _require_rng(rng, kind):
    if rng is None:
        raise ConfigError(f"{kind} requires an rng")


def estimate_rows(
    config: EstimatorConfig,
    g: np.ndarray,
    d_idx: np.ndarray,
    logits: np.ndarray,
    rng: np.random.Generator | None = None,
    gumbel: np.ndarray | None = None,
) -> np.ndarray:
    """Batched :func:`estimate` over S slots via the compiled kernels.

    Arrays are (S, n) with d_idx of shape (S,). All fresh randomness is drawn
    from ``rng`` in a fixed order (control-variate perturbation first, then
    conditional uniforms), so results are reproducible and identical across
    backends.
    """
    g = np.ascontiguousarray(g, dtype=np.float64)
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    d_idx = np.ascontiguousarray(d_idx, dtype=np.int64)
    S, n = g.shape
    kind = config.kind
    tau = config.tau
    if kind == "st":
        return kernels.st_rows(g, kernels.softmax_rows(logits, tau))
    if kind == "stgs":
        if gumbel is None:
            raise ConfigError("stgs requires the forward gumbel perturbation")
        return kernels.stgs_rows(g, np.ascontiguousarray(gumbel, dtype=np.float64), logits, tau)
    if kind == "gumbel_rao":
        _require_rng(rng, kind)
        u = uniform_open(rng, (S, config.k_samples, n))
        return kernels.gumbel_rao_rows(g, d_idx, logits, tau, u)
    if kind == "reinmax":
        pi = kernels.softmax_rows(logits, 1.0)
        pi_tau = pi if tau == 1.0 else kernels.softmax_rows(logits, tau)
        return kernels.reinmax_rows(g, d_idx, pi_tau, pi)
    if kind == "reinmax_argmax":
        pi = kernels.softmax_rows(logits, 1.0)
        pi_tau = pi if tau == 1.0 else kernels.softmax_rows(logits, tau)
        amax = np.argmax(logits, axis=-1)
        return kernels.reinmax_rows(g, amax, pi_tau, pi)
    if kind == "reinmax_rao":
        _require_rng(rng, kind)
        pi_tau = kernels.softmax_rows(logits, tau)
        th_d = np.log((pi_tau + kernels.onehot_rows(d_idx, n)) / 2.0)
        u = uniform_open(rng, (S, config.k_samples, n))
        first = kernels.gumbel_rao_rows(g, d_idx, th_d, tau, u)
        if config.rao_second_term_point == "theta_D_as_printed":
            second = kernels.st_rows(g, kernels.softmax_rows(th_d, tau))
        else:
            second = kernels.st_rows(g, kernels.softmax_rows(logits, 1.0))
        return 2.0 * first - 0.5 * second
    if kind == "reinmax_cv":
        _require_rng(rng, kind)
        pi = kernels.softmax_rows(logits, 1.0)
        th_d = np.log((pi + kernels.onehot_rows(d_idx, n)) / 2.0)
        coeff = 1.0 if config.cv_leading_coeff == "as_printed" else 2.0
        out = coeff * kernels.st_rows(g, kernels.softmax_rows(th_d, 1.0))
        out -= 0.5 * kernels.st_rows(g, pi)
        if config.eta > 0:
            if gumbel is None:
                gtilde = -np.log(-np.log(uniform_open(rng, (S, n))))
            else:
                gtilde = np.ascontiguousarray(gumbel, dtype=np.float64)
            if config.cv_conditioning == "coupled_fresh":
                dstar = np.argmax(th_d + gtilde, axis=-1)
            else:
                dstar = d_idx
            u = uniform_open(rng, (S, config.k_samples, n))
            out -= config.eta * kernels.stgs_rows(g, gtilde, th_d, tau)
            out += config.eta * kernels.gumbel_rao_rows(g, dstar, th_d, tau, u)
        return out
    if kind == "reinmax_rk2":
        pi = kernels.softmax_rows(logits, 1.0)
        return kernels.rk2_rows(g, d_idx, pi, config.beta)
    if kind == "exact":
        raise ConfigError("the exact estimator needs a loss oracle, not a cotangent")
    raise ConfigError(f"unknown estimator kind {kind!r}")


# ---------------------------------------------------------------------------
# brute-force expectation


@dataclass(frozen=True)
class ExpectationResult:
    """Enumerated expectation of an estimator, with Monte-Carlo standard
    error per coordinate when the inner estimator is stochastic."""

    values: np.ndarray
    stderr: np.ndarray | None = None


def enumerate_expectation(
    config: EstimatorConfig,
    loss: LossOracle,
    logits,
    mc_budget: int = 0,
    seed: int = 0,
) -> ExpectationResult:
    """Expectation over the sampled outcome: sum_i pi_i * estimator(g_i, i).

    For deterministic estimator kinds the inner value is a single evaluation;
    for kinds with fresh Gumbel randomness the inner expectation is a
    Monte-Carlo mean over ``mc_budget`` draws and a standard error is
    reported.
    """
    x = np.asarray(logits, dtype=np.float64)
    n = x.shape[-1]
    if n > ENUMERATION_GUARD:
        raise GuardError(f"enumeration refused for n={n} > {ENUMERATION_GUARD}")
    if config.kind == "exact":
        return ExpectationResult(exact_gradient(loss, x), np.zeros(n))
    pi = softmax(x, 1.0)
    total = np.zeros(n)
    var_total = np.zeros(n)
    stochastic = config.kind in STOCHASTIC_KINDS
    if stochastic and mc_budget < 1:
        raise ConfigError(f"{config.kind} needs mc_budget >= 1")
    for i in range(n):
        g_i = loss.grad(one_hot(i, n))
        if not stochastic:
            total += pi[i] * estimate(config, g_i, i, x)
            continue
        draws = np.empty((mc_budget, n))
        for r in range(mc_budget):
            rng = stream(seed, i, r)
            if config.kind == "stgs":
                y = conditional_gumbel_sample(x, i, rng)
                draws[r] = st_gumbel_softmax(g_i, y - x, x, config.tau)
            else:
                draws[r] = estimate(config, g_i, i, x, rng=rng)
        total += pi[i] * draws.mean(axis=0)
        var_total += pi[i] ** 2 * draws.var(axis=0, ddof=1) / mc_budget
    return ExpectationResult(total, np.sqrt(var_total) if stochastic else None)
