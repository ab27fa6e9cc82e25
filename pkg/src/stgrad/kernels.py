"""Batched estimator kernels: numba-compiled hot loops with a numpy fallback.

Each kernel operates on a flat batch of slots: cotangents ``g`` and logits
are ``(S, n)`` arrays, sampled outcomes are an ``(S,)`` integer index array,
and pre-drawn uniforms feed all randomness so both backends consume the same
random stream. The backend is chosen at import time from the environment
variable ``STGRAD_BACKEND``:

    auto   use numba when importable, else numpy (default)
    numba  require numba, fail if missing
    numpy  force the pure-numpy path

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("STGRAD_BACKEND", "auto").lower()
if _FLAG not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"STGRAD_BACKEND must be auto|numba|numpy, got {_FLAG!r}")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False
    if _FLAG == "numba":
        raise RuntimeError("STGRAD_BACKEND=numba but numba is not importable")

USE_NUMBA = _FLAG == "numba" or (_FLAG == "auto" and HAS_NUMBA)


def active_backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def onehot_rows(d_idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((d_idx.shape[0], n))
    out[np.arange(d_idx.shape[0]), d_idx] = 1.0
    return out


def softmax_rows(x: np.ndarray, tau: float) -> np.ndarray:
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def categorical_rows(pi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling per row from uniforms ``u`` of shape (S,)."""
    cdf = np.cumsum(pi, axis=-1)
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, pi.shape[-1] - 1)


# ---------------------------------------------------------------------------
# numpy implementations


def _st_rows_np(g, p):
    s = (g * p).sum(axis=-1, keepdims=True)
    return p * (g - s)


def _reinmax_rows_np(g, d_idx, pi_tau, pi):
    d = onehot_rows(d_idx, pi.shape[-1])
    m = (pi_tau + d) * 0.5
    s_m = (g * m).sum(axis=-1, keepdims=True)
    s_p = (g * pi).sum(axis=-1, keepdims=True)
    return 2.0 * (m * (g - s_m)) - 0.5 * (pi * (g - s_p))


def _rk2_rows_np(g, d_idx, pi, beta):
    # Mirrors _reinmax_rows_np operation for operation so that beta = 0.5
    # reproduces it bit for bit; the leakage correction vanishes there and
    # is skipped.
    d = onehot_rows(d_idx, pi.shape[-1])
    pb = beta * pi + (1.0 - beta) * d
    m = (pi + d) * 0.5
    s_m = (g * pb).sum(axis=-1, keepdims=True)
    s_p = (g * pi).sum(axis=-1, keepdims=True)
    out = 2.0 * (m * (g - s_m)) - beta * (pi * (g - s_p))
    c = 1.0 - 2.0 * beta
    if c != 0.0:
        leak = (g * (pi - d)).sum(axis=-1, keepdims=True)
        out = out - c * leak * pi
    return out


def _stgs_rows_np(g, gum, logits, tau):
    s = softmax_rows(logits + gum, tau)
    return _st_rows_np(g, s) / tau


def _conditional_gumbel_rows_np(logits, d_idx, u):
    S, n = logits.shape
    gl = -np.log(-np.log(u))
    m = logits.max(axis=-1, keepdims=True)
    lz = (m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1)))[:, None, None]
    idx = np.broadcast_to(d_idx[:, None, None], (S, u.shape[1], 1))
    g_i = np.take_along_axis(gl, idx, axis=-1)
    y = -np.logaddexp(-(gl + logits[:, None, :]), -(g_i + lz))
    np.put_along_axis(y, idx, g_i + lz, axis=-1)
    return y


def _gumbel_rao_rows_np(g, d_idx, logits, tau, u):
    y = _conditional_gumbel_rows_np(logits, d_idx, u)
    s = softmax_rows(y, tau)
    gg = g[:, None, :]
    dot = (gg * s).sum(axis=-1, keepdims=True)
    return (s * (gg - dot) / tau).mean(axis=1)


# ---------------------------------------------------------------------------
# numba implementations (same math, fused loops, no temporaries)

if HAS_NUMBA:

    @njit(cache=True)
    def _st_rows_nb(g, p):
        S, n = g.shape
        out = np.empty((S, n))
        for r in range(S):
            s = 0.0
            for j in range(n):
                s += g[r, j] * p[r, j]
            for j in range(n):
                out[r, j] = p[r, j] * (g[r, j] - s)
        return out

    @njit(cache=True)
    def _reinmax_rows_nb(g, d_idx, pi_tau, pi):
        S, n = g.shape
        out = np.empty((S, n))
        for r in range(S):
            i = d_idx[r]
            s_m = 0.0
            s_p = 0.0
            for j in range(n):
                d = 1.0 if j == i else 0.0
                m = (pi_tau[r, j] + d) * 0.5
                s_m += g[r, j] * m
                s_p += g[r, j] * pi[r, j]
            for j in range(n):
                d = 1.0 if j == i else 0.0
                m = (pi_tau[r, j] + d) * 0.5
                out[r, j] = 2.0 * (m * (g[r, j] - s_m)) - 0.5 * (pi[r, j] * (g[r, j] - s_p))
        return out

    @njit(cache=True)
    def _rk2_rows_nb(g, d_idx, pi, beta):
        # Same loop structure as _reinmax_rows_nb; at beta = 0.5 the two are
        # bit-identical because beta*pi + (1-beta)*d rounds to (pi + d)*0.5
        # and the leakage correction is skipped.
        S, n = g.shape
        c = 1.0 - 2.0 * beta
        out = np.empty((S, n))
        for r in range(S):
            i = d_idx[r]
            s_m = 0.0
            s_p = 0.0
            for j in range(n):
                d = 1.0 if j == i else 0.0
                pb = beta * pi[r, j] + (1.0 - beta) * d
                s_m += g[r, j] * pb
                s_p += g[r, j] * pi[r, j]
            for j in range(n):
                d = 1.0 if j == i else 0.0
                m = (pi[r, j] + d) * 0.5
                out[r, j] = 2.0 * (m * (g[r, j] - s_m)) - beta * (pi[r, j] * (g[r, j] - s_p))
            if c != 0.0:
                leak = 0.0
                for j in range(n):
                    d = 1.0 if j == i else 0.0
                    leak += g[r, j] * (pi[r, j] - d)
                for j in range(n):
                    out[r, j] = out[r, j] - c * leak * pi[r, j]
        return out

    @njit(cache=True)
    def _stgs_rows_nb(g, gum, logits, tau):
        S, n = g.shape
        out = np.empty((S, n))
        s = np.empty(n)
        for r in range(S):
            mx = (logits[r, 0] + gum[r, 0]) / tau
            for j in range(n):
                v = (logits[r, j] + gum[r, j]) / tau
                s[j] = v
                if v > mx:
                    mx = v
            acc = 0.0
            for j in range(n):
                s[j] = np.exp(s[j] - mx)
                acc += s[j]
            dot = 0.0
            for j in range(n):
                s[j] /= acc
                dot += g[r, j] * s[j]
            for j in range(n):
                out[r, j] = s[j] * (g[r, j] - dot) / tau
        return out

    @njit(cache=True)
    def _conditional_gumbel_rows_nb(logits, d_idx, u):
        S, n = logits.shape
        K = u.shape[1]
        y = np.empty((S, K, n))
        for r in range(S):
            i = d_idx[r]
            mx = logits[r, 0]
            for j in range(1, n):
                if logits[r, j] > mx:
                    mx = logits[r, j]
            acc = 0.0
            for j in range(n):
                acc += np.exp(logits[r, j] - mx)
            lz = mx + np.log(acc)
            for k in range(K):
                g_i = -np.log(-np.log(u[r, k, i]))
                a = -(g_i + lz)
                for j in range(n):
                    if j == i:
                        y[r, k, j] = g_i + lz
                    else:
                        b = -(-np.log(-np.log(u[r, k, j])) + logits[r, j])
                        hi = b if b > a else a
                        y[r, k, j] = -(hi + np.log(np.exp(a - hi) + np.exp(b - hi)))
        return y

    @njit(cache=True)
    def _gumbel_rao_rows_nb(g, d_idx, logits, tau, u):
        S, n = g.shape
        K = u.shape[1]
        out = np.zeros((S, n))
        y = np.empty(n)
        s = np.empty(n)
        for r in range(S):
            i = d_idx[r]
            mx = logits[r, 0]
            for j in range(1, n):
                if logits[r, j] > mx:
                    mx = logits[r, j]
            acc = 0.0
            for j in range(n):
                acc += np.exp(logits[r, j] - mx)
            lz = mx + np.log(acc)
            for k in range(K):
                g_i = -np.log(-np.log(u[r, k, i]))
                a = -(g_i + lz)
                for j in range(n):
                    if j == i:
                        y[j] = g_i + lz
                    else:
                        b = -(-np.log(-np.log(u[r, k, j])) + logits[r, j])
                        hi = b if b > a else a
                        y[j] = -(hi + np.log(np.exp(a - hi) + np.exp(b - hi)))
                # softmax(y/tau); y[i] is the max by construction
                sacc = 0.0
                for j in range(n):
                    s[j] = np.exp((y[j] - y[i]) / tau)
                    sacc += s[j]
                dot = 0.0
                for j in range(n):
                    s[j] /= sacc
                    dot += g[r, j] * s[j]
                for j in range(n):
                    out[r, j] += s[j] * (g[r, j] - dot) / tau
        for r in range(S):
            for j in range(n):
                out[r, j] /= K
        return out


# ---------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    st_rows = _st_rows_nb
    reinmax_rows = _reinmax_rows_nb
    rk2_rows = _rk2_rows_nb
    stgs_rows = _stgs_rows_nb
    conditional_gumbel_rows = _conditional_gumbel_rows_nb
    gumbel_rao_rows = _gumbel_rao_rows_nb
else:
    st_rows = _st_rows_np
    reinmax_rows = _reinmax_rows_np
    rk2_rows = _rk2_rows_np
    stgs_rows = _stgs_rows_np
    conditional_gumbel_rows = _conditional_gumbel_rows_np
    gumbel_rao_rows = _gumbel_rao_rows_np

# Both implementations of every dual-path kernel, for tests and benchmarks.
IMPLEMENTATIONS = {
    "st_rows": {"numpy": _st_rows_np, "numba": _st_rows_nb if HAS_NUMBA else None},
    "reinmax_rows": {"numpy": _reinmax_rows_np, "numba": _reinmax_rows_nb if HAS_NUMBA else None},
    "rk2_rows": {"numpy": _rk2_rows_np, "numba": _rk2_rows_nb if HAS_NUMBA else None},
    "stgs_rows": {"numpy": _stgs_rows_np, "numba": _stgs_rows_nb if HAS_NUMBA else None},
    "conditional_gumbel_rows": {
        "numpy": _conditional_gumbel_rows_np,
        "numba": _conditional_gumbel_rows_nb if HAS_NUMBA else None,
    },
    "gumbel_rao_rows": {
        "numpy": _gumbel_rao_rows_np,
        "numba": _gumbel_rao_rows_nb if HAS_NUMBA else None,
    },
}
