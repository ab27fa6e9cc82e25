"""Discrete-latent VAE: encoder/decoder assembly, ELBO, and the training
step that routes encoder-logit gradients through a chosen estimator.

The latent space is L categorical slots of n classes. Encoded logits have
shape (B, L, n); sampled latents are flattened to (B, L*n) one-hots for the
decoder. All reported metrics are nats per image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, NumericsError
from .estimators import EstimatorConfig, estimate_rows
from .kernels import categorical_rows, onehot_rows, softmax_rows
from .nn import (
    Mlp,
    bernoulli_nll,
    bernoulli_nll_per_row,
    init_params,
    kl_uniform_categorical,
    mlp_backward,
    mlp_forward,
    optimizer_step,
)
from .rng import stream, uniform_open


@dataclass
class VaeModel:
    encoder: Mlp
    decoder: Mlp
    n: int
    L: int

    def __post_init__(self):
        if self.encoder.dims[-1] != self.L * self.n:
            raise ConfigError("encoder output dim must equal L*n")
        if self.decoder.dims[0] != self.L * self.n:
            raise ConfigError("decoder input dim must equal L*n")

    def param_arrays(self) -> list[np.ndarray]:
        return self.encoder.param_arrays() + self.decoder.param_arrays()

    def copy(self) -> "VaeModel":
        return VaeModel(self.encoder.copy(), self.decoder.copy(), self.n, self.L)


@dataclass(frozen=True)
class ElboBreakdown:
    """Negative ELBO split into its two parts, in nats per image."""

    recon_nll: float
    kl: float

    @property
    def neg_elbo(self) -> float:
        return self.recon_nll + self.kl


def build_vae(
    seed: int,
    n: int,
    L: int,
    image_dim: int = 784,
    enc_hidden=(512, 256),
    dec_hidden=(256, 512),
) -> VaeModel:
    """Fresh model with deterministic init from the seed."""
    r = stream(seed, rngmod.INIT)
    enc = init_params(r, [image_dim, *enc_hidden, L * n])
    dec = init_params(r, [L * n, *dec_hidden, image_dim])
    return VaeModel(enc, dec, n=n, L=L)


def encode(model: VaeModel, images: np.ndarray):
    """Encoder forward; logits reshaped to (B, L, n)."""
    out, cache = mlp_forward(model.encoder, images)
    return out.reshape(images.shape[0], model.L, model.n), cache


def decode(model: VaeModel, latents: np.ndarray):
    """Decoder forward on flattened one-hot latents (B, L, n) -> pixel logits."""
    b = latents.shape[0]
    return mlp_forward(model.decoder, latents.reshape(b, model.L * model.n))


# Estimators whose backward pass consumes the forward Gumbel perturbation;
# they sample by Gumbel argmax and retain it. Everything else samples by
# inverse CDF (same distribution).
GUMBEL_ROUTE_KINDS = ("stgs", "reinmax_cv")


def sample_latents(logits: np.ndarray, rng: np.random.Generator, kind: str):
    """Sample one outcome per slot, plus the perturbation when the estimator
    needs it."""
    B, L, n = logits.shape
    flat = logits.reshape(B * L, n)
    if kind in GUMBEL_ROUTE_KINDS:
        gum = -np.log(-np.log(uniform_open(rng, (B * L, n))))
        d_idx = np.argmax(flat + gum, axis=-1)
        gumbel = gum
    else:
        u = rng.random(B * L)
        d_idx = categorical_rows(softmax_rows(flat, 1.0), u)
        gumbel = None
    onehots = onehot_rows(d_idx, n).reshape(B, L, n)
    return d_idx.reshape(B, L), onehots, gumbel


def elbo(model: VaeModel, images: np.ndarray, latents: np.ndarray) -> ElboBreakdown:
    """Negative ELBO of a batch given sampled latents, nats per image.

    Reconstruction uses the sampled one-hots; the KL term is computed
    analytically from the posterior, not from samples.
    """
    if images.shape[0] != latents.shape[0]:
        raise ConfigError("batch size mismatch between images and latents")
    B = images.shape[0]
    logits, _ = encode(model, images)
    pixel_logits, _ = decode(model, latents)
    nll, _ = bernoulli_nll(pixel_logits, images)
    kl, _ = kl_uniform_categorical(logits)
    return ElboBreakdown(recon_nll=nll / B, kl=kl / B)


def exact_slot_gradients(
    model: VaeModel, images: np.ndarray, latents: np.ndarray, logits: np.ndarray
) -> np.ndarray:
    """Exact reconstruction-path gradient per slot, conditioning on the other
    slots' sampled values.

    For each slot, enumerates all n outcomes with the remaining slots fixed
    and contracts the per-image losses with the softmax jacobian. Returns a
    (B, L, n) array scaled like the batch-mean loss gradient.
    """
    B, L, n = logits.shape
    pi = softmax_rows(logits.reshape(B * L, n), 1.0).reshape(B, L, n)
    fvals = np.empty((B, L, n))
    for l in range(L):
        base = latents.copy()
        for i in range(n):
            base[:, l, :] = 0.0
            base[:, l, i] = 1.0
            pixel_logits, _ = mlp_forward(model.decoder, base.reshape(B, L * n))
            fvals[:, l, i] = bernoulli_nll_per_row(pixel_logits, images)
    # grad_k = sum_i f_i * pi_i (delta_ik - pi_k)
    weighted = pi * fvals
    grad = weighted - pi * weighted.sum(axis=-1, keepdims=True)
    return grad / B


def compute_gradients(
    model: VaeModel,
    images: np.ndarray,
    config: EstimatorConfig,
    rng: np.random.Generator,
):
    """One forward/backward pass of the batch-mean loss.

    Returns (encoder grads, decoder grads, breakdown, slot grads). The
    decoder path is independent of the estimator choice; only the slot-logit
    gradient differs.
    """
    B = images.shape[0]
    logits, enc_cache = encode(model, images)
    d_idx, onehots, gumbel = sample_latents(logits, rng, config.kind)
    pixel_logits, dec_cache = decode(model, onehots)
    nll, nll_cot = bernoulli_nll(pixel_logits, images)
    kl, kl_cot = kl_uniform_categorical(logits)
    breakdown = ElboBreakdown(recon_nll=nll / B, kl=kl / B)
    if not np.isfinite(breakdown.neg_elbo):
        raise NumericsError(f"non-finite loss: recon={breakdown.recon_nll} kl={breakdown.kl}")
    dinput, dec_grads = mlp_backward(model.decoder, dec_cache, nll_cot / B)
    g = dinput.reshape(B, model.L, model.n)
    if config.kind == "exact":
        slot_grad = exact_slot_gradients(model, images, onehots, logits)
    else:
        S = B * model.L
        slot_grad = estimate_rows(
            config,
            g.reshape(S, model.n),
            d_idx.reshape(S),
            logits.reshape(S, model.n),
            rng=rng,
            gumbel=gumbel,
        ).reshape(B, model.L, model.n)
    enc_cot = (slot_grad + kl_cot / B).reshape(B, model.L * model.n)
    _, enc_grads = mlp_backward(model.encoder, enc_cache, enc_cot)
    return enc_grads, dec_grads, breakdown, slot_grad


def train_step(model, images, config, opt_state, rng):
    """One optimizer step on the batch. Returns the loss breakdown."""
    enc_grads, dec_grads, breakdown, _ = compute_gradients(model, images, config, rng)
    params = model.param_arrays()
    grads = enc_grads.param_arrays() + dec_grads.param_arrays()
    optimizer_step(opt_state, params, grads)
    return breakdown


def evaluate(model: VaeModel, images: np.ndarray, seed: int, batch_size: int = 100) -> ElboBreakdown:
    """Mean negative ELBO over a split with fresh, seeded latent samples."""
    N = images.shape[0]
    if N == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    tot_nll = 0.0
    tot_kl = 0.0
    for bi, start in enumerate(range(0, N, batch_size)):
        batch = images[start : start + batch_size]
        B = batch.shape[0]
        logits, _ = encode(model, batch)
        _, onehots, _ = sample_latents(logits, stream(seed, rngmod.EVAL, bi), "st")
        pixel_logits, _ = decode(model, onehots)
        nll, _ = bernoulli_nll(pixel_logits, batch)
        kl, _ = kl_uniform_categorical(logits)
        tot_nll += nll
        tot_kl += kl
    return ElboBreakdown(recon_nll=tot_nll / N, kl=tot_kl / N)
