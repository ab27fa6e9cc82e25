"""Straight-through gradient estimators for categorical latent variables,
with an exact-gradient oracle, a discrete-VAE training stack, and
bias/variance analysis tooling."""

from .estimators import (
    EstimatorConfig,
    LossOracle,
    enumerate_expectation,
    estimate,
    estimate_rows,
    exact_gradient,
    exact_gradient_baseline,
    first_order_reference,
    gumbel_rao,
    reinmax,
    reinmax_argmax,
    reinmax_cv,
    reinmax_rao,
    reinmax_rk2,
    reinmax_two_st,
    rk2_reference,
    second_order_reference,
    shifted_logits,
    st_gumbel_softmax,
    straight_through,
)
from .kernels import active_backend
from .vae import VaeModel, build_vae, elbo, evaluate, train_step

__version__ = "0.1.0"

__all__ = [
    "EstimatorConfig",
    "LossOracle",
    "VaeModel",
    "active_backend",
    "build_vae",
    "elbo",
    "enumerate_expectation",
    "estimate",
    "estimate_rows",
    "evaluate",
    "exact_gradient",
    "exact_gradient_baseline",
    "first_order_reference",
    "gumbel_rao",
    "reinmax",
    "reinmax_argmax",
    "reinmax_cv",
    "reinmax_rao",
    "reinmax_rk2",
    "reinmax_two_st",
    "rk2_reference",
    "second_order_reference",
    "shifted_logits",
    "st_gumbel_softmax",
    "straight_through",
    "train_step",
    "__version__",
]
