"""Retrieval metrics, exact oracles, gradient checking, estimator benchmarks."""
from .estimator import ConvergenceReport, discrete_sampler, estimate_convergence, gaussian_sampler
from .gradcheck import NondeterministicLoss, gradient_check
from .oracles import (
    DiscreteJoint,
    gaussian_jsd_oracle,
    gaussian_mi_oracle,
    gaussian_mi_quadrature,
    jsd_discrete_oracle,
    mi_discrete,
)
from .retrieval import BACKEND, EvalResult, cmc_map

__all__ = [
    "BACKEND",
    "ConvergenceReport",
    "DiscreteJoint",
    "EvalResult",
    "NondeterministicLoss",
    "cmc_map",
    "discrete_sampler",
    "estimate_convergence",
    "gaussian_jsd_oracle",
    "gaussian_mi_oracle",
    "gaussian_mi_quadrature",
    "gaussian_sampler",
    "gradient_check",
    "jsd_discrete_oracle",
    "mi_discrete",
]
