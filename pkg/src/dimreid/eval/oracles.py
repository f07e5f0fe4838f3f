"""Closed-form and direct-summation references for the learned estimators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class DiscreteJoint:
    """Probability table over (X state, Z state)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.size == 0:
            raise ValueError(f"joint must be a non-empty matrix, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("joint has negative or non-finite entries")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    @property
    def product(self) -> np.ndarray:
        return np.outer(self.probs.sum(1), self.probs.sum(0))


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd_discrete_oracle(joint) -> float:
    """Jensen-Shannon divergence (nats) between a joint and the product of
    its marginals, by direct summation."""
    if not isinstance(joint, DiscreteJoint):
        joint = DiscreteJoint(np.asarray(joint))
    p, q = joint.probs, joint.product
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def mi_discrete(joint) -> float:
    if not isinstance(joint, DiscreteJoint):
        joint = DiscreteJoint(np.asarray(joint))
    return _kl(joint.probs, joint.product)


def _check_rho(rho: float) -> None:
    if not -1.0 < rho < 1.0:
        raise ValueError(f"|rho| must be < 1 (mutual information diverges), got {rho}")


def gaussian_mi_oracle(rho: float) -> float:
    """Mutual information of a unit-variance bivariate Gaussian: ``-ln(1 - rho^2) / 2``."""
    _check_rho(rho)
    return -0.5 * math.log1p(-rho * rho)


def _gauss_pdf(x, z, rho):
    det = 1.0 - rho * rho
    return np.exp(-(x * x - 2 * rho * x * z + z * z) / (2 * det)) / (2 * math.pi * math.sqrt(det))


def _indep_pdf(x, z):
    return np.exp(-(x * x + z * z) / 2) / (2 * math.pi)


def gaussian_mi_quadrature(rho: float, limit: float = 9.0) -> float:
    """Numerically integrate ``p(x,z) log(p(x,z) / p(x)p(z))`` over a box."""
    _check_rho(rho)

    def integrand(z, x):
        p = _gauss_pdf(x, z, rho)
        return p * math.log(p / _indep_pdf(x, z)) if p > 0 else 0.0

    val, _ = integrate.dblquad(integrand, -limit, limit, -limit, limit, epsabs=1e-10, epsrel=1e-10)
    return val


def gaussian_jsd_oracle(rho: float, limit: float = 9.0) -> float:
    """Jensen-Shannon divergence (nats) between the correlated Gaussian and
    the product of its standard-normal marginals, by 2-D quadrature."""
    _check_rho(rho)

    def integrand(z, x):
        p, q = _gauss_pdf(x, z, rho), _indep_pdf(x, z)
        m = 0.5 * (p + q)
        out = 0.0
        if p > 0:
            out += 0.5 * p * math.log(p / m)
        if q > 0:
            out += 0.5 * q * math.log(q / m)
        return out

    val, _ = integrate.dblquad(integrand, -limit, limit, -limit, limit, epsabs=1e-10, epsrel=1e-10)
    return val
