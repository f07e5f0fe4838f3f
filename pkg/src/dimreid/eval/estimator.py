"""Train a bare discriminator on samples of a known joint and compare its
Jensen-Shannon estimate with the exact value."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import numerics as nx
from ..models import DimDiscriminator
from ..objectives import LN2, dim_loss, jsd_estimate, pair_random

Sampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


def discrete_sampler(joint) -> Sampler:
    """Draw (X, Z) state pairs from a probability table, one-hot encoded."""
    p = np.asarray(getattr(joint, "probs", joint), dtype=np.float64)
    nx_states, nz_states = p.shape
    cdf = np.cumsum(p.ravel())

    def sample(rng: np.random.Generator, n: int):
        cells = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), p.size - 1)
        xi, zi = np.divmod(cells, nz_states)
        return np.eye(nx_states)[xi], np.eye(nz_states)[zi]

    return sample


def gaussian_sampler(rho: float) -> Sampler:
    """Unit-variance bivariate Gaussian with correlation ``rho``."""
    scale = math.sqrt(1.0 - rho * rho)

    def sample(rng: np.random.Generator, n: int):
        x = rng.standard_normal(n)
        z = rho * x + scale * rng.standard_normal(n)
        return x[:, None], z[:, None]

    return sample


@dataclass
class ConvergenceReport:
    final_estimate: float
    oracle: float | None
    steps: int
    trace: list[float] = field(default_factory=list)
    failed: bool = False
    message: str = ""

    @property
    def gap(self) -> float:
        return abs(self.final_estimate - self.oracle) if self.oracle is not None else float("nan")

    def to_record(self) -> dict:
        return {
            "final_estimate": self.final_estimate,
            "oracle": self.oracle,
            "gap": self.gap,
            "steps": self.steps,
            "failed": self.failed,
            "message": self.message,
        }


def estimate_convergence(
    sampler: Sampler,
    oracle: float | None = None,
    steps: int = 2000,
    batch: int = 256,
    lr: float = 0.5,
    hidden: tuple[int, int, int] = (64, 64, 32),
    seed: int = 0,
    eval_samples: int = 32768,
    trace_every: int = 50,
) -> ConvergenceReport:
    """Fit a fresh discriminator by SGD on ``dim_loss`` and report the final
    estimate on ``eval_samples`` fresh pairs.

    Negatives are formed from the joint samples by the same cyclic-shift
    sampling used in training, which yields exact product-of-marginals pairs
    for i.i.d. draws.
    """
    data_rng = nx.make_rng(seed, 0)
    x0, z0 = sampler(data_rng, 2)
    D = DimDiscriminator(x0.shape[1] + z0.shape[1], hidden, nx.make_rng(seed, 1))
    params = [p for _, p in D.named_parameters()]
    state = nx.SgdState(base_lr=lr, decay_factor=1.0, decay_epoch=0)
    trace: list[float] = []
    try:
        for step in range(steps):
            x, z = sampler(data_rng, batch)
            with nx.Tape() as tape:
                pairs = pair_random(nx.Tensor(x), nx.Tensor(z), data_rng)
                loss = dim_loss(D, pairs)
            nx.sgd_step(params, nx.backward(loss, tape), state)
            if step % trace_every == 0 or step == steps - 1:
                trace.append(LN2 - 0.5 * float(loss.data))
        x, z = sampler(data_rng, eval_samples)
        final = jsd_estimate(D, pair_random(nx.Tensor(x), nx.Tensor(z), data_rng))
    except nx.NumericError as exc:
        return ConvergenceReport(float("nan"), oracle, steps, trace, True, f"numeric failure: {exc}")
    if final > LN2 + 0.01:
        return ConvergenceReport(final, oracle, steps, trace, True, "estimate exceeded ln 2")
    return ConvergenceReport(final, oracle, steps, trace)
