"""Classification losses, the Jensen-Shannon infomax loss, and pair sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .models import DimDiscriminator
from .numerics import Tensor

LN2 = math.log(2.0)
SCORE_FLOOR = 1e-7


class SamplingError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    alpha: float = 1.0
    beta: float = 0.02
    lam: float = 0.01
    sampling: str = "random"
    adversarial_discriminator: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("alpha, beta and lambda must be non-negative")
        if self.sampling not in ("random", "labeled"):
            raise ValueError(f"sampling must be 'random' or 'labeled', got {self.sampling!r}")


@dataclass
class PairBatch:
    """Positive rows ``(pos_u[i], pos_z[i])`` come from the same sample;
    negative rows pair sample ``neg_index[i]``'s input side with sample
    ``i``'s embedding."""

    pos_u: Tensor
    pos_z: Tensor
    neg_u: Tensor
    neg_z: Tensor
    neg_index: np.ndarray

    def __len__(self) -> int:
        return self.pos_u.shape[0]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy of an empty batch")
    if labels.shape != (n,):
        raise nx.DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = -1.0 / n
    return nx.reduce_sum(nx.mul(nx.log_softmax(logits), onehot))


def part_cross_entropy(logits_list: Sequence[Tensor], labels) -> Tensor:
    """Sum over branches of each branch's mean cross-entropy."""
    if not logits_list:
        raise ValueError("part_cross_entropy needs at least one branch")
    shape = logits_list[0].shape
    for lg in logits_list:
        if lg.shape != shape:
            raise nx.DimensionError(f"branch logits disagree: {lg.shape} vs {shape}")
    total = cross_entropy(logits_list[0], labels)
    for lg in logits_list[1:]:
        total = total + cross_entropy(lg, labels)
    return total


def pair_random(u: Tensor, z: Tensor, rng: np.random.Generator) -> PairBatch:
    """Negatives take the input side from a cyclic shift ``s`` in ``1..N-1``.

    A shared shift is a derangement, so no negative reuses its own index.
    """
    n = u.shape[0]
    if n < 2:
        raise SamplingError("cannot form negative pairs from fewer than 2 samples")
    if z.shape[0] != n:
        raise nx.DimensionError(f"batch mismatch: {u.shape} vs {z.shape}")
    shift = int(rng.integers(1, n))
    index = (np.arange(n) + shift) % n
    return PairBatch(u, z, nx.take_rows(u, index), z, index)


def pair_labeled(u: Tensor, z: Tensor, labels, rng: np.random.Generator) -> PairBatch:
    """Each negative's input side is drawn uniformly among samples whose
    label differs from the embedding's label."""
    labels = np.asarray(labels)
    n = u.shape[0]
    if n < 2:
        raise SamplingError("cannot form negative pairs from fewer than 2 samples")
    if np.unique(labels).size < 2:
        raise SamplingError("no valid negatives: all labels identical")
    index = np.empty(n, dtype=np.intp)
    for i in range(n):
        candidates = np.flatnonzero(labels != labels[i])
        index[i] = candidates[rng.integers(candidates.size)]
    return PairBatch(u, z, nx.take_rows(u, index), z, index)


def make_pairs(u: Tensor, z: Tensor, rng, sampling: str = "random", labels=None) -> PairBatch:
    if sampling == "random":
        return pair_random(u, z, rng)
    if sampling == "labeled":
        if labels is None:
            raise SamplingError("labeled sampling needs identity labels")
        return pair_labeled(u, z, labels, rng)
    raise ValueError(f"unknown sampling strategy {sampling!r}")


def _guarded(scores: Tensor) -> Tensor:
    if not np.all(np.isfinite(scores.data)):
        raise nx.NumericError("discriminator produced non-finite scores")
    return nx.clamp(scores, SCORE_FLOOR, 1.0 - SCORE_FLOOR)


def _bound_terms(D: DimDiscriminator, pairs: PairBatch) -> tuple[Tensor, Tensor]:
    if len(pairs) == 0 or pairs.neg_u.shape[0] != len(pairs):
        raise SamplingError("positive and negative batches must be equal and non-empty")
    pos = _guarded(D(pairs.pos_u, pairs.pos_z))
    neg = _guarded(D(pairs.neg_u, pairs.neg_z))
    return nx.reduce_mean(nx.log(pos)), nx.reduce_mean(nx.log(1.0 - neg))


def dim_loss(D: DimDiscriminator, pairs: PairBatch, alpha: float = 1.0) -> Tensor:
    """``-alpha * (E_pos[log D] + E_neg[log(1 - D)])``, which is ``>= 0``.

    Minimising it tightens the Jensen-Shannon bound for the discriminator
    and raises the encoder's input/embedding dependence at the same time.
    """
    pos_term, neg_term = _bound_terms(D, pairs)
    return nx.mul(pos_term + neg_term, -float(alpha))


def jsd_estimate(D: DimDiscriminator, pairs: PairBatch) -> float:
    """Jensen-Shannon estimate in nats: 0 for an uninformative
    discriminator, ``ln 2`` for a perfect one."""
    with nx.no_tape():
        pos_term, neg_term = _bound_terms(D, pairs)
    return 0.5 * (float(pos_term.data) + float(neg_term.data)) + LN2


def jsd_from_scores(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    pos = np.clip(pos_scores, SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    neg = np.clip(neg_scores, SCORE_FLOOR, 1.0 - SCORE_FLOOR)
    return 0.5 * (float(np.log(pos).mean()) + float(np.log(1.0 - neg).mean())) + LN2


def global_objective(ce: Tensor, dim: Tensor, beta: float) -> Tensor:
    return ce + nx.mul(dim, float(beta))


def local_objective(pce: Tensor, dim_per_part: Sequence[Tensor], lam: float) -> Tensor:
    if not dim_per_part:
        raise ValueError("local_objective needs at least one part loss")
    total = dim_per_part[0]
    for d in dim_per_part[1:]:
        total = total + d
    return pce + nx.mul(total, float(lam))
