"""Single-query CMC and mAP evaluation without re-ranking."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import _rank_py

if os.environ.get("DIMREID_PURE_PYTHON"):
    _rank_cy = None
else:
    try:
        from . import _rank_cy
    except ImportError:  # extension not built
        _rank_cy = None

BACKEND = "cython" if _rank_cy is not None else "python"
DEFAULT_KS = (1, 5, 10)


def rank_queries(order, q_ids, q_cams, g_ids, g_cams, backend: str | None = None):
    backend = backend or BACKEND
    args = [np.ascontiguousarray(a, dtype=np.int64) for a in (order, q_ids, q_cams, g_ids, g_cams)]
    if backend == "cython":
        if _rank_cy is None:
            raise RuntimeError("compiled ranking kernel is not available")
        return _rank_cy.rank_queries(*args)
    return _rank_py.rank_queries(*args)


@dataclass
class EvalResult:
    rank_k: dict[int, float]
    mAP: float
    num_queries: int
    skipped: int = 0
    extra: dict[str, float] = field(default_factory=dict)

    def to_record(self) -> dict[str, float]:
        """Flat metric-name -> value mapping for reports."""
        rec = {f"rank{k}": v for k, v in sorted(self.rank_k.items())}
        rec.update(mAP=self.mAP, num_queries=self.num_queries, skipped=self.skipped)
        rec.update(self.extra)
        return rec


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def pairwise_distance(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(sq, 0.0))


def cmc_map(
    query_emb,
    query_ids,
    query_cams,
    gallery_emb,
    gallery_ids,
    gallery_cams,
    ks=DEFAULT_KS,
    normalize: bool = True,
    backend: str | None = None,
) -> EvalResult:
    """Rank the gallery for every query by Euclidean distance (on unit-norm
    embeddings by default) and score CMC rank-k and mAP.

    Gallery items with the query's identity *and* camera are excluded.
    Queries left with no relevant item are skipped and counted in
    ``EvalResult.skipped``. Ties keep gallery index order.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if g.shape[0] == 0:
        raise ValueError("gallery is empty")
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: query {q.shape}, gallery {g.shape}")
    if normalize:
        q, g = l2_normalize(q), l2_normalize(g)
    order = np.argsort(pairwise_distance(q, g), axis=1, kind="stable")
    first_hit, aps = rank_queries(order, query_ids, query_cams, gallery_ids, gallery_cams, backend)
    valid = first_hit >= 0
    n_valid = int(valid.sum())
    skipped = int(q.shape[0] - n_valid)
    if n_valid == 0:
        return EvalResult({k: 0.0 for k in ks}, 0.0, 0, skipped)
    hits = first_hit[valid]
    rank_k = {int(k): float((hits < k).mean()) for k in ks}
    return EvalResult(rank_k, float(aps[valid].mean()), n_valid, skipped)
