"""Pure-Python ranking loop, used when the compiled kernel is unavailable."""
import numpy as np


def rank_queries(order, q_ids, q_cams, g_ids, g_cams):
    """Per query: 0-based position of the first relevant item among the kept
    gallery (-1 if none) and the average precision over relevant positions.

    Gallery entries sharing both identity and camera with the query are
    dropped before ranking positions are counted.
    """
    nq = order.shape[0]
    first_hit = np.full(nq, -1, dtype=np.int64)
    aps = np.zeros(nq, dtype=np.float64)
    for q in range(nq):
        ranked = order[q]
        ids = g_ids[ranked]
        keep = ~((ids == q_ids[q]) & (g_cams[ranked] == q_cams[q]))
        matches = ids[keep] == q_ids[q]
        hits = int(matches.sum())
        if hits == 0:
            continue
        positions = np.flatnonzero(matches)
        first_hit[q] = positions[0]
        precision = np.arange(1, hits + 1) / (positions + 1.0)
        # cumsum keeps the sequential order of the compiled loop
        aps[q] = np.cumsum(precision)[-1] / hits
    return first_hit, aps
