# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-query ranking loop; mirrors ``_rank_py.rank_queries``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def rank_queries(
    const cnp.int64_t[:, ::1] order,
    const cnp.int64_t[::1] q_ids,
    const cnp.int64_t[::1] q_cams,
    const cnp.int64_t[::1] g_ids,
    const cnp.int64_t[::1] g_cams,
):
    cdef Py_ssize_t nq = order.shape[0]
    cdef Py_ssize_t ng = order.shape[1]
    cdef Py_ssize_t q, j, g, kept, hits, first
    cdef double ap
    first_hit = np.full(nq, -1, dtype=np.int64)
    aps = np.zeros(nq, dtype=np.float64)
    cdef cnp.int64_t[::1] fh = first_hit
    cdef double[::1] ap_out = aps
    for q in range(nq):
        kept = 0
        hits = 0
        first = -1
        ap = 0.0
        for j in range(ng):
            g = order[q, j]
            if g_ids[g] == q_ids[q] and g_cams[g] == q_cams[q]:
                continue
            kept += 1
            if g_ids[g] == q_ids[q]:
                hits += 1
                if first < 0:
                    first = kept - 1
                ap += <double>hits / <double>kept
        if hits > 0:
            fh[q] = first
            ap_out[q] = ap / hits
    return first_hit, aps
