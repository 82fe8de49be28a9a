# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same contracts as ``mcomm._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, log2, sqrt, NAN

cnp.import_array()

ENTROPY_EPS = 1e-12


cdef double _row_entropy(const double[:, :] m, Py_ssize_t i, double eps) nogil:
    cdef Py_ssize_t k, d = m.shape[1]
    cdef double s = 0.0, p, h = 0.0
    for k in range(d):
        s += fabs(m[i, k])
    s += eps
    for k in range(d):
        p = fabs(m[i, k]) / s
        if p > 0.0:
            h -= p * log2(p)
    return h + 0.0


def entropy_rows(m, double eps=ENTROPY_EPS):
    cdef const double[:, :] mv = np.ascontiguousarray(m, dtype=np.float64)
    cdef Py_ssize_t i, r = mv.shape[0]
    out = np.empty(r)
    cdef double[:] ov = out
    with nogil:
        for i in range(r):
            ov[i] = _row_entropy(mv, i, eps)
    return out


def round_stats(m, active, Py_ssize_t group, double eps=ENTROPY_EPS):
    cdef const double[:, :] mv = np.ascontiguousarray(m, dtype=np.float64)
    cdef const cnp.uint8_t[:] av = np.ascontiguousarray(active, dtype=np.uint8).reshape(-1)
    cdef Py_ssize_t rows = mv.shape[0], d = mv.shape[1]
    cdef Py_ssize_t nblk = rows // group
    cdef Py_ssize_t b, i, j, k, base, n_act
    cdef double hsum, dot, ni, nj, ssum
    h_out = np.empty(nblk)
    xi_out = np.empty(nblk)
    norms_arr = np.empty(rows)
    cdef double[:] hv = h_out
    cdef double[:] xv = xi_out
    cdef double[:] nv = norms_arr
    with nogil:
        for i in range(rows):
            ni = 0.0
            for k in range(d):
                ni += mv[i, k] * mv[i, k]
            nv[i] = sqrt(ni)
        for b in range(nblk):
            base = b * group
            n_act = 0
            hsum = 0.0
            for i in range(group):
                if av[base + i]:
                    n_act += 1
                    hsum += _row_entropy(mv, base + i, eps)
            hv[b] = hsum / n_act if n_act > 0 else NAN
            if n_act < 2:
                xv[b] = NAN
                continue
            ssum = 0.0
            for i in range(group):
                if not av[base + i] or nv[base + i] == 0.0:
                    continue
                for j in range(i + 1, group):
                    if not av[base + j] or nv[base + j] == 0.0:
                        continue
                    dot = 0.0
                    for k in range(d):
                        dot += mv[base + i, k] * mv[base + j, k]
                    ssum += dot / (nv[base + i] * nv[base + j])
            xv[b] = ssum / (0.5 * n_act * (n_act - 1))
    return h_out, xi_out


def count_edges(g, Py_ssize_t group):
    cdef const double[:, :] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t r, j, rows = gv.shape[0]
    cdef double total = 0.0
    with nogil:
        for r in range(rows):
            for j in range(group):
                if j != r % group:
                    total += gv[r, j]
    return int(total + 0.5)


def topk_mask(scores, active, Py_ssize_t k):
    cdef const double[:, :] sv = np.ascontiguousarray(scores, dtype=np.float64)
    cdef const cnp.uint8_t[:] av = np.ascontiguousarray(active, dtype=np.uint8)
    cdef Py_ssize_t n = sv.shape[0], i, j, t, best
    out = np.zeros((n, n))
    cdef double[:, :] ov = out
    cdef double bs
    with nogil:
        for i in range(n):
            if not av[i]:
                continue
            for t in range(k):
                best = -1
                bs = 0.0
                for j in range(n):
                    if j == i or not av[j] or ov[i, j] != 0.0:
                        continue
                    if best < 0 or sv[i, j] > bs:
                        best = j
                        bs = sv[i, j]
                if best < 0:
                    break
                ov[i, best] = 1.0
    return out


def tj_observe(counts, road, pos, route, active, int vision, int n_routes):
    cdef const cnp.int64_t[:, :] cv = np.ascontiguousarray(counts, dtype=np.int64)
    cdef const double[:, :] rv = np.ascontiguousarray(road, dtype=np.float64)
    cdef const cnp.int64_t[:, :] pv = np.ascontiguousarray(pos, dtype=np.int64)
    cdef const cnp.int64_t[:] ro = np.ascontiguousarray(route, dtype=np.int64)
    cdef const cnp.uint8_t[:] av = np.ascontiguousarray(active, dtype=np.uint8)
    cdef Py_ssize_t d = cv.shape[0], n = av.shape[0]
    cdef Py_ssize_t w = 2 * vision + 1
    cdef Py_ssize_t patch_len = w * w * 3
    cdef Py_ssize_t dim = patch_len + d * d + n_routes + 1
    cdef Py_ssize_t a, r0, c0, r, c, k, dr, dc
    obs = np.zeros((n, dim))
    cdef double[:, :] ov = obs
    with nogil:
        for a in range(n):
            if not av[a]:
                ov[a, dim - 1] = 1.0
                continue
            r0 = pv[a, 0]
            c0 = pv[a, 1]
            k = 0
            for dr in range(-vision, vision + 1):
                for dc in range(-vision, vision + 1):
                    r = r0 + dr
                    c = c0 + dc
                    if 0 <= r < d and 0 <= c < d:
                        ov[a, k] = rv[r, c]
                        ov[a, k + 1] = cv[r, c] - (1 if (dr == 0 and dc == 0) else 0)
                    else:
                        ov[a, k + 2] = 1.0
                    k += 3
            ov[a, patch_len + r0 * d + c0] = 1.0
            ov[a, patch_len + d * d + ro[a]] = 1.0
    return obs
