# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _unit(const double[::1] src, double[::1] dst) noexcept nogil:
    # Same recipe as _kernels_py.unit_rows: scale by max-abs, then by the norm.
    cdef Py_ssize_t d, D = src.shape[0]
    cdef double s = 0.0, acc = 0.0, v
    for d in range(D):
        if fabs(src[d]) > s:
            s = fabs(src[d])
    if s == 0.0:
        for d in range(D):
            dst[d] = 0.0
        return
    for d in range(D):
        v = src[d] / s
        dst[d] = v
        acc += v * v
    acc = sqrt(acc)
    for d in range(D):
        dst[d] = dst[d] / acc


def max_cosine_pool(patches, protos):
    cdef const double[:, :, ::1] x = np.ascontiguousarray(patches, dtype=np.float64)
    cdef const double[:, ::1] p = np.ascontiguousarray(protos, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], D = x.shape[2], K = p.shape[0]
    if p.shape[1] != D:
        raise ValueError(f"prototype dim {p.shape[1]} does not match patch dim {D}")
    if N == 0:
        raise ValueError("max over an empty patch axis")

    xn_arr = np.empty((N, D), dtype=np.float64)
    pn_arr = np.empty((K, D), dtype=np.float64)
    field_arr = np.empty((N, K), dtype=np.float64)
    smax_arr = np.empty((B, K), dtype=np.float64)
    smean_arr = np.empty((B, K), dtype=np.float64)
    idx_arr = np.empty((B, K), dtype=np.int64)
    cdef double[:, ::1] xn = xn_arr
    cdef double[:, ::1] pn = pn_arr
    cdef double[:, ::1] field = field_arr
    cdef double[:, ::1] smax = smax_arr
    cdef double[:, ::1] smean = smean_arr
    cdef cnp.int64_t[:, ::1] idx = idx_arr

    cdef Py_ssize_t b, n, k
    cdef int m = <int>K, cols = <int>N, inner = <int>D
    cdef double one = 1.0, zero = 0.0
    cdef char trans = b"N"
    cdef double v

    for k in range(K):
        _unit(p[k], pn[k])
    # row-major (D, K) is the column-major K x D matrix dgemm wants
    pt_arr = np.ascontiguousarray(pn_arr.T)
    cdef double[:, ::1] pt = pt_arr

    for b in range(B):
        for n in range(N):
            _unit(x[b, n], xn[n])
        if K == 0:
            continue
        if D == 0:
            field_arr[...] = 0.0
        else:
            # field (N, K) = xn @ pn.T, computed as its column-major transpose
            dgemm(&trans, &trans, &m, &cols, &inner, &one, &pt[0, 0], &m, &xn[0, 0], &inner,
                  &zero, &field[0, 0], &m)
        for k in range(K):
            smax[b, k] = field[0, k]
            smean[b, k] = field[0, k]
            idx[b, k] = 0
        for n in range(1, N):
            for k in range(K):
                v = field[n, k]
                smean[b, k] += v
                if v > smax[b, k]:
                    smax[b, k] = v
                    idx[b, k] = n
        for k in range(K):
            smean[b, k] /= N
    return smax_arr, idx_arr, smean_arr


def trim_counts(counts, long species_cap, long min_per_recording, drop_order):
    c_arr = np.array(counts, dtype=np.int64)
    cdef cnp.int64_t[::1] c = c_arr
    cdef const cnp.int64_t[::1] order = np.ascontiguousarray(drop_order, dtype=np.int64)
    cdef Py_ssize_t R = c.shape[0], i
    cdef long total = 0, level = 0
    for i in range(R):
        total += c[i]
        if c[i] > level:
            level = c[i]
    if total <= species_cap:
        return c_arr
    # Sweeping each level in index order reproduces "max count, lowest index first".
    while total > species_cap and level > min_per_recording:
        for i in range(R):
            if total <= species_cap:
                break
            if c[i] == level:
                c[i] -= 1
                total -= 1
        level -= 1
    for i in range(order.shape[0]):
        if total <= species_cap:
            break
        if c[order[i]] > 0:
            total -= c[order[i]]
            c[order[i]] = 0
    return c_arr


def argmax_mid(x):
    cdef const double[:, :, ::1] a = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t P = a.shape[0], N = a.shape[1], Q = a.shape[2], i, n, q
    vals_arr = np.empty((P, Q), dtype=np.float64)
    idx_arr = np.zeros((P, Q), dtype=np.int64)
    cdef double[:, ::1] vals = vals_arr
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    if N == 0:
        raise ValueError("max over an empty axis")
    for i in range(P):
        for q in range(Q):
            vals[i, q] = a[i, 0, q]
        for n in range(1, N):
            for q in range(Q):
                # strict comparison keeps the lowest index on ties
                if a[i, n, q] > vals[i, q]:
                    vals[i, q] = a[i, n, q]
                    idx[i, q] = n
    return vals_arr, idx_arr


def scatter_mid(idx_in, g_in, Py_ssize_t n):
    cdef const cnp.int64_t[:, ::1] idx = np.ascontiguousarray(idx_in, dtype=np.int64)
    cdef const double[:, ::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef Py_ssize_t P = g.shape[0], Q = g.shape[1], i, q
    out_arr = np.zeros((P, n, Q), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for i in range(P):
        for q in range(Q):
            out[i, idx[i, q], q] = g[i, q]
    return out_arr
