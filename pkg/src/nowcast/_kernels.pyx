# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel verification kernels.

All kernels take members as a C-contiguous ``(X, P)`` float64 array and
observations as ``(P,)``. They return domain *sums* so callers can pool
samples before dividing.
"""

from libc.math cimport fabs, sqrt
from libc.stdlib cimport free, malloc

import numpy as np


cdef inline void _insertion_sort(double* a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double key
    for i in range(1, n):
        key = a[i]
        j = i - 1
        while j >= 0 and a[j] > key:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = key


def crps_sum(const double[:, ::1] members, const double[::1] obs, bint fair=False):
    cdef Py_ssize_t n_mem = members.shape[0]
    cdef Py_ssize_t n_pix = members.shape[1]
    if obs.shape[0] != n_pix:
        raise ValueError("members and obs disagree on pixel count")
    if n_mem < 1:
        raise ValueError("empty ensemble")
    cdef double* buf = <double*> malloc(n_mem * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef Py_ssize_t i, p
    cdef double y, skill, spread, total = 0.0
    cdef double spread_norm
    if fair and n_mem > 1:
        spread_norm = 1.0 / (<double> n_mem * (n_mem - 1))
    else:
        spread_norm = 1.0 / (<double> n_mem * n_mem)
    try:
        with nogil:
            for p in range(n_pix):
                y = obs[p]
                skill = 0.0
                for i in range(n_mem):
                    buf[i] = members[i, p]
                    skill = skill + fabs(buf[i] - y)
                _insertion_sort(buf, n_mem)
                # sum_{i,j} |x_i - x_j| / 2 == sum_k (2k - X + 1) x_(k)
                spread = 0.0
                for i in range(n_mem):
                    spread = spread + (2 * i - n_mem + 1) * buf[i]
                total = total + skill / n_mem - spread * spread_norm
    finally:
        free(buf)
    return total


def spread_error_sums(const double[:, ::1] members, const double[::1] obs):
    """Return (sum of unbiased member std, sum of squared ensemble-mean error)."""
    cdef Py_ssize_t n_mem = members.shape[0]
    cdef Py_ssize_t n_pix = members.shape[1]
    if obs.shape[0] != n_pix:
        raise ValueError("members and obs disagree on pixel count")
    if n_mem < 1:
        raise ValueError("empty ensemble")
    cdef Py_ssize_t i, p
    cdef double x0, d, s, ss, var, mean, spread_total = 0.0, sq_total = 0.0
    with nogil:
        for p in range(n_pix):
            # shifted by the first member: identical members give exactly zero spread
            x0 = members[0, p]
            s = 0.0
            ss = 0.0
            for i in range(1, n_mem):
                d = members[i, p] - x0
                s = s + d
                ss = ss + d * d
            mean = x0 + s / n_mem
            if n_mem > 1:
                var = (ss - s * s / n_mem) / (n_mem - 1)
                if var > 0.0:
                    spread_total = spread_total + sqrt(var)
            d = mean - obs[p]
            sq_total = sq_total + d * d
    return spread_total, sq_total


def contingency(const double[::1] pred, const double[::1] obs, double threshold):
    """Return (hits, misses, false_alarms, correct_negatives) for ``>= threshold``."""
    cdef Py_ssize_t n = pred.shape[0]
    if obs.shape[0] != n:
        raise ValueError("pred and obs disagree on pixel count")
    cdef Py_ssize_t p
    cdef long long hits = 0, n_pred = 0, n_obs = 0
    cdef int fp, fo
    with nogil:
        # branch-free counting; misses and false alarms follow from the marginals
        for p in range(n):
            fp = pred[p] >= threshold
            fo = obs[p] >= threshold
            hits += fp & fo
            n_pred += fp
            n_obs += fo
    cdef long long misses = n_obs - hits, fa = n_pred - hits
    cdef long long cn = n - hits - misses - fa
    return hits, misses, fa, cn


def class_weights(const double[::1] rates, const double[::1] thresholds, const double[::1] weights):
    cdef Py_ssize_t n = rates.shape[0]
    cdef Py_ssize_t n_thr = thresholds.shape[0]
    if weights.shape[0] != n_thr + 1:
        raise ValueError("need one more weight than thresholds")
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] out_v = out
    cdef Py_ssize_t p, k
    cdef double r
    with nogil:
        for p in range(n):
            r = rates[p]
            k = 0
            # band edges belong to the lower band
            while k < n_thr and r > thresholds[k]:
                k += 1
            out_v[p] = weights[k]
    return out
