# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tree kernels; see ``_pykernels`` for the contract.

Similarity kernels are not compiled: the numpy versions run on BLAS and
beat a plain loop, so ``kernels`` always takes them from ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp

from libc.stdlib cimport malloc, free, qsort

cnp.import_array()

BACKEND = "cython"


cdef struct Pair:
    double value
    Py_ssize_t label


cdef int _cmp_pair(const void* a, const void* b) noexcept nogil:
    cdef double va = (<Pair*>a).value
    cdef double vb = (<Pair*>b).value
    if va < vb:
        return -1
    if va > vb:
        return 1
    return 0


def best_split(const double[:, ::1] X, const Py_ssize_t[::1] y,
               const Py_ssize_t[::1] idx, const Py_ssize_t[::1] features,
               Py_ssize_t n_classes):
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t best_f = -1
    cdef double best_thr = 0.0
    cdef double best_score = -1.0
    if n < 2:
        return best_f, best_thr, best_score

    cdef Pair* pairs = <Pair*>malloc(n * sizeof(Pair))
    cdef long long* left = <long long*>malloc(n_classes * sizeof(long long))
    cdef long long* total = <long long*>malloc(n_classes * sizeof(long long))
    cdef Py_ssize_t fi, f, i, c
    cdef long long sq_l, sq_r, r, n_l, n_r
    cdef double score, feat_best, lo, hi, thr
    cdef Py_ssize_t feat_pos
    try:
        for c in range(n_classes):
            total[c] = 0
        for i in range(n):
            total[y[idx[i]]] += 1
        for fi in range(features.shape[0]):
            f = features[fi]
            for i in range(n):
                pairs[i].value = X[idx[i], f]
                pairs[i].label = y[idx[i]]
            qsort(pairs, n, sizeof(Pair), _cmp_pair)
            for c in range(n_classes):
                left[c] = 0
            feat_best = -1.0
            feat_pos = -1
            for i in range(n - 1):
                left[pairs[i].label] += 1
                if not (pairs[i].value < pairs[i + 1].value):
                    continue
                n_l = i + 1
                n_r = n - n_l
                sq_l = 0
                sq_r = 0
                for c in range(n_classes):
                    sq_l += left[c] * left[c]
                    r = total[c] - left[c]
                    sq_r += r * r
                score = (<double>sq_l) / (<double>n_l) + (<double>sq_r) / (<double>n_r)
                if score > feat_best:
                    feat_best = score
                    feat_pos = i
            if feat_pos >= 0 and feat_best > best_score:
                best_score = feat_best
                best_f = f
                lo = pairs[feat_pos].value
                hi = pairs[feat_pos + 1].value
                thr = (lo + hi) / 2.0
                if thr >= hi:
                    thr = lo
                best_thr = thr
    finally:
        free(pairs)
        free(left)
        free(total)
    return best_f, best_thr, best_score


def apply_tree(const double[:, ::1] X, const Py_ssize_t[::1] feature,
               const double[::1] threshold, const Py_ssize_t[::1] left,
               const Py_ssize_t[::1] right):
    cdef Py_ssize_t n = X.shape[0]
    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] node = out
    cdef Py_ssize_t i, cur
    with nogil:
        for i in range(n):
            cur = 0
            while feature[cur] >= 0:
                if X[i, feature[cur]] <= threshold[cur]:
                    cur = left[cur]
                else:
                    cur = right[cur]
            node[i] = cur
    return out


