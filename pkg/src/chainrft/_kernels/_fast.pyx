# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the reference kernels.

Same contract as reference.py: mlp_scores evaluates the two-layer tanh
network rowwise, mlp_grad accumulates the parameter gradient of
sum_i coeff[i] * score(X[i]). Inputs are coerced to contiguous float64 so
callers may pass any numpy-compatible layout; conforming arrays are used
in place so per-call overhead stays low on small rollout batches.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()


cdef double[:, ::1] _mat(object a):
    cdef double[:, ::1] v
    try:
        v = a
    except (TypeError, ValueError):
        v = np.ascontiguousarray(a, dtype=np.float64)
    return v


cdef double[::1] _vec(object a):
    cdef double[::1] v
    try:
        v = a
    except (TypeError, ValueError):
        v = np.ascontiguousarray(a, dtype=np.float64)
    return v


cdef double[:, ::1] _rows(object X):
    # Single feature vectors are promoted to one-row matrices.
    if not isinstance(X, np.ndarray):
        X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return _mat(X)


cdef void _scores_core(double[:, ::1] W1, double[::1] b1, double[::1] w2,
                       double b2, double[:, ::1] X, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0], f = X.shape[1], h = W1.shape[0]
    cdef Py_ssize_t i, j, d
    cdef double acc, pre
    for i in range(n):
        acc = b2
        for j in range(h):
            pre = b1[j]
            for d in range(f):
                pre += W1[j, d] * X[i, d]
            acc += w2[j] * tanh(pre)
        out[i] = acc


cdef double _grad_core(double[:, ::1] W1, double[::1] b1, double[::1] w2,
                       double[:, ::1] X, double[::1] coeff,
                       double[:, ::1] gW1, double[::1] gb1,
                       double[::1] gw2) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0], f = X.shape[1], h = W1.shape[0]
    cdef double gb2 = 0.0
    cdef Py_ssize_t i, j, d
    cdef double pre, hj, back, ci
    for i in range(n):
        ci = coeff[i]
        gb2 += ci
        for j in range(h):
            pre = b1[j]
            for d in range(f):
                pre += W1[j, d] * X[i, d]
            hj = tanh(pre)
            gw2[j] += ci * hj
            back = ci * (1.0 - hj * hj) * w2[j]
            gb1[j] += back
            for d in range(f):
                gW1[j, d] += back * X[i, d]
    return gb2


def mlp_scores(W1, b1, w2, b2, X):
    cdef double[:, ::1] W1v = _mat(W1)
    cdef double[::1] b1v = _vec(b1)
    cdef double[::1] w2v = _vec(w2)
    cdef double b2v = b2
    cdef double[:, ::1] Xv = _rows(X)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(Xv.shape[0], dtype=np.float64)
    _scores_core(W1v, b1v, w2v, b2v, Xv, out)
    return out


def mlp_grad(W1, b1, w2, b2, X, coeff):
    cdef double[:, ::1] W1v = _mat(W1)
    cdef double[::1] b1v = _vec(b1)
    cdef double[::1] w2v = _vec(w2)
    cdef double[:, ::1] Xv = _rows(X)
    cdef double[::1] cv = _vec(coeff)
    cdef Py_ssize_t h = W1v.shape[0], f = W1v.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gW1 = np.zeros((h, f), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gb1 = np.zeros(h, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gw2 = np.zeros(h, dtype=np.float64)
    cdef double gb2 = _grad_core(W1v, b1v, w2v, Xv, cv, gW1, gb1, gw2)
    return gW1, gb1, gw2, gb2
