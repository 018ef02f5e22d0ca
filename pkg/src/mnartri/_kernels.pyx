# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for biased matrix factorization.

Same contract and parameter layout as :mod:`mnartri._fallback`.
"""
from libc.math cimport sqrt, pow

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


def predict_pairs(const double[::1] params, Py_ssize_t m, Py_ssize_t n, Py_ssize_t d,
                  const i64[::1] users, const i64[::1] items):
    cdef Py_ssize_t k, f, u, i
    cdef Py_ssize_t o_beta = m * d
    cdef Py_ssize_t o_bu = o_beta + n * d
    cdef Py_ssize_t o_bi = o_bu + m
    cdef Py_ssize_t o_bg = o_bi + n
    cdef Py_ssize_t count = users.shape[0]
    out = np.empty(count, dtype=np.float64)
    cdef double[::1] res = out
    cdef double acc
    with nogil:
        for k in range(count):
            u = users[k]
            i = items[k]
            acc = 0.0
            for f in range(d):
                acc += params[u * d + f] * params[o_beta + i * d + f]
            res[k] = acc + params[o_bu + u] + params[o_bi + i] + params[o_bg]
    return out


cdef inline void _accumulate(const double[::1] params, double[::1] grad,
                             Py_ssize_t m, Py_ssize_t n, Py_ssize_t d,
                             const i64[::1] users, const i64[::1] items,
                             const double[::1] targets, const double[::1] weights,
                             const i64[::1] order, Py_ssize_t start, Py_ssize_t stop,
                             int loss_kind) noexcept nogil:
    cdef Py_ssize_t o_beta = m * d
    cdef Py_ssize_t o_bu = o_beta + n * d
    cdef Py_ssize_t o_bi = o_bu + m
    cdef Py_ssize_t o_bg = o_bi + n
    cdef Py_ssize_t k, idx, u, i, f
    cdef double pred, resid, g, a, b
    for k in range(start, stop):
        idx = order[k]
        u = users[idx]
        i = items[idx]
        pred = 0.0
        for f in range(d):
            pred += params[u * d + f] * params[o_beta + i * d + f]
        pred += params[o_bu + u] + params[o_bi + i] + params[o_bg]
        resid = pred - targets[idx]
        if loss_kind == 0:
            g = 2.0 * resid
        elif resid > 0:
            g = 1.0
        elif resid < 0:
            g = -1.0
        else:
            g = 0.0
        g = weights[idx] * g / (stop - start)
        for f in range(d):
            a = params[u * d + f]
            b = params[o_beta + i * d + f]
            grad[u * d + f] += g * b
            grad[o_beta + i * d + f] += g * a
        grad[o_bu + u] += g
        grad[o_bi + i] += g
        grad[o_bg] += g


def gradient(const double[::1] params, Py_ssize_t m, Py_ssize_t n, Py_ssize_t d,
             const i64[::1] users, const i64[::1] items,
             const double[::1] targets, const double[::1] weights,
             double l2, int loss_kind):
    """Gradient of the weighted mean loss plus the L2 penalty over all records."""
    cdef Py_ssize_t size = params.shape[0]
    cdef Py_ssize_t o_bg = size - 1
    cdef Py_ssize_t p
    out = np.zeros(size, dtype=np.float64)
    cdef double[::1] grad = out
    order_arr = np.arange(users.shape[0], dtype=np.int64)
    cdef const i64[::1] order = order_arr
    with nogil:
        _accumulate(params, grad, m, n, d, users, items, targets, weights,
                    order, 0, order.shape[0], loss_kind)
        for p in range(o_bg):
            grad[p] += 2.0 * l2 * params[p]
    return out


def adam_epoch(double[::1] params, double[::1] m1, double[::1] m2, double[::1] grad,
               Py_ssize_t m, Py_ssize_t n, Py_ssize_t d,
               const i64[::1] users, const i64[::1] items,
               const double[::1] targets, const double[::1] weights,
               const i64[::1] order, Py_ssize_t batch_size,
               double lr, double beta1, double beta2, double eps, double l2,
               int loss_kind, long step):
    cdef Py_ssize_t size = params.shape[0]
    cdef Py_ssize_t o_bg = size - 1
    cdef Py_ssize_t total = order.shape[0]
    cdef Py_ssize_t start, stop, p
    cdef double bc1, bc2, gk
    with nogil:
        start = 0
        while start < total:
            stop = start + batch_size
            if stop > total:
                stop = total
            _accumulate(params, grad, m, n, d, users, items, targets, weights,
                        order, start, stop, loss_kind)
            step += 1
            bc1 = 1.0 - pow(beta1, <double>step)
            bc2 = 1.0 - pow(beta2, <double>step)
            for p in range(size):
                gk = grad[p]
                if p != o_bg:
                    gk = gk + 2.0 * l2 * params[p]
                m1[p] = beta1 * m1[p] + (1.0 - beta1) * gk
                m2[p] = beta2 * m2[p] + (1.0 - beta2) * gk * gk
                params[p] -= lr * (m1[p] / bc1) / (sqrt(m2[p] / bc2) + eps)
                grad[p] = 0.0
            start = stop
    return step
