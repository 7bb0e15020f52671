# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loss/gradient kernels for the small models.

Same signatures and parameter layout as ``_kernels_py``. Batches in the
training loops are tiny (a handful of rows), so the numpy path is dominated
by per-call overhead; these loops avoid it.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, tanh

cnp.import_array()


cdef inline double _row_log_softmax(double[:, ::1] z, Py_ssize_t r, Py_ssize_t k,
                                    double[::1] out) noexcept nogil:
    cdef Py_ssize_t c
    cdef double zmax = z[r, 0]
    cdef double s = 0.0
    for c in range(1, k):
        if z[r, c] > zmax:
            zmax = z[r, c]
    for c in range(k):
        s += exp(z[r, c] - zmax)
    s = log(s)
    for c in range(k):
        out[c] = z[r, c] - zmax - s
    return 0.0


cdef void _forward(const double[:, ::1] X, const double[::1] p, int kind,
                   Py_ssize_t d, Py_ssize_t h, Py_ssize_t k, int act,
                   double[:, ::1] pre, double[:, ::1] a, double[:, ::1] z) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t r, i, j, c
    cdef Py_ssize_t ob1, ow2, ob2
    cdef double acc
    if kind == 0:
        for r in range(n):
            for c in range(k):
                acc = p[k * d + c]
                for i in range(d):
                    acc += p[c * d + i] * X[r, i]
                z[r, c] = acc
        return
    ob1 = h * d
    ow2 = ob1 + h
    ob2 = ow2 + k * h
    for r in range(n):
        for j in range(h):
            acc = p[ob1 + j]
            for i in range(d):
                acc += p[j * d + i] * X[r, i]
            pre[r, j] = acc
            if act == 0:
                a[r, j] = tanh(acc)
            else:
                a[r, j] = acc if acc > 0.0 else 0.0
        for c in range(k):
            acc = p[ob2 + c]
            for j in range(h):
                acc += p[ow2 + c * h + j] * a[r, j]
            z[r, c] = acc


def logits(const double[:, ::1] X, const double[::1] params, int kind,
           Py_ssize_t d, Py_ssize_t h, Py_ssize_t k, int act):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t hh = h if kind == 1 else 1
    z = np.empty((n, k))
    pre = np.empty((n, hh))
    a = np.empty((n, hh))
    _forward(X, params, kind, d, h, k, act, pre, a, z)
    return z


def per_example_loss(const double[:, ::1] X, const long long[::1] y,
                     const double[::1] params, int kind,
                     Py_ssize_t d, Py_ssize_t h, Py_ssize_t k, int act):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t r
    z_arr = logits(X, params, kind, d, h, k, act)
    cdef double[:, ::1] z = z_arr
    cdef double[::1] logp = np.empty(k)
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    for r in range(n):
        _row_log_softmax(z, r, k, logp)
        out[r] = -logp[y[r]]
    return out_arr


def loss_grad(const double[:, ::1] X, const long long[::1] y,
              const double[::1] params, int kind,
              Py_ssize_t d, Py_ssize_t h, Py_ssize_t k, int act,
              bint want_grad=True):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t hh = h if kind == 1 else 1
    cdef Py_ssize_t r, i, j, c
    cdef Py_ssize_t ob1 = h * d
    cdef Py_ssize_t ow2 = ob1 + h
    cdef Py_ssize_t ob2 = ow2 + k * h
    cdef double inv_n = 1.0 / n
    cdef double loss = 0.0
    cdef double g, da

    z_arr = np.empty((n, k))
    pre_arr = np.empty((n, hh))
    a_arr = np.empty((n, hh))
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] pre = pre_arr
    cdef double[:, ::1] a = a_arr
    cdef double[::1] logp = np.empty(k)
    cdef double[::1] dz = np.empty(k)
    cdef double[::1] dpre = np.empty(hh)

    _forward(X, params, kind, d, h, k, act, pre, a, z)

    grad_arr = None
    cdef double[::1] gr
    if want_grad:
        grad_arr = np.zeros(params.shape[0])
        gr = grad_arr

    for r in range(n):
        _row_log_softmax(z, r, k, logp)
        loss -= logp[y[r]]
        if not want_grad:
            continue
        for c in range(k):
            dz[c] = exp(logp[c]) * inv_n
        dz[y[r]] -= inv_n
        if kind == 0:
            for c in range(k):
                g = dz[c]
                for i in range(d):
                    gr[c * d + i] += g * X[r, i]
                gr[k * d + c] += g
            continue
        for j in range(h):
            da = 0.0
            for c in range(k):
                da += dz[c] * params[ow2 + c * h + j]
            if act == 0:
                dpre[j] = da * (1.0 - a[r, j] * a[r, j])
            else:
                dpre[j] = da if pre[r, j] > 0.0 else 0.0
        for j in range(h):
            g = dpre[j]
            for i in range(d):
                gr[j * d + i] += g * X[r, i]
            gr[ob1 + j] += g
        for c in range(k):
            g = dz[c]
            for j in range(h):
                gr[ow2 + c * h + j] += g * a[r, j]
            gr[ob2 + c] += g
    return loss * inv_n, grad_arr
