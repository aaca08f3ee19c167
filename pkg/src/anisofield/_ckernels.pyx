# distutils: define_macros=_GNU_SOURCE=1
# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for series evaluation.

Both kernels accumulate terms in index order with Neumaier's compensated
summation, one independent accumulator per evaluation point, so the output is
the same for any thread count.
"""
import numpy as np

from cython.parallel cimport prange
from libc.math cimport exp, fabs

cdef extern from "math.h" nogil:
    void sincos(double x, double *s, double *c)


cdef inline double _coef(double a, double b, double inv_alpha) noexcept nogil:
    return exp(a + b * inv_alpha)


cdef inline void _neumaier(double *s, double *c, double x) noexcept nogil:
    cdef double t = s[0] + x
    if fabs(s[0]) >= fabs(x):
        c[0] += (s[0] - t) + x
    else:
        c[0] += (x - t) + s[0]
    s[0] = t


def lepage_sum(const double[:, ::1] points, const double[::1] inv_alpha,
               const double[:, ::1] xi, const double[::1] coef_a,
               const double[::1] coef_b, const double[::1] g_re,
               const double[::1] g_im, const Py_ssize_t[::1] checkpoints,
               bint constant_alpha, int num_threads=1):
    """Partial sums of sum_n exp(a_n + b_n/alpha(u)) (e^{i<u,xi_n>} - 1) g_n.

    Returns real and imaginary parts with shape (n_points, n_checkpoints).
    """
    cdef Py_ssize_t n_points = points.shape[0]
    cdef Py_ssize_t dim = points.shape[1]
    cdef Py_ssize_t n_ck = checkpoints.shape[0]
    cdef Py_ssize_t n_terms = checkpoints[n_ck - 1] if n_ck > 0 else 0
    out_re_arr = np.zeros((n_points, n_ck), dtype=np.float64)
    out_im_arr = np.zeros((n_points, n_ck), dtype=np.float64)
    cdef double[:, ::1] out_re = out_re_arr
    cdef double[:, ::1] out_im = out_im_arr
    coef_arr = np.empty(n_terms if constant_alpha else 0, dtype=np.float64)
    cdef double[::1] coef = coef_arr
    cdef Py_ssize_t p, n, k, j
    cdef double theta, hs, hc, re, im, c, tr, ti
    cdef double sr, cr, si, ci

    if n_points == 0 or n_ck == 0:
        return out_re_arr, out_im_arr
    if constant_alpha:
        for n in range(n_terms):
            coef[n] = _coef(coef_a[n], coef_b[n], inv_alpha[0])

    for p in prange(n_points, nogil=True, schedule="static",
                    num_threads=num_threads):
        sr = 0.0
        cr = 0.0
        si = 0.0
        ci = 0.0
        # sincos writes through pointers; assigning here makes them thread-private
        hs = 0.0
        hc = 0.0
        k = 0
        # checkpoint 0 means the empty sum
        while k < n_ck and checkpoints[k] == 0:
            k = k + 1
        for n in range(n_terms):
            theta = 0.0
            for j in range(dim):
                theta = theta + points[p, j] * xi[n, j]
            sincos(0.5 * theta, &hs, &hc)
            re = -2.0 * hs * hs
            im = 2.0 * hs * hc
            if constant_alpha:
                c = coef[n]
            else:
                c = _coef(coef_a[n], coef_b[n], inv_alpha[p])
            tr = c * (re * g_re[n] - im * g_im[n])
            ti = c * (re * g_im[n] + im * g_re[n])
            _neumaier(&sr, &cr, tr)
            _neumaier(&si, &ci, ti)
            while k < n_ck and checkpoints[k] == n + 1:
                out_re[p, k] = sr + cr
                out_im[p, k] = si + ci
                k = k + 1
    return out_re_arr, out_im_arr


def weighted_partial_sums(const double[:, ::1] w_re, const double[:, ::1] w_im,
                          const double[::1] g_re, const double[::1] g_im,
                          const Py_ssize_t[::1] checkpoints, int num_threads=1):
    """Partial sums of sum_n W[p, n] g_n at the requested checkpoints."""
    cdef Py_ssize_t n_points = w_re.shape[0]
    cdef Py_ssize_t n_ck = checkpoints.shape[0]
    cdef Py_ssize_t n_terms = checkpoints[n_ck - 1] if n_ck > 0 else 0
    out_re_arr = np.zeros((n_points, n_ck), dtype=np.float64)
    out_im_arr = np.zeros((n_points, n_ck), dtype=np.float64)
    cdef double[:, ::1] out_re = out_re_arr
    cdef double[:, ::1] out_im = out_im_arr
    cdef Py_ssize_t p, n, k
    cdef double tr, ti, sr, cr, si, ci

    if n_points == 0 or n_ck == 0:
        return out_re_arr, out_im_arr
    for p in prange(n_points, nogil=True, schedule="static",
                    num_threads=num_threads):
        sr = 0.0
        cr = 0.0
        si = 0.0
        ci = 0.0
        k = 0
        while k < n_ck and checkpoints[k] == 0:
            k = k + 1
        for n in range(n_terms):
            tr = w_re[p, n] * g_re[n] - w_im[p, n] * g_im[n]
            ti = w_re[p, n] * g_im[n] + w_im[p, n] * g_re[n]
            _neumaier(&sr, &cr, tr)
            _neumaier(&si, &ci, ti)
            while k < n_ck and checkpoints[k] == n + 1:
                out_re[p, k] = sr + cr
                out_im[p, k] = si + ci
                k = k + 1
    return out_re_arr, out_im_arr
