# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Cython EM kernel for sensitivity/specificity label fusion.

Same algorithm as _em_py, with the rater/voxel loops compiled. Summation
order differs from numpy's pairwise reduction, so results agree to ~1e-12
rather than bitwise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, log1p

cnp.import_array()

DEF CLAMP = 1e-6


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef void _e_step(cnp.uint8_t[:, ::1] D, double log_prior, double log_1prior,
                  double[::1] lp, double[::1] lnp, double[::1] lq, double[::1] lnq,
                  double[::1] w) nogil:
    cdef Py_ssize_t R = D.shape[0]
    cdef Py_ssize_t N = D.shape[1]
    cdef Py_ssize_t i, j
    cdef double log_a, log_b
    for i in range(N):
        log_a = log_prior
        log_b = log_1prior
        for j in range(R):
            if D[j, i]:
                log_a += lp[j]
                log_b += lnq[j]
            else:
                log_a += lnp[j]
                log_b += lq[j]
        w[i] = _clip(1.0 / (1.0 + exp(log_b - log_a)), CLAMP, 1.0 - CLAMP)


def em_run(decisions, double prior, p_init, q_init, double tol, int max_iters):
    """Drop-in equivalent of the numpy kernel's em_run."""
    cdef cnp.uint8_t[:, ::1] D = np.ascontiguousarray(decisions, dtype=np.uint8)
    cdef Py_ssize_t R = D.shape[0]
    cdef Py_ssize_t N = D.shape[1]
    p_arr = np.array(p_init, dtype=np.float64)
    q_arr = np.array(q_init, dtype=np.float64)
    w_arr = np.empty(N, dtype=np.float64)
    cdef double[::1] p = p_arr
    cdef double[::1] q = q_arr
    cdef double[::1] w = w_arr
    lp_arr = np.empty(R); lnp_arr = np.empty(R)
    lq_arr = np.empty(R); lnq_arr = np.empty(R)
    cdef double[::1] lp = lp_arr
    cdef double[::1] lnp = lnp_arr
    cdef double[::1] lq = lq_arr
    cdef double[::1] lnq = lnq_arr
    cdef double log_prior = log(prior)
    cdef double log_1prior = log1p(-prior)
    cdef double sw, s1w, num_p, num_q, new_p, new_q, delta
    cdef Py_ssize_t i, j
    cdef int it, iterations = 0
    cdef bint converged = False
    p_hist, q_hist = [], []

    for it in range(1, max_iters + 1):
        iterations = it
        for j in range(R):
            lp[j] = log(p[j]); lnp[j] = log1p(-p[j])
            lq[j] = log(q[j]); lnq[j] = log1p(-q[j])
        _e_step(D, log_prior, log_1prior, lp, lnp, lq, lnq, w)
        sw = 0.0
        for i in range(N):
            sw += w[i]
        s1w = N - sw
        delta = 0.0
        for j in range(R):
            num_p = 0.0
            num_q = 0.0
            for i in range(N):
                if D[j, i]:
                    num_p += w[i]
                else:
                    num_q += 1.0 - w[i]
            new_p = _clip(num_p / sw, CLAMP, 1.0 - CLAMP)
            new_q = _clip(num_q / s1w, CLAMP, 1.0 - CLAMP)
            if fabs(new_p - p[j]) > delta:
                delta = fabs(new_p - p[j])
            if fabs(new_q - q[j]) > delta:
                delta = fabs(new_q - q[j])
            p[j] = new_p
            q[j] = new_q
        p_hist.append(p_arr.copy())
        q_hist.append(q_arr.copy())
        if delta < tol:
            converged = True
            break

    for j in range(R):
        lp[j] = log(p[j]); lnp[j] = log1p(-p[j])
        lq[j] = log(q[j]); lnq[j] = log1p(-q[j])
    _e_step(D, log_prior, log_1prior, lp, lnp, lq, lnq, w)
    return w_arr, p_arr, q_arr, iterations, converged, p_hist, q_hist
