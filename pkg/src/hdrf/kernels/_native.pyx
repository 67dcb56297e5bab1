# Fused compiled kernels for the hot non-BLAS loops: bias+activation passes,
# activation gradients, per-ray compositing scans and the positional encoding
# bank. Matrix products stay on numpy's BLAS (shared with the fallback
# backend); these kernels remove the extra elementwise passes and temporaries
# the numpy formulation needs. Mirrors hdrf/kernels/_python.py operation for
# operation.
#
# Activation codes: 0 linear, 1 relu, 2 sigmoid, 3 softplus.

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport cos, exp, fabs, fmax, fmin, isfinite, log1p, sin

cnp.import_array()

cdef double PI = 3.141592653589793


def bias_act(double[:, ::1] y, double[::1] b, int act, int nthreads):
    """In-place y = act(y + b). Per-activation loops keep the hot relu and
    linear paths vectorizable; the exp-heavy activations fold a finiteness
    probe (the element sum) into their pass. Returns the sum for those, or
    None when the caller should probe separately."""
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    cdef Py_ssize_t i, j
    cdef double v, e
    cdef double total = 0.0
    if act == 0:
        with nogil:
            for i in prange(m, num_threads=nthreads, schedule="static"):
                for j in range(n):
                    y[i, j] = y[i, j] + b[j]
        return None
    if act == 1:
        with nogil:
            for i in prange(m, num_threads=nthreads, schedule="static"):
                for j in range(n):
                    v = y[i, j] + b[j]
                    y[i, j] = v if v > 0.0 else 0.0
        return None
    if act == 2:
        with nogil:
            for i in prange(m, num_threads=nthreads, schedule="static"):
                for j in range(n):
                    v = y[i, j] + b[j]
                    if v >= 0.0:
                        v = 1.0 / (1.0 + exp(-v))
                    else:
                        e = exp(v)
                        v = e / (1.0 + e)
                    y[i, j] = v
                    total += v
        return total
    with nogil:
        for i in prange(m, num_threads=nthreads, schedule="static"):
            for j in range(n):
                v = y[i, j] + b[j]
                v = log1p(exp(-fabs(v))) + fmax(v, 0.0)
                y[i, j] = v
                total += v
    return total


def act_grad(double[:, ::1] y, double[:, ::1] dy, int act, int nthreads):
    """dy * act'(pre-activation), derived from the activation output y."""
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    g_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] g = g_arr
    cdef Py_ssize_t i, j
    if act == 0:
        g_arr[...] = dy
        return g_arr
    if act == 1:
        with nogil:
            for i in prange(m, num_threads=nthreads, schedule="static"):
                for j in range(n):
                    g[i, j] = dy[i, j] if y[i, j] > 0.0 else 0.0
        return g_arr
    if act == 2:
        with nogil:
            for i in prange(m, num_threads=nthreads, schedule="static"):
                for j in range(n):
                    g[i, j] = dy[i, j] * y[i, j] * (1.0 - y[i, j])
        return g_arr
    with nogil:
        for i in prange(m, num_threads=nthreads, schedule="static"):
            for j in range(n):
                g[i, j] = dy[i, j] * (1.0 - exp(-y[i, j]))
    return g_arr


cdef inline double expm1_neg(double od) noexcept nogil:
    # expm1(-od) with full precision for small od
    if od < 1e-5:
        return -od + 0.5 * od * od - od * od * od / 6.0
    return exp(-od) - 1.0


def composite_forward(double[:, ::1] sigma, double[:, :, ::1] values,
                      double[:, ::1] deltas, int nthreads):
    cdef Py_ssize_t r = sigma.shape[0], s = sigma.shape[1], c = values.shape[2]
    out_arr = np.zeros((r, c), dtype=np.float64)
    w_arr = np.empty((r, s), dtype=np.float64)
    t_arr = np.empty((r, s), dtype=np.float64)
    tlast_arr = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] out = out_arr, w = w_arr, t = t_arr
    cdef double[::1] tlast = tlast_arr
    cdef Py_ssize_t i, j, ch
    cdef double trans, alpha, wi
    cdef double total = 0.0
    with nogil:
        for i in prange(r, num_threads=nthreads, schedule="static"):
            trans = 1.0
            for j in range(s):
                alpha = -expm1_neg(sigma[i, j] * deltas[i, j])
                wi = trans * alpha
                w[i, j] = wi
                t[i, j] = trans
                for ch in range(c):
                    out[i, ch] += wi * values[i, j, ch]
                trans = trans * (1.0 - alpha)
            tlast[i] = trans
            for ch in range(c):
                total += out[i, ch]
    if not isfinite(total):
        from ..errors import NumericError
        raise NumericError("non-finite values in composited output")
    return out_arr, w_arr, t_arr, tlast_arr


def composite_backward(double[:, :, ::1] values, double[:, ::1] deltas,
                       double[:, ::1] w, double[:, ::1] t, double[::1] tlast,
                       double[:, ::1] d_out, int nthreads):
    cdef Py_ssize_t r = w.shape[0], s = w.shape[1], c = values.shape[2]
    ds_arr = np.empty((r, s), dtype=np.float64)
    dv_arr = np.empty((r, s, c), dtype=np.float64)
    cdef double[:, ::1] ds = ds_arr
    cdef double[:, :, ::1] dv = dv_arr
    cdef Py_ssize_t i, j, ch
    cdef double suffix, g, tnext
    with nogil:
        for i in prange(r, num_threads=nthreads, schedule="static"):
            suffix = 0.0
            for j in range(s - 1, -1, -1):
                g = 0.0
                for ch in range(c):
                    g = g + d_out[i, ch] * values[i, j, ch]
                    dv[i, j, ch] = w[i, j] * d_out[i, ch]
                tnext = t[i, j + 1] if j + 1 < s else tlast[i]
                ds[i, j] = deltas[i, j] * (tnext * g - suffix)
                suffix = suffix + w[i, j] * g
    return ds_arr, dv_arr


def posenc(double[:, ::1] x, int levels, bint include_input, int nthreads):
    cdef Py_ssize_t m = x.shape[0], d = x.shape[1]
    cdef int width = 2 * levels + (1 if include_input else 0)
    out_arr = np.empty((m, d * width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, base
    cdef int level
    cdef double p, sv, cv, s2
    with nogil:
        for i in prange(m, num_threads=nthreads, schedule="static"):
            for j in range(d):
                base = j * width
                p = x[i, j]
                if include_input:
                    out[i, base] = p
                    base = base + 1
                sv = sin(PI * p)
                cv = cos(PI * p)
                for level in range(levels):
                    sv = fmin(1.0, fmax(-1.0, sv))
                    cv = fmin(1.0, fmax(-1.0, cv))
                    out[i, base + 2 * level] = sv
                    out[i, base + 2 * level + 1] = cv
                    if level + 1 < levels:
                        s2 = 2.0 * sv * cv
                        cv = cv * cv - sv * sv
                        sv = s2
    return out_arr
