# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Signatures mirror ``vitq._fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, copysign, sqrt

cnp.import_array()


cdef inline double _round_clip(double v, double lo, double hi) noexcept nogil:
    # branch-free so the loops vectorize; |v| beyond the grid clips anyway,
    # and capping keeps the int cast in range (hi + 1 <= 2**15)
    cdef double a = fabs(v)
    cdef double cap = hi + 1.0
    a = a if a < cap else cap
    cdef double r = <double>(<int>a)
    r += <double>(a - r >= 0.5)
    r = copysign(r, v)
    r = r if r > lo else lo
    # + 0.0 turns -0.0 into +0.0, matching the integer round trip of the fallback
    return (r if r < hi else hi) + 0.0


ctypedef fused real_t:
    float
    double


cdef void _qd_loop(const real_t[::1] src, float[::1] dst, double delta, double lo, double hi) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(src.shape[0]):
        dst[i] = <float>(_round_clip(<double>src[i] / delta, lo, hi) * delta)


cdef void _q_loop(const real_t[::1] src, int[::1] dst, double delta, double lo, double hi) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(src.shape[0]):
        dst[i] = <int>_round_clip(<double>src[i] / delta, lo, hi)


def _flat(y):
    arr = np.asarray(y)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64)
    return np.ascontiguousarray(arr)


def quantize(y, double delta, int bits):
    arr = _flat(y)
    out = np.empty(arr.shape, dtype=np.int32)
    cdef double lo = -(2.0 ** (bits - 1))
    cdef double hi = 2.0 ** (bits - 1) - 1.0
    if arr.dtype == np.float32:
        _q_loop[float](arr.reshape(-1), out.reshape(-1), delta, lo, hi)
    else:
        _q_loop[double](arr.reshape(-1), out.reshape(-1), delta, lo, hi)
    return out


def quant_dequant(y, double delta, int bits):
    arr = _flat(y)
    out = np.empty(arr.shape, dtype=np.float32)
    cdef double lo = -(2.0 ** (bits - 1))
    cdef double hi = 2.0 ** (bits - 1) - 1.0
    if arr.dtype == np.float32:
        _qd_loop[float](arr.reshape(-1), out.reshape(-1), delta, lo, hi)
    else:
        _qd_loop[double](arr.reshape(-1), out.reshape(-1), delta, lo, hi)
    return out


cdef void _pearson_loop(const real_t[:, ::1] x, const real_t[:, ::1] y, double[::1] res) noexcept nogil:
    cdef Py_ssize_t b = x.shape[0], m = x.shape[1], i, j
    cdef double mx, my, sxy, sxx, syy, dx, dy, r
    for i in range(b):
        mx = 0.0
        my = 0.0
        for j in range(m):
            mx += x[i, j]
            my += y[i, j]
        mx /= m
        my /= m
        sxy = 0.0
        sxx = 0.0
        syy = 0.0
        for j in range(m):
            dx = x[i, j] - mx
            dy = y[i, j] - my
            sxy += dx * dy
            sxx += dx * dx
            syy += dy * dy
        if sxx > 0.0 and syy > 0.0:
            r = sxy / (sqrt(sxx) * sqrt(syy))
            r = r if r < 1.0 else 1.0
            res[i] = r if r > -1.0 else -1.0


def pearson_rows(o, oh):
    x = _flat(o)
    y = _flat(oh)
    if x.dtype != y.dtype:
        x = x.astype(np.float64)
        y = y.astype(np.float64)
    out = np.zeros(x.shape[0], dtype=np.float64)
    if x.dtype == np.float32:
        _pearson_loop[float](x, y, out)
    else:
        _pearson_loop[double](x, y, out)
    return out


cdef double _hinge_all_pairs(const double[::1] a, const double[::1] y, double theta) noexcept nogil:
    cdef Py_ssize_t w = a.shape[0], i, j
    cdef double ai, yi, d, sg, h, acc = 0.0
    for i in range(w - 1):
        ai = a[i]
        yi = y[i]
        for j in range(i + 1, w):
            d = ai - a[j]
            sg = (d > 0.0) - (d < 0.0)
            h = theta - (yi - y[j]) * sg
            # branch-free: tied reference pairs (sg == 0) and satisfied margins add 0
            acc += (h > 0.0) * (sg != 0.0) * h
    return acc


def ranking_loss_rows(a, ah, double theta, pi=None, pj=None):
    cdef double[:, :, ::1] x = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, :, ::1] y = np.ascontiguousarray(ah, dtype=np.float64)
    cdef Py_ssize_t nb = x.shape[0], nr = x.shape[1]
    cdef Py_ssize_t b, r, t, npair
    cdef double d, p, acc
    cdef cnp.intp_t[::1] ii
    cdef cnp.intp_t[::1] jj
    out = np.zeros(nb, dtype=np.float64)
    cdef double[::1] res = out
    if pi is None:
        with nogil:
            for b in range(nb):
                acc = 0.0
                for r in range(nr):
                    acc += _hinge_all_pairs(x[b, r], y[b, r], theta)
                res[b] = acc
        return out
    ii = np.ascontiguousarray(pi, dtype=np.intp)
    jj = np.ascontiguousarray(pj, dtype=np.intp)
    npair = ii.shape[0]
    with nogil:
        for b in range(nb):
            acc = 0.0
            for r in range(nr):
                for t in range(npair):
                    d = x[b, r, ii[t]] - x[b, r, jj[t]]
                    if d == 0.0:
                        continue
                    p = y[b, r, ii[t]] - y[b, r, jj[t]]
                    if d < 0.0:
                        p = -p
                    if p < theta:
                        acc += theta - p
            res[b] = acc
    return out


def pair_signs(a, pi=None, pj=None):
    """sign(a_i - a_j) as int8 for every row and pair, shape (B, R, P)."""
    cdef double[:, :, ::1] x = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t nb = x.shape[0], nr = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t b, r, i, j, t
    cdef double d
    cdef cnp.intp_t[::1] ii
    cdef cnp.intp_t[::1] jj
    if pi is None:
        pi, pj = np.triu_indices(w, k=1)
    ii = np.ascontiguousarray(pi, dtype=np.intp)
    jj = np.ascontiguousarray(pj, dtype=np.intp)
    cdef Py_ssize_t npair = ii.shape[0]
    out = np.empty((nb, nr, npair), dtype=np.int8)
    cdef signed char[:, :, ::1] sg = out
    with nogil:
        for b in range(nb):
            for r in range(nr):
                for t in range(npair):
                    d = x[b, r, ii[t]] - x[b, r, jj[t]]
                    sg[b, r, t] = (d > 0.0) - (d < 0.0)
    return out


cdef inline double _hinge(double theta, double yi, double yj, double s) noexcept nogil:
    cdef double h = theta - (yi - yj) * s
    h = h if h > 0.0 else 0.0
    return h * (s * s)


cdef double _signed_all_pairs(const signed char* sg, const real_t* y, Py_ssize_t w, double theta) noexcept nogil:
    cdef Py_ssize_t i, j, t = 0
    cdef double yi, a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0
    for i in range(w - 1):
        yi = y[i]
        j = i + 1
        # four independent partial sums hide the add latency
        while j + 3 < w:
            a0 += _hinge(theta, yi, y[j], sg[t])
            a1 += _hinge(theta, yi, y[j + 1], sg[t + 1])
            a2 += _hinge(theta, yi, y[j + 2], sg[t + 2])
            a3 += _hinge(theta, yi, y[j + 3], sg[t + 3])
            j += 4
            t += 4
        while j < w:
            a0 += _hinge(theta, yi, y[j], sg[t])
            j += 1
            t += 1
    return (a0 + a1) + (a2 + a3)


cdef double _signed_indexed(const signed char* sg, const real_t* y, double theta,
                            const cnp.intp_t[::1] ii, const cnp.intp_t[::1] jj) noexcept nogil:
    cdef Py_ssize_t t
    cdef double acc = 0.0
    for t in range(ii.shape[0]):
        acc += _hinge(theta, y[ii[t]], y[jj[t]], sg[t])
    return acc


cdef void _signed_loop(const signed char[:, :, ::1] sg, const real_t[:, :, ::1] y, double theta,
                       const cnp.intp_t[::1] ii, const cnp.intp_t[::1] jj, bint indexed,
                       double[::1] res) noexcept nogil:
    cdef Py_ssize_t b, r
    cdef double acc
    for b in range(y.shape[0]):
        acc = 0.0
        for r in range(y.shape[1]):
            if indexed:
                acc += _signed_indexed(&sg[b, r, 0], &y[b, r, 0], theta, ii, jj)
            else:
                acc += _signed_all_pairs(&sg[b, r, 0], &y[b, r, 0], y.shape[2], theta)
        res[b] = acc


def ranking_loss_signed(signs, ah, double theta, pi=None, pj=None):
    """Ranking loss per batch entry from precomputed reference signs."""
    cdef signed char[:, :, ::1] sg = np.ascontiguousarray(signs, dtype=np.int8)
    y = _flat(ah)
    out = np.zeros(y.shape[0], dtype=np.float64)
    cdef bint indexed = pi is not None
    cdef cnp.intp_t[::1] ii = np.ascontiguousarray(pi if indexed else [0], dtype=np.intp)
    cdef cnp.intp_t[::1] jj = np.ascontiguousarray(pj if indexed else [0], dtype=np.intp)
    if y.dtype == np.float32:
        _signed_loop[float](sg, y, theta, ii, jj, indexed, out)
    else:
        _signed_loop[double](sg, y, theta, ii, jj, indexed, out)
    return out


def inversion_count_rows(a, ah, pi=None, pj=None):
    cdef double[:, :, ::1] x = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, :, ::1] y = np.ascontiguousarray(ah, dtype=np.float64)
    cdef cnp.intp_t[::1] ii
    cdef cnp.intp_t[::1] jj
    if pi is None:
        pi, pj = np.triu_indices(x.shape[2], k=1)
    ii = np.ascontiguousarray(pi, dtype=np.intp)
    jj = np.ascontiguousarray(pj, dtype=np.intp)
    cdef Py_ssize_t nb = x.shape[0], nr = x.shape[1], npair = ii.shape[0]
    cdef Py_ssize_t b, r, t
    cdef double d, e
    cdef long count = 0
    with nogil:
        for b in range(nb):
            for r in range(nr):
                for t in range(npair):
                    d = x[b, r, ii[t]] - x[b, r, jj[t]]
                    e = y[b, r, ii[t]] - y[b, r, jj[t]]
                    if (d > 0.0 and e < 0.0) or (d < 0.0 and e > 0.0):
                        count += 1
    return int(count)


def singular_values(m, double tol=1e-10, int max_sweeps=100):
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("singular_values expects a 2-D matrix")
    if a.shape[1] > a.shape[0]:
        a = a.T
    cdef double[:, ::1] c = np.ascontiguousarray(a.T)
    cdef Py_ssize_t n = c.shape[0], h = c.shape[1], p, q, k
    cdef double alpha, beta, gamma, zeta, t, cs, sn, u, v
    cdef bint rotated
    cdef int sweep
    if n == 0:
        return np.zeros(0)
    with nogil:
        for sweep in range(max_sweeps):
            rotated = False
            for p in range(n - 1):
                for q in range(p + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for k in range(h):
                        alpha += c[p, k] * c[p, k]
                        beta += c[q, k] * c[q, k]
                        gamma += c[p, k] * c[q, k]
                    if gamma == 0.0 or fabs(gamma) <= tol * sqrt(alpha * beta):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    t = copysign(1.0, zeta) / (fabs(zeta) + sqrt(1.0 + zeta * zeta))
                    cs = 1.0 / sqrt(1.0 + t * t)
                    sn = cs * t
                    for k in range(h):
                        u = c[p, k]
                        v = c[q, k]
                        c[p, k] = cs * u - sn * v
                        c[q, k] = sn * u + cs * v
            if not rotated:
                break
    arr = np.asarray(c)
    sv = np.sqrt(np.einsum("ij,ij->i", arr, arr))
    return np.sort(sv)[::-1]
