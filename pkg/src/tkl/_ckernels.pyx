# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-sample kernels; same signatures as ``tkl._pykernels``.

Every routine loops over samples and runs a scalar forward/backward pass
in C, which removes the numpy call overhead that dominates small-width
full-batch training. Summation order is fixed (sequential), so results are
deterministic run to run.
"""

import numpy as np

from libc.math cimport erfc, exp

from tkl import _pykernels

cdef double _INV_SQRT_2PI = 0.3989422804014327
cdef double _SQRT1_2 = 0.7071067811865476


cdef extern from *:
    """
    /* y += a * x; restrict lets the compiler vectorize the loop */
    static inline void tkl_axpy(int n, double a, const double *__restrict x,
                                double *__restrict y) {
        for (int i = 0; i < n; i++) y[i] += a * x[i];
    }
    """
    void _axpy "tkl_axpy"(int n, double a, const double* x, double* y) noexcept nogil


cdef inline double _cdf(double s) noexcept nogil:
    return 0.5 * erfc(-s * _SQRT1_2)


def gelu(s):
    return _pykernels.gelu(s)


def gelu_prime(s):
    return _pykernels.gelu_prime(s)


# ------------------------------------------------------------------ mlp
# Per-sample scratch: z3, c3, h1, z2, c2, h2 (r each), then q outputs.

cdef void _mlp_fwd_one(const double* w, const double* wt, const double* x,
                       int p, int r, int q, double* buf) noexcept nogil:
    # wt holds W3^T (p, r) then W2^T (r, r): the inner loops run over the r
    # independent accumulators instead of one serial dot product
    cdef double* z3 = buf
    cdef double* c3 = buf + r
    cdef double* h1 = buf + 2 * r
    cdef double* z2 = buf + 3 * r
    cdef double* c2 = buf + 4 * r
    cdef double* h2 = buf + 5 * r
    cdef double* out = buf + 6 * r
    cdef const double* w3t = wt
    cdef const double* w2t = wt + p * r
    cdef int ob1 = q * r + r * r + r * p
    cdef int ob2 = ob1 + q
    cdef int ob3 = ob2 + r
    cdef int i, j, m
    cdef double s, xj
    for i in range(r):
        z3[i] = w[ob3 + i]
    for j in range(p):
        xj = x[j]
        if xj != 0.0:
            _axpy(r, xj, w3t + j * r, z3)
    for i in range(r):
        c3[i] = _cdf(z3[i])
        h1[i] = z3[i] * c3[i]
        z2[i] = w[ob2 + i]
    for j in range(r):
        _axpy(r, h1[j], w2t + j * r, z2)
    for i in range(r):
        c2[i] = _cdf(z2[i])
        h2[i] = z2[i] * c2[i]
    for m in range(q):
        s = 0.0
        for j in range(r):
            s += w[m * r + j] * h2[j]
        out[m] = s + w[ob1 + m]


cdef inline double _gp(double z, double c) noexcept nogil:
    return c + z * exp(-0.5 * z * z) * _INV_SQRT_2PI


cdef void _mlp_bwd_one(const double* w, const double* x, const double* v,
                       int p, int r, int q, const double* buf, double* work,
                       double* g) noexcept nogil:
    # g += v @ J(x), using the activations left in buf by _mlp_fwd_one
    cdef const double* z3 = buf
    cdef const double* c3 = buf + r
    cdef const double* h1 = buf + 2 * r
    cdef const double* z2 = buf + 3 * r
    cdef const double* c2 = buf + 4 * r
    cdef const double* h2 = buf + 5 * r
    cdef double* d2 = work
    cdef double* d3 = work + r
    cdef int oW2 = q * r
    cdef int oW3 = oW2 + r * r
    cdef int ob1 = oW3 + r * p
    cdef int ob2 = ob1 + q
    cdef int ob3 = ob2 + r
    cdef int i, j, m
    cdef double s, vm
    for m in range(q):
        vm = v[m]
        _axpy(r, vm, h2, g + m * r)
        g[ob1 + m] += vm
    for i in range(r):
        s = 0.0
        for m in range(q):
            s += v[m] * w[m * r + i]
        d2[i] = s * _gp(z2[i], c2[i])
    for i in range(r):
        _axpy(r, d2[i], h1, g + oW2 + i * r)
        g[ob2 + i] += d2[i]
    for j in range(r):
        s = 0.0
        for i in range(r):
            s += d2[i] * w[oW2 + i * r + j]
        d3[j] = s * _gp(z3[j], c3[j])
    for j in range(r):
        _axpy(p, d3[j], x, g + oW3 + j * p)
        g[ob3 + j] += d3[j]


def _transposed(w, int p, int r, int q):
    W2, W3 = _pykernels._split_mlp(np.asarray(w), p, r, q)[1:3]
    return np.concatenate([W3.T.ravel(), W2.T.ravel()])


def mlp_forward(w, X, int p, int r, int q):
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] wt = _transposed(wv, p, r, q)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t N = Xv.shape[0], n
    cdef int m
    out = np.empty((N, q))
    cdef double[:, ::1] ov = out
    cdef double[::1] buf = np.empty(6 * r + q)
    with nogil:
        for n in range(N):
            _mlp_fwd_one(&wv[0], &wt[0], &Xv[n, 0], p, r, q, &buf[0])
            for m in range(q):
                ov[n, m] = buf[6 * r + m]
    return out


def mlp_vjp(w, X, V, int p, int r, int q):
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] wt = _transposed(wv, p, r, q)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Vv = np.ascontiguousarray(V, dtype=np.float64)
    cdef Py_ssize_t N = Xv.shape[0], n
    grad = np.zeros(wv.shape[0])
    cdef double[::1] g = grad
    cdef double[::1] buf = np.empty(6 * r + q)
    cdef double[::1] work = np.empty(2 * r)
    with nogil:
        for n in range(N):
            _mlp_fwd_one(&wv[0], &wt[0], &Xv[n, 0], p, r, q, &buf[0])
            _mlp_bwd_one(&wv[0], &Xv[n, 0], &Vv[n, 0], p, r, q, &buf[0], &work[0], &g[0])
    return grad


def mlp_mse_grad(w, X, Y, int p, int r, int q):
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] wt = _transposed(wv, p, r, q)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef Py_ssize_t N = Xv.shape[0], n
    cdef int m
    cdef double scale = 2.0 / N
    out = np.empty((N, q))
    cdef double[:, ::1] ov = out
    grad = np.zeros(wv.shape[0])
    cdef double[::1] g = grad
    cdef double[::1] buf = np.empty(6 * r + q)
    cdef double[::1] work = np.empty(2 * r + q)
    with nogil:
        for n in range(N):
            _mlp_fwd_one(&wv[0], &wt[0], &Xv[n, 0], p, r, q, &buf[0])
            for m in range(q):
                ov[n, m] = buf[6 * r + m]
                work[2 * r + m] = scale * (buf[6 * r + m] - Yv[n, m])
            _mlp_bwd_one(&wv[0], &Xv[n, 0], &work[2 * r], p, r, q, &buf[0], &work[0], &g[0])
    return out, grad


def mlp_jacobian(w, X, int p, int r, int q):
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] wt = _transposed(wv, p, r, q)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t N = Xv.shape[0], n
    jac = np.zeros((N, q, wv.shape[0]))
    cdef double[:, :, ::1] J = jac
    cdef double[::1] buf = np.empty(6 * r + q)
    cdef double[::1] work = np.empty(2 * r + q)
    cdef int m, j
    with nogil:
        for n in range(N):
            _mlp_fwd_one(&wv[0], &wt[0], &Xv[n, 0], p, r, q, &buf[0])
            for m in range(q):
                for j in range(q):
                    work[2 * r + j] = 0.0
                work[2 * r + m] = 1.0
                _mlp_bwd_one(&wv[0], &Xv[n, 0], &work[2 * r], p, r, q, &buf[0],
                             &work[0], &J[n, m, 0])
    return jac


# ----------------------------------------------------------------- conv
# Block b (size 4r+1): c1w (r, 2) at 0, c1b at 2r, c2w at 3r, c2b at 4r.
# ubuf holds every level's activations back to back (2 * L0 doubles);
# zbuf holds every block's pre-activations (r * L0 doubles).

cdef double _conv_fwd_one(const double* w, const double* x, int L0, int B, int r,
                          double* ubuf, double* zbuf) noexcept nogil:
    cdef int L = L0, Lh, uoff = 0, zoff = 0, bo = 0
    cdef int b, i, c
    cdef double a, bb, t, z
    for i in range(L0):
        ubuf[i] = x[i]
    for b in range(B):
        Lh = L // 2
        for i in range(Lh):
            a = ubuf[uoff + 2 * i]
            bb = ubuf[uoff + 2 * i + 1]
            t = 0.0
            for c in range(r):
                z = w[bo + 2 * c] * a + w[bo + 2 * c + 1] * bb + w[bo + 2 * r + c]
                zbuf[zoff + i * r + c] = z
                if z > 0.0:
                    t += w[bo + 3 * r + c] * z
            ubuf[uoff + L + i] = t + w[bo + 4 * r]
        zoff += Lh * r
        uoff += L
        L = Lh
        bo += 4 * r + 1
    return ubuf[uoff]


cdef void _conv_bwd_one(const double* w, int L0, int B, int r,
                        const double* ubuf, const double* zbuf, double seed,
                        double* grad, double* gout, double* gin) noexcept nogil:
    cdef int b, i, c, L, Lh, uoff, zoff, bo, k
    cdef double gt, gz, ga, gb, z
    cdef double* tmp
    gout[0] = seed
    for b in range(B - 1, -1, -1):
        L = L0 >> b
        Lh = L // 2
        uoff = 0
        zoff = 0
        for k in range(b):
            uoff += L0 >> k
            zoff += (L0 >> (k + 1)) * r
        bo = b * (4 * r + 1)
        for i in range(Lh):
            gt = gout[i]
            grad[bo + 4 * r] += gt
            ga = 0.0
            gb = 0.0
            for c in range(r):
                z = zbuf[zoff + i * r + c]
                if z > 0.0:
                    grad[bo + 3 * r + c] += gt * z
                    gz = gt * w[bo + 3 * r + c]
                    grad[bo + 2 * r + c] += gz
                    grad[bo + 2 * c] += gz * ubuf[uoff + 2 * i]
                    grad[bo + 2 * c + 1] += gz * ubuf[uoff + 2 * i + 1]
                    ga += gz * w[bo + 2 * c]
                    gb += gz * w[bo + 2 * c + 1]
            gin[2 * i] = ga
            gin[2 * i + 1] = gb
        tmp = gout
        gout = gin
        gin = tmp


cdef int _log2(int L):
    cdef int B = 0
    while (1 << B) < L:
        B += 1
    return B


def conv_forward(w, Xc, int r, extra=False):
    if extra:
        return _pykernels.conv_forward(w, Xc, r, extra)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(Xc, dtype=np.float64)
    cdef Py_ssize_t M = Xv.shape[0], m
    cdef int L0 = Xv.shape[1]
    cdef int B = _log2(L0)
    out = np.empty(M)
    cdef double[::1] ov = out
    cdef double[::1] ubuf = np.empty(2 * L0)
    cdef double[::1] zbuf = np.empty(r * L0)
    with nogil:
        for m in range(M):
            ov[m] = _conv_fwd_one(&wv[0], &Xv[m, 0], L0, B, r, &ubuf[0], &zbuf[0])
    return out


def conv_vjp(w, Xc, v, int r, extra=False):
    if extra:
        return _pykernels.conv_vjp(w, Xc, v, r, extra)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(Xc, dtype=np.float64)
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t M = Xv.shape[0], m
    cdef int L0 = Xv.shape[1]
    cdef int B = _log2(L0)
    grad = np.zeros(wv.shape[0])
    cdef double[::1] g = grad
    cdef double[::1] ubuf = np.empty(2 * L0)
    cdef double[::1] zbuf = np.empty(r * L0)
    cdef double[::1] gbuf = np.empty(2 * L0)
    with nogil:
        for m in range(M):
            _conv_fwd_one(&wv[0], &Xv[m, 0], L0, B, r, &ubuf[0], &zbuf[0])
            _conv_bwd_one(&wv[0], L0, B, r, &ubuf[0], &zbuf[0], vv[m], &g[0],
                          &gbuf[0], &gbuf[L0])
    return grad


def conv_jacobian(w, Xc, int r, extra=False):
    if extra:
        return _pykernels.conv_jacobian(w, Xc, r, extra)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(Xc, dtype=np.float64)
    cdef Py_ssize_t M = Xv.shape[0], m
    cdef int L0 = Xv.shape[1]
    cdef int B = _log2(L0)
    jac = np.zeros((M, wv.shape[0]))
    cdef double[:, ::1] J = jac
    cdef double[::1] ubuf = np.empty(2 * L0)
    cdef double[::1] zbuf = np.empty(r * L0)
    cdef double[::1] gbuf = np.empty(2 * L0)
    with nogil:
        for m in range(M):
            _conv_fwd_one(&wv[0], &Xv[m, 0], L0, B, r, &ubuf[0], &zbuf[0])
            _conv_bwd_one(&wv[0], L0, B, r, &ubuf[0], &zbuf[0], 1.0, &J[m, 0],
                          &gbuf[0], &gbuf[L0])
    return jac


def conv_mse_grad(w, Xc, y, n_samples, int r, extra=False):
    if extra:
        return _pykernels.conv_mse_grad(w, Xc, y, n_samples, r, extra)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(Xc, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t M = Xv.shape[0], m
    cdef int L0 = Xv.shape[1]
    cdef int B = _log2(L0)
    cdef double scale = 2.0 / n_samples
    cdef double o
    out = np.empty(M)
    cdef double[::1] ov = out
    grad = np.zeros(wv.shape[0])
    cdef double[::1] g = grad
    cdef double[::1] ubuf = np.empty(2 * L0)
    cdef double[::1] zbuf = np.empty(r * L0)
    cdef double[::1] gbuf = np.empty(2 * L0)
    with nogil:
        for m in range(M):
            o = _conv_fwd_one(&wv[0], &Xv[m, 0], L0, B, r, &ubuf[0], &zbuf[0])
            ov[m] = o
            _conv_bwd_one(&wv[0], L0, B, r, &ubuf[0], &zbuf[0], scale * (o - yv[m]),
                          &g[0], &gbuf[0], &gbuf[L0])
    return out, grad
