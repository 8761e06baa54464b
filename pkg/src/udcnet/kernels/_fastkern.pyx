# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: im2col + BLAS dgemm for conv2d, tight C loops for
the per-pixel dynamic convolution.

Layout notes: all tensors are C-contiguous float64 NCHW. Per batch item the
patch matrix is built as (K, N) with K = Cin*kh*kw (ordered ci, u, v) and
N = Ho*Wo, so the forward gemm writes straight into the output block and no
transposes are needed anywhere.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

NAME = "compiled"


def _zero_pad(x, int pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    cdef int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    return xp


cdef void _im2col_batch(double[:, :, :, ::1] xp, Py_ssize_t b,
                        double[:, ::1] cols, int Cin, int kh, int kw,
                        int Ho, int Wo, int stride) noexcept:
    cdef Py_ssize_t ci, u, v, i, j, kidx, row
    for ci in range(Cin):
        for u in range(kh):
            for v in range(kw):
                kidx = (ci * kh + u) * kw + v
                for i in range(Ho):
                    row = i * Wo
                    for j in range(Wo):
                        cols[kidx, row + j] = xp[b, ci, i * stride + u, j * stride + v]


cdef void _col2im_batch(double[:, ::1] gcols, double[:, :, :, ::1] gxp,
                        Py_ssize_t b, int Cin, int kh, int kw,
                        int Ho, int Wo, int stride) noexcept:
    cdef Py_ssize_t ci, u, v, i, j, kidx, row
    for ci in range(Cin):
        for u in range(kh):
            for v in range(kw):
                kidx = (ci * kh + u) * kw + v
                for i in range(Ho):
                    row = i * Wo
                    for j in range(Wo):
                        gxp[b, ci, i * stride + u, j * stride + v] += gcols[kidx, row + j]


def conv2d_forward(cnp.ndarray x, cnp.ndarray w, int stride, int pad):
    cdef int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int Ho = (H + 2 * pad - kh) // stride + 1
    cdef int Wo = (W + 2 * pad - kw) // stride + 1
    cdef int K = Cin * kh * kw, N = Ho * Wo

    xp_arr = _zero_pad(x, pad)
    out_arr = np.empty((B, Cout, Ho, Wo))
    cols_arr = np.empty((K, N))

    cdef double[:, :, :, ::1] xp = xp_arr
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] w2 = np.ascontiguousarray(w).reshape(Cout, K)
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t b

    for b in range(B):
        _im2col_batch(xp, b, cols, Cin, kh, kw, Ho, Wo, stride)
        # row-major out[b] (Cout,N) = w2 (Cout,K) @ cols (K,N)
        dgemm("N", "N", &N, &Cout, &K, &one, &cols[0, 0], &N,
              &w2[0, 0], &K, &zero, &out[b, 0, 0, 0], &N)
    return out_arr


def conv2d_backward(cnp.ndarray x, cnp.ndarray w, cnp.ndarray gout,
                    int stride, int pad, bint need_gx, bint need_gw):
    cdef int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int Ho = gout.shape[2], Wo = gout.shape[3]
    cdef int K = Cin * kh * kw, N = Ho * Wo

    gx_arr = gw_arr = None
    cols_arr = np.empty((K, N))
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] w2 = np.ascontiguousarray(w).reshape(Cout, K)
    cdef double[:, :, :, ::1] go = np.ascontiguousarray(gout)
    cdef double[:, :, :, ::1] xp, gxp
    cdef double[:, ::1] gw2, gcols
    cdef double one = 1.0, zero = 0.0
    cdef Py_ssize_t b

    xp_arr = _zero_pad(x, pad)
    xp = xp_arr

    if need_gw:
        gw_arr = np.zeros((Cout, K))
        gw2 = gw_arr
    if need_gx:
        gxp_arr = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad))
        gxp = gxp_arr
        gcols_arr = np.empty((K, N))
        gcols = gcols_arr

    for b in range(B):
        if need_gw:
            _im2col_batch(xp, b, cols, Cin, kh, kw, Ho, Wo, stride)
            # gw2 (Cout,K) += gout[b] (Cout,N) @ cols.T (N,K)
            dgemm("T", "N", &K, &Cout, &N, &one, &cols[0, 0], &N,
                  &go[b, 0, 0, 0], &N, &one, &gw2[0, 0], &K)
        if need_gx:
            # gcols (K,N) = w2.T (K,Cout) @ gout[b] (Cout,N)
            dgemm("N", "T", &N, &K, &Cout, &one, &go[b, 0, 0, 0], &N,
                  &w2[0, 0], &K, &zero, &gcols[0, 0], &N)
            _col2im_batch(gcols, gxp, b, Cin, kh, kw, Ho, Wo, stride)

    if need_gw:
        gw_arr = gw_arr.reshape(Cout, Cin, kh, kw)
    if need_gx:
        gx_arr = np.ascontiguousarray(gxp_arr[:, :, pad:pad + H, pad:pad + W]) if pad else gxp_arr
    return gx_arr, gw_arr


def dynconv_forward(cnp.ndarray feat, cnp.ndarray kern, int k):
    cdef int B = feat.shape[0], C = feat.shape[1], H = feat.shape[2], W = feat.shape[3]
    cdef int r = (k - 1) // 2
    fp_arr = _zero_pad(feat, r)
    out_arr = np.zeros((B, C, H, W))

    cdef double[:, :, :, ::1] fp = fp_arr
    cdef double[:, :, :, ::1] kk = np.ascontiguousarray(kern)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, t, u, v, i, j, ch
    for b in range(B):
        for c in range(C):
            for t in range(k * k):
                u = t // k
                v = t % k
                ch = c * k * k + t
                for i in range(H):
                    for j in range(W):
                        out[b, c, i, j] += kk[b, ch, i, j] * fp[b, c, i + u, j + v]
    return out_arr


def dynconv_backward(cnp.ndarray feat, cnp.ndarray kern, cnp.ndarray gout,
                     int k, bint need_gf, bint need_gk):
    cdef int B = feat.shape[0], C = feat.shape[1], H = feat.shape[2], W = feat.shape[3]
    cdef int r = (k - 1) // 2
    gf_arr = gk_arr = None

    fp_arr = _zero_pad(feat, r)
    cdef double[:, :, :, ::1] fp = fp_arr
    cdef double[:, :, :, ::1] kk = np.ascontiguousarray(kern)
    cdef double[:, :, :, ::1] go = np.ascontiguousarray(gout)
    cdef double[:, :, :, ::1] gk, gfp
    cdef Py_ssize_t b, c, t, u, v, i, j, ch

    if need_gk:
        gk_arr = np.empty_like(kern)
        gk = gk_arr
        for b in range(B):
            for c in range(C):
                for t in range(k * k):
                    u = t // k
                    v = t % k
                    ch = c * k * k + t
                    for i in range(H):
                        for j in range(W):
                            gk[b, ch, i, j] = fp[b, c, i + u, j + v] * go[b, c, i, j]
    if need_gf:
        gfp_arr = np.zeros((B, C, H + 2 * r, W + 2 * r))
        gfp = gfp_arr
        for b in range(B):
            for c in range(C):
                for t in range(k * k):
                    u = t // k
                    v = t % k
                    ch = c * k * k + t
                    for i in range(H):
                        for j in range(W):
                            gfp[b, c, i + u, j + v] += kk[b, ch, i, j] * go[b, c, i, j]
        gf_arr = np.ascontiguousarray(gfp_arr[:, :, r:r + H, r:r + W]) if r else gfp_arr
    return gf_arr, gk_arr
