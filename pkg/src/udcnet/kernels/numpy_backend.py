"""Pure-numpy kernels: im2col + BLAS matmul for conv2d, slice arithmetic
for the per-pixel dynamic convolution.

Same array-in/array-out contracts as the compiled backend. All arrays are
C-contiguous float64; gradients come back in the input shapes.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _conv_out_hw(H, W, kh, kw, stride, pad):
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    return Ho, Wo


def _zero_pad(x, pad):
    if not pad:
        return x
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    return xp


def _im2col(x, kh, kw, stride, pad):
    """Gather conv patches into (B, Ho*Wo, Cin*kh*kw), patch axis ordered (ci, u, v)."""
    B, Cin, H, W = x.shape
    Ho, Wo = _conv_out_hw(H, W, kh, kw, stride, pad)
    xp = _zero_pad(x, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Cin, Ho, Wo, kh, kw) -> (B, Ho*Wo, Cin*kh*kw); reshape copies into contiguous memory
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, Cin * kh * kw)


def conv2d_forward(x, w, stride, pad):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    Ho, Wo = _conv_out_hw(H, W, kh, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(Cout, -1).T  # (B, Ho*Wo, Cout)
    return np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(B, Cout, Ho, Wo)


def conv2d_backward(x, w, gout, stride, pad, need_gx, need_gw):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    _, _, Ho, Wo = gout.shape
    N = Ho * Wo
    gout2 = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(B * N, Cout)

    gx = gw = None
    if need_gw:
        cols = _im2col(x, kh, kw, stride, pad)
        gw = (gout2.T @ cols.reshape(B * N, -1)).reshape(w.shape)
    if need_gx:
        gcols = (gout2 @ w.reshape(Cout, -1)).reshape(B, Ho, Wo, Cin, kh, kw)
        gxp = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad))
        for u in range(kh):
            iu = u + stride * (Ho - 1) + 1
            for v in range(kw):
                jv = v + stride * (Wo - 1) + 1
                gxp[:, :, u:iu:stride, v:jv:stride] += gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        gx = np.ascontiguousarray(gx)
    return gx, gw


def dynconv_forward(feat, kern, k):
    B, C, H, W = feat.shape
    r = (k - 1) // 2
    fp = _zero_pad(feat, r)
    kk = kern.reshape(B, C, k * k, H, W)
    out = np.zeros((B, C, H, W))
    for t in range(k * k):
        u, v = divmod(t, k)
        out += kk[:, :, t] * fp[:, :, u:u + H, v:v + W]
    return out


def dynconv_backward(feat, kern, gout, k, need_gf, need_gk):
    B, C, H, W = feat.shape
    r = (k - 1) // 2
    gf = gk = None
    if need_gk:
        fp = _zero_pad(feat, r)
        gk = np.empty_like(kern).reshape(B, C, k * k, H, W)
        for t in range(k * k):
            u, v = divmod(t, k)
            gk[:, :, t] = fp[:, :, u:u + H, v:v + W] * gout
        gk = gk.reshape(kern.shape)
    if need_gf:
        kk = kern.reshape(B, C, k * k, H, W)
        gfp = np.zeros((B, C, H + 2 * r, W + 2 * r))
        for t in range(k * k):
            u, v = divmod(t, k)
            gfp[:, :, u:u + H, v:v + W] += kk[:, :, t] * gout
        gf = np.ascontiguousarray(gfp[:, :, r:r + H, r:r + W]) if r else gfp
    return gf, gk
