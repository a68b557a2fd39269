"""Convolution kernels: numba direct loops with a pure-numpy im2col fallback.

These are the hot inner loops of the whole package; everything neural in
model.py reduces to the three entry points below. Layout is NCHW, float64.

Entry points dispatch on backend.BACKEND (see backend.py). The _np_* and
_nb_* pairs must stay numerically interchangeable.
"""

import numpy as np

from .backend import use_numba

# numba kernels are compiled whenever numba is importable, even if the
# active backend is numpy, so the benchmark can compare both in one process.
try:
    from numba import njit
    _HAVE_NJIT = True
except ImportError:
    _HAVE_NJIT = False


def conv_out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    eff = dilation * (k - 1) + 1
    return (size + 2 * pad - eff) // stride + 1


# ---------------------------------------------------------------------------
# pure-numpy path (im2col / col2im)
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride, pad, dilation):
    n, ci, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad, dilation)
    wo = conv_out_size(w, kw, stride, pad, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, ci, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            i0 = i * dilation
            j0 = j * dilation
            cols[:, :, i, j] = xp[:, :, i0:i0 + ho * stride:stride,
                                        j0:j0 + wo * stride:stride]
    return cols.reshape(n, ci * kh * kw, ho * wo), ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad, dilation, ho, wo):
    n, ci, h, w = x_shape
    dxp = np.zeros((n, ci, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(n, ci, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            i0 = i * dilation
            j0 = j * dilation
            dxp[:, :, i0:i0 + ho * stride:stride,
                      j0:j0 + wo * stride:stride] += dcols[:, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _np_conv_forward(x, w, b, stride, pad, dilation):
    co, ci, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad, dilation)
    y = np.matmul(w.reshape(co, -1)[None], cols)  # (n, co, ho*wo)
    y += b.reshape(1, co, 1)
    return y.reshape(x.shape[0], co, ho, wo)


def _np_conv_backward_input(dy, w, x_shape, stride, pad, dilation):
    n, co, ho, wo = dy.shape
    _, ci, kh, kw = w.shape
    dy_mat = dy.reshape(n, co, ho * wo)
    dcols = np.matmul(w.reshape(co, -1).T[None], dy_mat)
    return _col2im(dcols, x_shape, kh, kw, stride, pad, dilation, ho, wo)


def _np_conv_backward_weights(dy, x, w_shape, stride, pad, dilation):
    co, ci, kh, kw = w_shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x, kh, kw, stride, pad, dilation)
    dy_mat = dy.reshape(n, co, ho * wo)
    dw = np.einsum("nop,nkp->ok", dy_mat, cols).reshape(w_shape)
    db = dy.sum(axis=(0, 2, 3))
    return dw, db


# ---------------------------------------------------------------------------
# numba path (direct loops; parallel disabled for determinism)
# ---------------------------------------------------------------------------

if _HAVE_NJIT:
    # inputs are pre-padded by the dispatchers so the inner loops run
    # branch-free over contiguous rows

    @njit(cache=True, fastmath=True)
    def _nb_conv_forward(xp, w, b, stride, dilation, ho, wo):
        n, ci, hp, wp = xp.shape
        co, _, kh, kw = w.shape
        y = np.empty((n, co, ho, wo), dtype=xp.dtype)
        for img in range(n):
            for oc in range(co):
                for oy in range(ho):
                    for ox in range(wo):
                        y[img, oc, oy, ox] = b[oc]
            for oc in range(co):
                for ic in range(ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[oc, ic, ky, kx]
                            x0 = kx * dilation
                            for oy in range(ho):
                                iy = oy * stride + ky * dilation
                                for ox in range(wo):
                                    y[img, oc, oy, ox] += wv * xp[img, ic, iy, x0 + ox * stride]
        return y

    @njit(cache=True, fastmath=True)
    def _nb_conv_backward_input_padded(dy, w, n, ci, hp, wp, stride, dilation):
        _, co, ho, wo = dy.shape
        _, _, kh, kw = w.shape
        dxp = np.zeros((n, ci, hp, wp), dtype=dy.dtype)
        for img in range(n):
            for oc in range(co):
                for ic in range(ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[oc, ic, ky, kx]
                            x0 = kx * dilation
                            for oy in range(ho):
                                iy = oy * stride + ky * dilation
                                for ox in range(wo):
                                    dxp[img, ic, iy, x0 + ox * stride] += wv * dy[img, oc, oy, ox]
        return dxp

    @njit(cache=True, fastmath=True)
    def _nb_conv_backward_weights_padded(dy, xp, co, ci, kh, kw, stride, dilation):
        n, _, hp, wp = xp.shape
        _, _, ho, wo = dy.shape
        dw = np.zeros((co, ci, kh, kw), dtype=dy.dtype)
        db = np.zeros(co, dtype=dy.dtype)
        for img in range(n):
            for oc in range(co):
                for oy in range(ho):
                    for ox in range(wo):
                        db[oc] += dy[img, oc, oy, ox]
            for oc in range(co):
                for ic in range(ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc = 0.0
                            x0 = kx * dilation
                            for oy in range(ho):
                                iy = oy * stride + ky * dilation
                                for ox in range(wo):
                                    acc += dy[img, oc, oy, ox] * xp[img, ic, iy, x0 + ox * stride]
                            dw[oc, ic, ky, kx] += acc
        return dw, db


# ---------------------------------------------------------------------------
# dispatching entry points
# ---------------------------------------------------------------------------

def _pad_input(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))))


def conv_forward(x, w, b, stride=1, pad=0, dilation=1):
    """y = conv2d(x, w) + b with NCHW layout."""
    if use_numba():
        ho = conv_out_size(x.shape[2], w.shape[2], stride, pad, dilation)
        wo = conv_out_size(x.shape[3], w.shape[3], stride, pad, dilation)
        return _nb_conv_forward(_pad_input(x, pad), w, b, stride, dilation, ho, wo)
    return _np_conv_forward(x, w, b, stride, pad, dilation)


def conv_backward_input(dy, w, x_shape, stride=1, pad=0, dilation=1):
    if use_numba():
        n, ci, h, wdt = x_shape
        dxp = _nb_conv_backward_input_padded(
            np.ascontiguousarray(dy), w, n, ci, h + 2 * pad, wdt + 2 * pad,
            stride, dilation)
        if pad:
            return dxp[:, :, pad:-pad, pad:-pad]
        return dxp
    return _np_conv_backward_input(dy, w, x_shape, stride, pad, dilation)


def conv_backward_weights(dy, x, w_shape, stride=1, pad=0, dilation=1):
    if use_numba():
        co, ci, kh, kw = w_shape
        return _nb_conv_backward_weights_padded(
            np.ascontiguousarray(dy), _pad_input(x, pad), co, ci, kh, kw,
            stride, dilation)
    return _np_conv_backward_weights(dy, x, w_shape, stride, pad, dilation)
