"""Convolution value kernels (NHWC, weights [KH, KW, Cin, Cout]).

The backend is picked per call shape, from measurements on small-image CNN
workloads:

* a numba-jitted fused loop wins on large spatial maps (it touches the
  output once instead of once per kernel tap) and on tiny input channel
  counts, where the tap-GEMM approach wastes output traffic;
* the numpy path (one GEMM per kernel tap plus strided adds) wins on small
  maps, where everything is cache-resident and BLAS is at full efficiency.

Both paths are deterministic; CVTR_NO_NUMBA=1 forces pure numpy. Only
values are computed here; differentiation structure lives in autodiff.
"""

from __future__ import annotations

import os

import numpy as np

_USE_NUMBA = os.environ.get("CVTR_NO_NUMBA", "") != "1"
if _USE_NUMBA:
    try:
        from numba import njit, prange
    except ImportError:  # pragma: no cover - exercised via CVTR_NO_NUMBA
        _USE_NUMBA = False


def _pad(x: np.ndarray, ph: int, pw: int | None = None) -> np.ndarray:
    """Zero-pad spatial dims; hand-rolled because np.pad is surprisingly slow."""
    if pw is None:
        pw = ph
    if ph == 0 and pw == 0:
        return x
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * ph, w + 2 * pw, c))
    out[:, ph:ph + h, pw:pw + w, :] = x
    return out


def out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int
           ) -> tuple[int, int]:
    return ((h + 2 * pad - kh) // stride + 1,
            (w + 2 * pad - kw) // stride + 1)


# ---------------------------------------------------------------------------
# numpy backend: one GEMM per kernel tap
# ---------------------------------------------------------------------------

def _np_conv_fwd(x, w, stride, pad):
    b, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    oh, ow = out_hw(h, wd, kh, kw, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((b, oh, ow, cout))
    if stride == 1:
        flat = xp.reshape(-1, cin)
        hp, wp = xp.shape[1], xp.shape[2]
        for i in range(kh):
            for j in range(kw):
                y = (flat @ w[i, j]).reshape(b, hp, wp, cout)
                out += y[:, i:i + oh, j:j + ow, :]
    else:
        for i in range(kh):
            for j in range(kw):
                sl = np.ascontiguousarray(
                    xp[:, i:i + (oh - 1) * stride + 1:stride,
                       j:j + (ow - 1) * stride + 1:stride, :]).reshape(-1, cin)
                out += (sl @ w[i, j]).reshape(b, oh, ow, cout)
    return out


def _np_conv_xgrad(g, w, stride, pad, xshape):
    b, h, wd, cin = xshape
    kh, kw, _, cout = w.shape
    oh, ow = g.shape[1], g.shape[2]
    gf = g.reshape(-1, cout)
    dxp = np.zeros((b, h + 2 * pad, wd + 2 * pad, cin))
    for i in range(kh):
        for j in range(kw):
            y = (gf @ w[i, j].T).reshape(b, oh, ow, cin)
            dxp[:, i:i + (oh - 1) * stride + 1:stride,
                j:j + (ow - 1) * stride + 1:stride, :] += y
    if pad:
        return np.ascontiguousarray(dxp[:, pad:pad + h, pad:pad + wd, :])
    return dxp


def _np_conv_wgrad(x, g, stride, pad, kh, kw):
    b, h, wd, cin = x.shape
    cout = g.shape[3]
    oh, ow = g.shape[1], g.shape[2]
    xp = _pad(x, pad)
    gf = g.reshape(-1, cout)
    dw = np.empty((kh, kw, cin, cout))
    for i in range(kh):
        for j in range(kw):
            sl = np.ascontiguousarray(
                xp[:, i:i + (oh - 1) * stride + 1:stride,
                   j:j + (ow - 1) * stride + 1:stride, :]).reshape(-1, cin)
            dw[i, j] = sl.T @ gf
    return dw


# ---------------------------------------------------------------------------
# numba backend: a single fused accumulation loop, SIMD over the output
# channel axis. The output cell block (one row of the map) stays in L1
# across all taps. Deterministic: each output row is written by one thread.
# ---------------------------------------------------------------------------

if _USE_NUMBA:

    @njit(parallel=True, cache=True)
    def _nb_conv_fwd(xp, w, out, stride):
        nb, oh_n, ow_n, f_n = out.shape
        kh, kw, c_n, _ = w.shape
        for b in prange(nb):
            for oh in range(oh_n):
                row = out[b, oh]
                for i in range(kh):
                    xrow = xp[b, oh * stride + i]
                    for j in range(kw):
                        for c in range(c_n):
                            wv = w[i, j, c]
                            for ow in range(ow_n):
                                xc = xrow[ow * stride + j, c]
                                for f in range(f_n):
                                    row[ow, f] += xc * wv[f]


def _numba_fwd_wins(spatial_out: int, cin: int) -> bool:
    return cin <= 4 or spatial_out >= 400


def conv_fwd(x, w, stride, pad):
    b, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    oh, ow = out_hw(h, wd, kh, kw, stride, pad)
    if _USE_NUMBA and stride == 1 and _numba_fwd_wins(oh * ow, cin):
        out = np.zeros((b, oh, ow, cout))
        _nb_conv_fwd(_pad(x, pad), np.ascontiguousarray(w), out, 1)
        return out
    return _np_conv_fwd(x, w, stride, pad)


def conv_xgrad(g, w, stride, pad, xshape):
    b, h, wd, cin = xshape
    kh, kw, _, cout = w.shape
    oh, ow = g.shape[1], g.shape[2]
    if _USE_NUMBA and stride == 1 and cin >= 8 and oh * ow >= 400:
        # full correlation with the flipped channel-transposed kernel is the
        # same fused loop as the forward pass
        wt = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        gp = _pad(np.ascontiguousarray(g), kh - 1, kw - 1)
        dxp = np.zeros((b, h + 2 * pad, wd + 2 * pad, cin))
        _nb_conv_fwd(gp, wt, dxp, 1)
        if pad:
            return np.ascontiguousarray(dxp[:, pad:pad + h, pad:pad + wd, :])
        return dxp
    return _np_conv_xgrad(g, w, stride, pad, xshape)


def conv_wgrad(x, g, stride, pad, kh, kw):
    return _np_conv_wgrad(x, g, stride, pad, kh, kw)
