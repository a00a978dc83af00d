"""Compiled inner loops: depthwise convolution and float32 erf.

Stride-1 loops are separate functions: a runtime stride in the inner loop
blocks vectorization.
"""

import numba
import numpy as np
from scipy import special


@numba.njit(cache=True)
def _dw_fwd_s1(xp, w, out):
    N, C, Ho, Wo = out.shape
    kH, kW = w.shape[2], w.shape[3]
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, c, i, j] = 0.0
                for a in range(kH):
                    for b in range(kW):
                        wv = w[c, 0, a, b]
                        for j in range(Wo):
                            out[n, c, i, j] += xp[n, c, i + a, j + b] * wv


@numba.njit(cache=True)
def _dw_fwd_strided(xp, w, out, s):
    N, C, Ho, Wo = out.shape
    kH, kW = w.shape[2], w.shape[3]
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, c, i, j] = 0.0
                for a in range(kH):
                    for b in range(kW):
                        wv = w[c, 0, a, b]
                        for j in range(Wo):
                            out[n, c, i, j] += xp[n, c, i * s + a, j * s + b] * wv


@numba.njit(cache=True)
def _dw_bwd_s1(xp, w, g, gxp, gw):
    N, C, Ho, Wo = g.shape
    kH, kW = w.shape[2], w.shape[3]
    for c in range(C):
        for a in range(kH):
            for b in range(kW):
                wv = w[c, 0, a, b]
                acc = 0.0
                for n in range(N):
                    for i in range(Ho):
                        for j in range(Wo):
                            acc += g[n, c, i, j] * xp[n, c, i + a, j + b]
                        for j in range(Wo):
                            gxp[n, c, i + a, j + b] += g[n, c, i, j] * wv
                gw[c, 0, a, b] = acc


@numba.njit(cache=True)
def _dw_bwd_strided(xp, w, g, gxp, gw, s):
    N, C, Ho, Wo = g.shape
    kH, kW = w.shape[2], w.shape[3]
    for c in range(C):
        for a in range(kH):
            for b in range(kW):
                wv = w[c, 0, a, b]
                acc = 0.0
                for n in range(N):
                    for i in range(Ho):
                        for j in range(Wo):
                            acc += g[n, c, i, j] * xp[n, c, i * s + a, j * s + b]
                        for j in range(Wo):
                            gxp[n, c, i * s + a, j * s + b] += g[n, c, i, j] * wv
                gw[c, 0, a, b] = acc


def depthwise_forward(xp, w, out, stride):
    if stride == 1:
        _dw_fwd_s1(xp, w, out)
    else:
        _dw_fwd_strided(xp, w, out, stride)


def depthwise_backward(xp, w, g, gxp, gw, stride):
    """Fills ``gxp`` (padded-input gradient) and ``gw`` in place."""
    if stride == 1:
        _dw_bwd_s1(xp, w, g, gxp, gw)
    else:
        _dw_bwd_strided(xp, w, g, gxp, gw, stride)


@numba.njit(cache=True)
def _erf32_flat(x, out):
    # rational approximation, within a few float32 ulps; clamped at |x| = 4
    # where erf is 1 to float32 precision
    for k in range(x.size):
        v = min(max(x[k], numba.float32(-4.0)), numba.float32(4.0))
        v2 = v * v
        p = numba.float32(-2.72614225801306e-10)
        p = p * v2 + numba.float32(2.77068142495902e-08)
        p = p * v2 + numba.float32(-2.10102402082508e-06)
        p = p * v2 + numba.float32(-5.69250639462346e-05)
        p = p * v2 + numba.float32(-7.34990630326855e-04)
        p = p * v2 + numba.float32(-2.95459980854025e-03)
        p = p * v2 + numba.float32(-1.60960333262415e-02)
        q = numba.float32(-1.45660718464996e-05)
        q = q * v2 + numba.float32(-2.13374055278905e-04)
        q = q * v2 + numba.float32(-1.68282697438203e-03)
        q = q * v2 + numba.float32(-7.37332916720468e-03)
        q = q * v2 + numba.float32(-1.42647390514189e-02)
        out[k] = v * p / q


def erf(x: np.ndarray) -> np.ndarray:
    """Error function; float64 inputs use scipy's double-precision erf."""
    if x.dtype == np.float32:
        out = np.empty_like(x)
        _erf32_flat(x.reshape(-1), out.reshape(-1))
        return out
    return special.erf(x)
