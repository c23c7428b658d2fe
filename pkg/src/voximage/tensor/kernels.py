"""Hot numeric kernels, each with a compiled and a pure-numpy implementation.

Every kernel exists twice: a vectorised numpy reference (``*_np``) and a
loop-form twin compiled with numba (``*_nb``).  At import time one backend is
bound to the public names.  The compiled path is the default; setting
``VOXIMAGE_NO_NUMBA=1`` (or failing to import numba) selects the numpy path.
Both remain importable so tests and ``benchmarks/bench_kernels.py`` can
compare them.

All kernels take and return C-contiguous float64 arrays.  Stochastic-free:
determinism is inherited from the caller.
"""

from __future__ import annotations

import math
import os

import numpy as np

# tanh-form GELU constants, shared by both backends.
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def softmax_rows_np(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array, max-shifted for stability."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd_np(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward of row softmax given its output y: dx = y*(dy - sum(y*dy))."""
    dot = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def logsumexp_rows_np(x: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp(x))), max-shifted so no overflow can occur."""
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def logsumexp_rows_bwd_np(x: np.ndarray, lse: np.ndarray, dlse: np.ndarray) -> np.ndarray:
    """Backward of row logsumexp: dx = softmax(x) * dlse."""
    return np.exp(x - lse[:, None]) * dlse[:, None]


def layernorm_rows_np(x, gamma, beta, eps):
    """Row-wise layer norm. Returns (y, mean, rstd); mean/rstd feed backward."""
    mu = x.mean(axis=1)
    var = ((x - mu[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mu[:, None]) * rstd[:, None] * gamma + beta
    return y, mu, rstd


def layernorm_rows_bwd_np(x, gamma, mu, rstd, dy):
    """Backward of row layer norm. Returns (dx, dgamma, dbeta)."""
    xhat = (x - mu[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


def gelu_np(x: np.ndarray) -> np.ndarray:
    """GELU, tanh form: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def gelu_bwd_np(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward of tanh-form GELU."""
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def adamw_update_np(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """One decoupled-weight-decay Adam update, in place on p, m, v.

    step is 1-based (the first update uses step=1 bias correction).
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    p -= lr * weight_decay * p
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def im2col_np(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Patch extraction for convolution.

    x: [B, C, H, W] -> cols: [B, OH*OW, C*k*k], zero-padded borders.
    Column layout: c*k*k + ky*k + kx.
    """
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, oh * ow, c * k * k), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, :, ky:ky + oh * stride:stride, kx:kx + ow * stride:stride]
            cols[:, :, ky * k + kx::k * k] = patch.reshape(b, c, oh * ow).transpose(0, 2, 1)
    return cols


def col2im_np(cols: np.ndarray, c: int, h: int, w: int, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add columns back to [B, C, H, W]."""
    b = cols.shape[0]
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            patch = cols[:, :, ky * k + kx::k * k].transpose(0, 2, 1).reshape(b, c, oh, ow)
            xp[:, :, ky:ky + oh * stride:stride, kx:kx + ow * stride:stride] += patch
    return xp[:, :, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------------------
# numba loop implementations (same math, sequential summation)
# ---------------------------------------------------------------------------

def _softmax_rows_loops(x):
    n, d = x.shape
    out = np.empty((n, d))
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(d):
            out[i, j] *= inv
    return out


def _softmax_rows_bwd_loops(y, dy):
    n, d = y.shape
    dx = np.empty((n, d))
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += y[i, j] * dy[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (dy[i, j] - dot)
    return dx


def _logsumexp_rows_loops(x):
    n, d = x.shape
    out = np.empty(n)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            s += math.exp(x[i, j] - m)
        out[i] = m + math.log(s)
    return out


def _logsumexp_rows_bwd_loops(x, lse, dlse):
    n, d = x.shape
    dx = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            dx[i, j] = math.exp(x[i, j] - lse[i]) * dlse[i]
    return dx


def _layernorm_rows_loops(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty((n, d))
    mu = np.empty(n)
    rstd = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        m = s / d
        ss = 0.0
        for j in range(d):
            diff = x[i, j] - m
            ss += diff * diff
        r = 1.0 / math.sqrt(ss / d + eps)
        mu[i] = m
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - m) * r * gamma[j] + beta[j]
    return y, mu, rstd


def _layernorm_rows_bwd_loops(x, gamma, mu, rstd, dy):
    n, d = x.shape
    dx = np.empty((n, d))
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mu[i]) * rstd[i]
            dxh = dy[i, j] * gamma[j]
            m1 += dxh
            m2 += dxh * xhat
            dgamma[j] += dy[i, j] * xhat
            dbeta[j] += dy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mu[i]) * rstd[i]
            dxh = dy[i, j] * gamma[j]
            dx[i, j] = rstd[i] * (dxh - m1 - xhat * m2)
    return dx, dgamma, dbeta


def _gelu_loops(x):
    flat = x.ravel()
    out = np.empty(flat.shape[0])
    for i in range(flat.shape[0]):
        xi = flat[i]
        out[i] = 0.5 * xi * (1.0 + math.tanh(_GELU_C * (xi + _GELU_A * xi * xi * xi)))
    return out.reshape(x.shape)


def _gelu_bwd_loops(x, dy):
    flat = x.ravel()
    dflat = dy.ravel()
    out = np.empty(flat.shape[0])
    for i in range(flat.shape[0]):
        xi = flat[i]
        u = _GELU_C * (xi + _GELU_A * xi * xi * xi)
        t = math.tanh(u)
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xi * xi)
        out[i] = dflat[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
    return out.reshape(x.shape)


def _adamw_update_loops(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * weight_decay * p[i]
        p[i] -= lr * mhat / (math.sqrt(vhat) + eps)


def _im2col_loops(x, k, stride, pad):
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((b, oh * ow, c * k * k))
    for bi in range(b):
        for oy in range(oh):
            for ox in range(ow):
                row = oy * ow + ox
                for ci in range(c):
                    for ky in range(k):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            cols[bi, row, ci * k * k + ky * k + kx] = x[bi, ci, iy, ix]
    return cols


def _col2im_loops(cols, c, h, w, k, stride, pad):
    b = cols.shape[0]
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    x = np.zeros((b, c, h, w))
    for bi in range(b):
        for oy in range(oh):
            for ox in range(ow):
                row = oy * ow + ox
                for ci in range(c):
                    for ky in range(k):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            x[bi, ci, iy, ix] += cols[bi, row, ci * k * k + ky * k + kx]
    return x


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_DISABLED = os.environ.get("VOXIMAGE_NO_NUMBA", "").lower() in ("1", "true", "yes")

if not _DISABLED:
    try:
        from numba import njit

        softmax_rows_nb = njit(cache=True)(_softmax_rows_loops)
        softmax_rows_bwd_nb = njit(cache=True)(_softmax_rows_bwd_loops)
        logsumexp_rows_nb = njit(cache=True)(_logsumexp_rows_loops)
        logsumexp_rows_bwd_nb = njit(cache=True)(_logsumexp_rows_bwd_loops)
        layernorm_rows_nb = njit(cache=True)(_layernorm_rows_loops)
        layernorm_rows_bwd_nb = njit(cache=True)(_layernorm_rows_bwd_loops)
        gelu_nb = njit(cache=True)(_gelu_loops)
        gelu_bwd_nb = njit(cache=True)(_gelu_bwd_loops)
        adamw_update_nb = njit(cache=True)(_adamw_update_loops)
        im2col_nb = njit(cache=True)(_im2col_loops)
        col2im_nb = njit(cache=True)(_col2im_loops)
        BACKEND = "numba"
    except ImportError:  # numba missing: quiet fallback, numpy is fully equivalent
        BACKEND = "numpy"
else:
    BACKEND = "numpy"

if BACKEND == "numba":
    softmax_rows = softmax_rows_nb
    softmax_rows_bwd = softmax_rows_bwd_nb
    logsumexp_rows = logsumexp_rows_nb
    logsumexp_rows_bwd = logsumexp_rows_bwd_nb
    layernorm_rows = layernorm_rows_nb
    layernorm_rows_bwd = layernorm_rows_bwd_nb
    gelu = gelu_nb
    gelu_bwd = gelu_bwd_nb
    adamw_update = adamw_update_nb
    im2col = im2col_nb
    col2im = col2im_nb
else:
    softmax_rows = softmax_rows_np
    softmax_rows_bwd = softmax_rows_bwd_np
    logsumexp_rows = logsumexp_rows_np
    logsumexp_rows_bwd = logsumexp_rows_bwd_np
    layernorm_rows = layernorm_rows_np
    layernorm_rows_bwd = layernorm_rows_bwd_np
    gelu = gelu_np
    gelu_bwd = gelu_bwd_np
    adamw_update = adamw_update_np
    im2col = im2col_np
    col2im = col2im_np
