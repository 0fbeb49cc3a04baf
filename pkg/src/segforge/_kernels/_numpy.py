"""Pure-numpy implementations of the hot kernels.

Used as the fallback lane when the compiled extension is unavailable, and for
float64 inputs (the gradient-check oracle re-executes forward passes in 64-bit).
"""
from __future__ import annotations

import numpy as np


def im2col(x: np.ndarray, k: int, pad: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo) patch matrix, zero-padded borders."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    col = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            col[:, :, di, dj] = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
    return col.reshape(n, c * k * k, ho * wo)


def col2im(dcol: np.ndarray, x_shape, k: int, pad: int, stride: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to (N, C, H, W)."""
    n, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    d6 = dcol.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += d6[:, :, di, dj]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


def _sample_coords(M, o, out_shape):
    nz, ny, nx = out_shape
    ix = np.arange(nx, dtype=np.float64)
    iy = np.arange(ny, dtype=np.float64)
    iz = np.arange(nz, dtype=np.float64)
    # u[z, y, x] = M @ (x, y, z) + o, one array per source axis
    u = M[0, 0] * ix[None, None, :] + M[0, 1] * iy[None, :, None] + M[0, 2] * iz[:, None, None] + o[0]
    v = M[1, 0] * ix[None, None, :] + M[1, 1] * iy[None, :, None] + M[1, 2] * iz[:, None, None] + o[1]
    w = M[2, 0] * ix[None, None, :] + M[2, 1] * iy[None, :, None] + M[2, 2] * iz[:, None, None] + o[2]
    return u, v, w


def resample3d_trilinear(data: np.ndarray, M, o, out_shape) -> np.ndarray:
    """Pull-back resample of (nz, ny, nx) float data; out-of-bounds reads 0."""
    u, v, w = _sample_coords(M, o, out_shape)
    nxs = data.shape[2]
    nys = data.shape[1]
    nzs = data.shape[0]
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    k0 = np.floor(w).astype(np.int64)
    fu = u - i0
    fv = v - j0
    fw = w - k0
    out = np.zeros(out_shape, dtype=np.float64)
    for dk in (0, 1):
        wz = fw if dk else 1.0 - fw
        kk = k0 + dk
        okz = (kk >= 0) & (kk < nzs)
        kkc = np.clip(kk, 0, nzs - 1)
        for dj in (0, 1):
            wy = fv if dj else 1.0 - fv
            jj = j0 + dj
            oky = okz & (jj >= 0) & (jj < nys)
            jjc = np.clip(jj, 0, nys - 1)
            for di in (0, 1):
                wx = fu if di else 1.0 - fu
                ii = i0 + di
                ok = oky & (ii >= 0) & (ii < nxs)
                iic = np.clip(ii, 0, nxs - 1)
                vals = np.where(ok, data[kkc, jjc, iic], 0.0)
                out += (wz * wy * wx) * vals
    return out.astype(np.float32)


def resample3d_nearest(data: np.ndarray, M, o, out_shape) -> np.ndarray:
    u, v, w = _sample_coords(M, o, out_shape)
    i = np.floor(u + 0.5).astype(np.int64)
    j = np.floor(v + 0.5).astype(np.int64)
    k = np.floor(w + 0.5).astype(np.int64)
    ok = (
        (i >= 0) & (i < data.shape[2])
        & (j >= 0) & (j < data.shape[1])
        & (k >= 0) & (k < data.shape[0])
    )
    ic = np.clip(i, 0, data.shape[2] - 1)
    jc = np.clip(j, 0, data.shape[1] - 1)
    kc = np.clip(k, 0, data.shape[0] - 1)
    out = data[kc, jc, ic]
    if out.dtype == np.uint8:
        return np.where(ok, out, np.uint8(0))
    return np.where(ok, out, out.dtype.type(0))
