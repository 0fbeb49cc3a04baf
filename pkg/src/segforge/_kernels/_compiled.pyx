# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: conv2d patch gather/scatter and 3D resampling."""
import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _floor_idx(double x):
    cdef Py_ssize_t i = <Py_ssize_t>x
    if x < 0 and x != i:
        i -= 1
    return i


cdef inline Py_ssize_t _round_idx(double x):
    # floor(x + 0.5); matches the numpy lane's half-up rounding
    return _floor_idx(x + 0.5)


def im2col_f32(const cnp.float32_t[:, :, :, ::1] x, int k, int pad, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out = np.empty((n, c * k * k, ho * wo), dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] col = out
    cdef Py_ssize_t b, ci, di, dj, i, j, row, src_i, src_j
    for b in range(n):
        for ci in range(c):
            for di in range(k):
                for dj in range(k):
                    row = (ci * k + di) * k + dj
                    for i in range(ho):
                        src_i = i * stride + di - pad
                        if src_i < 0 or src_i >= h:
                            for j in range(wo):
                                col[b, row, i * wo + j] = 0.0
                            continue
                        for j in range(wo):
                            src_j = j * stride + dj - pad
                            if 0 <= src_j < w:
                                col[b, row, i * wo + j] = x[b, ci, src_i, src_j]
                            else:
                                col[b, row, i * wo + j] = 0.0
    return out


def col2im_f32(const cnp.float32_t[:, :, ::1] dcol, Py_ssize_t n, Py_ssize_t c,
               Py_ssize_t h, Py_ssize_t w, int k, int pad, int stride):
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, di, dj, i, j, row, src_i, src_j
    for b in range(n):
        for ci in range(c):
            for di in range(k):
                for dj in range(k):
                    row = (ci * k + di) * k + dj
                    for i in range(ho):
                        src_i = i * stride + di - pad
                        if src_i < 0 or src_i >= h:
                            continue
                        for j in range(wo):
                            src_j = j * stride + dj - pad
                            if 0 <= src_j < w:
                                dx[b, ci, src_i, src_j] += dcol[b, row, i * wo + j]
    return out


def resample3d_trilinear_f32(const cnp.float32_t[:, :, ::1] data,
                             const cnp.float64_t[:, ::1] M, const cnp.float64_t[::1] o,
                             Py_ssize_t nz, Py_ssize_t ny, Py_ssize_t nx):
    cdef Py_ssize_t snz = data.shape[0], sny = data.shape[1], snx = data.shape[2]
    out = np.zeros((nz, ny, nx), dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] dst = out
    cdef Py_ssize_t iz, iy, ix, i0, j0, k0, i1, j1, k1
    cdef double u, v, w, ub, vb, wb, fu, fv, fw, acc
    cdef double c000, c100, c010, c110, c001, c101, c011, c111
    for iz in range(nz):
        for iy in range(ny):
            ub = M[0, 1] * iy + M[0, 2] * iz + o[0]
            vb = M[1, 1] * iy + M[1, 2] * iz + o[1]
            wb = M[2, 1] * iy + M[2, 2] * iz + o[2]
            for ix in range(nx):
                u = M[0, 0] * ix + ub
                v = M[1, 0] * ix + vb
                w = M[2, 0] * ix + wb
                i0 = _floor_idx(u)
                j0 = _floor_idx(v)
                k0 = _floor_idx(w)
                fu = u - i0
                fv = v - j0
                fw = w - k0
                i1 = i0 + 1
                j1 = j0 + 1
                k1 = k0 + 1
                c000 = data[k0, j0, i0] if (0 <= k0 < snz and 0 <= j0 < sny and 0 <= i0 < snx) else 0.0
                c100 = data[k0, j0, i1] if (0 <= k0 < snz and 0 <= j0 < sny and 0 <= i1 < snx) else 0.0
                c010 = data[k0, j1, i0] if (0 <= k0 < snz and 0 <= j1 < sny and 0 <= i0 < snx) else 0.0
                c110 = data[k0, j1, i1] if (0 <= k0 < snz and 0 <= j1 < sny and 0 <= i1 < snx) else 0.0
                c001 = data[k1, j0, i0] if (0 <= k1 < snz and 0 <= j0 < sny and 0 <= i0 < snx) else 0.0
                c101 = data[k1, j0, i1] if (0 <= k1 < snz and 0 <= j0 < sny and 0 <= i1 < snx) else 0.0
                c011 = data[k1, j1, i0] if (0 <= k1 < snz and 0 <= j1 < sny and 0 <= i0 < snx) else 0.0
                c111 = data[k1, j1, i1] if (0 <= k1 < snz and 0 <= j1 < sny and 0 <= i1 < snx) else 0.0
                acc = (1 - fw) * ((1 - fv) * ((1 - fu) * c000 + fu * c100)
                                  + fv * ((1 - fu) * c010 + fu * c110)) \
                    + fw * ((1 - fv) * ((1 - fu) * c001 + fu * c101)
                            + fv * ((1 - fu) * c011 + fu * c111))
                dst[iz, iy, ix] = <cnp.float32_t>acc
    return out


def resample3d_nearest_u8(const cnp.uint8_t[:, :, ::1] data,
                          const cnp.float64_t[:, ::1] M, const cnp.float64_t[::1] o,
                          Py_ssize_t nz, Py_ssize_t ny, Py_ssize_t nx):
    cdef Py_ssize_t snz = data.shape[0], sny = data.shape[1], snx = data.shape[2]
    out = np.zeros((nz, ny, nx), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] dst = out
    cdef Py_ssize_t iz, iy, ix, i, j, k
    cdef double u, v, w, ub, vb, wb
    for iz in range(nz):
        for iy in range(ny):
            ub = M[0, 1] * iy + M[0, 2] * iz + o[0]
            vb = M[1, 1] * iy + M[1, 2] * iz + o[1]
            wb = M[2, 1] * iy + M[2, 2] * iz + o[2]
            for ix in range(nx):
                u = M[0, 0] * ix + ub
                v = M[1, 0] * ix + vb
                w = M[2, 0] * ix + wb
                i = _round_idx(u)
                j = _round_idx(v)
                k = _round_idx(w)
                if 0 <= i < snx and 0 <= j < sny and 0 <= k < snz:
                    dst[iz, iy, ix] = data[k, j, i]
    return out


def resample3d_nearest_f32(const cnp.float32_t[:, :, ::1] data,
                           const cnp.float64_t[:, ::1] M, const cnp.float64_t[::1] o,
                           Py_ssize_t nz, Py_ssize_t ny, Py_ssize_t nx):
    cdef Py_ssize_t snz = data.shape[0], sny = data.shape[1], snx = data.shape[2]
    out = np.zeros((nz, ny, nx), dtype=np.float32)
    cdef cnp.float32_t[:, :, ::1] dst = out
    cdef Py_ssize_t iz, iy, ix, i, j, k
    cdef double u, v, w, ub, vb, wb
    for iz in range(nz):
        for iy in range(ny):
            ub = M[0, 1] * iy + M[0, 2] * iz + o[0]
            vb = M[1, 1] * iy + M[1, 2] * iz + o[1]
            wb = M[2, 1] * iy + M[2, 2] * iz + o[2]
            for ix in range(nx):
                u = M[0, 0] * ix + ub
                v = M[1, 0] * ix + vb
                w = M[2, 0] * ix + wb
                i = _round_idx(u)
                j = _round_idx(v)
                k = _round_idx(w)
                if 0 <= i < snx and 0 <= j < sny and 0 <= k < snz:
                    dst[iz, iy, ix] = data[k, j, i]
    return out
