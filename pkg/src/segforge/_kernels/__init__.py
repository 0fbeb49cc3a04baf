"""Kernel backend selection.

The compiled Cython core is used when it was built and the dtype is float32
(or uint8 for nearest-neighbor resampling); everything else runs on the numpy
fallback. Set ``SEGFORGE_NO_EXT=1`` to force the fallback, e.g. to compare
lanes (see benchmarks/bench_kernels.py).
"""
from __future__ import annotations

import os

import numpy as np

from segforge._kernels import _numpy

if os.environ.get("SEGFORGE_NO_EXT", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from segforge._kernels import _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def im2col(x, k, pad, stride):
    if _compiled is not None and x.dtype == np.float32 and x.flags.c_contiguous:
        return _compiled.im2col_f32(x, k, pad, stride)
    return _numpy.im2col(x, k, pad, stride)


def col2im(dcol, x_shape, k, pad, stride):
    if _compiled is not None and dcol.dtype == np.float32 and dcol.flags.c_contiguous:
        return _compiled.col2im_f32(dcol, x_shape[0], x_shape[1], x_shape[2], x_shape[3], k, pad, stride)
    return _numpy.col2im(dcol, x_shape, k, pad, stride)


def resample3d_trilinear(data, M, o, out_shape):
    M = np.ascontiguousarray(M, dtype=np.float64)
    o = np.ascontiguousarray(o, dtype=np.float64)
    if _compiled is not None and data.dtype == np.float32:
        return _compiled.resample3d_trilinear_f32(
            np.ascontiguousarray(data), M, o, out_shape[0], out_shape[1], out_shape[2]
        )
    return _numpy.resample3d_trilinear(data, M, o, out_shape)


def resample3d_nearest(data, M, o, out_shape):
    M = np.ascontiguousarray(M, dtype=np.float64)
    o = np.ascontiguousarray(o, dtype=np.float64)
    if _compiled is not None and data.dtype == np.uint8:
        return _compiled.resample3d_nearest_u8(
            np.ascontiguousarray(data), M, o, out_shape[0], out_shape[1], out_shape[2]
        )
    if _compiled is not None and data.dtype == np.float32:
        return _compiled.resample3d_nearest_f32(
            np.ascontiguousarray(data), M, o, out_shape[0], out_shape[1], out_shape[2]
        )
    return _numpy.resample3d_nearest(data, M, o, out_shape)
