"""Volumetric data types, rigid transforms, resampling, and .vol/.lbl file I/O.

Conventions used throughout the package:

* voxel (ix, iy, iz) has its center at world point (ix*sx, iy*sy, iz*sz) mm,
* arrays are stored as numpy ``(nz, ny, nx)`` so the flat buffer is x-fastest,
* rigid rotations compose as Rz @ Ry @ Rx about a stated center point in mm.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from segforge._kernels import resample3d_nearest, resample3d_trilinear

LABEL_NAMES = {
    1: "WM",
    2: "GM",
    3: "eCSF",
    4: "ventricles",
    5: "cerebellum",
    6: "deep_GM",
    7: "brainstem",
}
NUM_CLASSES = 8  # background + the 7 tissue classes

_MAGIC = b"VOL1"
_HEADER = struct.Struct("<4sH3I3fB3x")  # magic, dtype, dims, spacing, reserved, pad
_DTYPE_IMAGE = 0
_DTYPE_LABELS = 1


class GridError(ValueError):
    """Invalid volume/label construction or mismatched grids."""


class VolumeFormatError(ValueError):
    """Malformed .vol/.lbl file."""


def _check_grid(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise GridError(f"dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or any(not (s > 0) for s in spacing):
        raise GridError(f"spacing must be three positive reals, got {spacing}")
    return dims, spacing


class Volume:
    """3D scalar image; ``data`` is float32 shaped (nz, ny, nx), read-only."""

    __slots__ = ("dims", "spacing", "data")

    def __init__(self, data: np.ndarray, spacing=(0.5, 0.5, 0.5)):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 3:
            raise GridError(f"volume data must be 3D, got ndim={arr.ndim}")
        dims = (arr.shape[2], arr.shape[1], arr.shape[0])  # (nx, ny, nz)
        self.dims, self.spacing = _check_grid(dims, spacing)
        if not np.all(np.isfinite(arr)):
            raise GridError("volume data contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr

    @property
    def grid(self):
        return (self.dims, self.spacing)

    def world_center(self):
        """Center of the grid box in mm (rotation center default)."""
        return tuple((d - 1) / 2.0 * s for d, s in zip(self.dims, self.spacing))

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.grid == other.grid
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing})"


class LabelMap:
    """3D discrete segmentation; values in {0..7}, uint8 shaped (nz, ny, nx)."""

    __slots__ = ("dims", "spacing", "data")

    def __init__(self, data: np.ndarray, spacing=(0.5, 0.5, 0.5)):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise GridError(f"label data must be 3D, got ndim={arr.ndim}")
        if arr.dtype != np.uint8:
            if not np.array_equal(arr, arr.astype(np.uint8)):
                raise GridError("label data does not fit uint8 without change")
            arr = arr.astype(np.uint8)
        if arr.size and arr.max() >= NUM_CLASSES:
            raise GridError(
                f"label values must lie in 0..{NUM_CLASSES - 1}, got max {arr.max()}"
            )
        dims = (arr.shape[2], arr.shape[1], arr.shape[0])
        self.dims, self.spacing = _check_grid(dims, spacing)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr

    @property
    def grid(self):
        return (self.dims, self.spacing)

    def world_center(self):
        return tuple((d - 1) / 2.0 * s for d, s in zip(self.dims, self.spacing))

    def __eq__(self, other):
        return (
            isinstance(other, LabelMap)
            and self.grid == other.grid
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"LabelMap(dims={self.dims}, spacing={self.spacing})"


def same_grid(a, b) -> bool:
    return a.grid == b.grid


@dataclass(frozen=True)
class RigidTransform:
    """6-DOF rigid map p -> R (p - c) + c + t with R = Rz(rz) Ry(ry) Rx(rx).

    Angles are radians, translation and center are mm. Used as a pull-back
    in :func:`resample`: the transform maps target-grid world points into
    source-volume world points.
    """

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("rotation", "translation", "center"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or not all(math.isfinite(x) for x in v):
                raise GridError(f"{name} must be three finite reals, got {v}")
            object.__setattr__(self, name, v)

    @staticmethod
    def identity(center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(center=center)

    def rotation_matrix(self) -> np.ndarray:
        rx, ry, rz = self.rotation
        cx, sx = math.cos(rx), math.sin(rx)
        cy, sy = math.cos(ry), math.sin(ry)
        cz, sz = math.cos(rz), math.sin(rz)
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return Rz @ Ry @ Rx

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 world-to-world matrix."""
        R = self.rotation_matrix()
        c = np.asarray(self.center)
        t = np.asarray(self.translation)
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = c + t - R @ c
        return m

    @staticmethod
    def from_matrix(m: np.ndarray, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Recover (rotation, translation) from a rigid 4x4, about ``center``."""
        R = np.asarray(m, dtype=float)[:3, :3]
        if abs(np.linalg.det(R) - 1.0) > 1e-4 or np.abs(R @ R.T - np.eye(3)).max() > 1e-4:
            raise GridError("matrix is not a proper rotation")
        sy = -R[2, 0]
        sy = min(1.0, max(-1.0, sy))
        ry = math.asin(sy)
        if abs(abs(sy) - 1.0) < 1e-9:  # gimbal lock: fold rx into rz
            rx = 0.0
            rz = math.atan2(-R[0, 1], R[1, 1])
        else:
            rx = math.atan2(R[2, 1], R[2, 2])
            rz = math.atan2(R[1, 0], R[0, 0])
        c = np.asarray(center, dtype=float)
        t = np.asarray(m, dtype=float)[:3, 3] - c + R @ c
        return RigidTransform(rotation=(rx, ry, rz), translation=tuple(t), center=tuple(c))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map world points, shape (..., 3) mm."""
        p = np.asarray(points, dtype=float)
        R = self.rotation_matrix()
        c = np.asarray(self.center)
        t = np.asarray(self.translation)
        return (p - c) @ R.T + c + t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self after other: (self.compose(other))(p) == self(other(p))."""
        return RigidTransform.from_matrix(self.matrix() @ other.matrix(), center=self.center)

    def invert(self) -> "RigidTransform":
        return RigidTransform.from_matrix(np.linalg.inv(self.matrix()), center=self.center)

    def to_json_dict(self) -> dict:
        return {
            "rotation": list(self.rotation),
            "translation": list(self.translation),
            "center": list(self.center),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RigidTransform":
        return RigidTransform(
            rotation=tuple(d["rotation"]),
            translation=tuple(d["translation"]),
            center=tuple(d["center"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "RigidTransform":
        with open(path, "r", encoding="utf-8") as fh:
            return RigidTransform.from_json_dict(json.load(fh))


def _index_map(t: RigidTransform, source_spacing, target_spacing):
    """Index-space affine u = M @ idx + o equivalent to the world pull-back."""
    R = t.rotation_matrix()
    c = np.asarray(t.center)
    tr = np.asarray(t.translation)
    s_in = np.asarray(source_spacing, dtype=float)
    s_out = np.asarray(target_spacing, dtype=float)
    M = (R * s_out[None, :]) / s_in[:, None]
    o = (c + tr - R @ c) / s_in
    return np.ascontiguousarray(M), np.ascontiguousarray(o)


def resample(vol, t: RigidTransform, target_grid=None, interp="trilinear"):
    """Resample a Volume or LabelMap onto ``target_grid`` pulled back through ``t``.

    Output voxel x takes the value of the input at world point t(x);
    out-of-bounds samples are 0 (background). Labels require ``interp='nearest'``.
    """
    is_labels = isinstance(vol, LabelMap)
    if interp not in ("trilinear", "nearest"):
        raise GridError(f"unknown interpolation {interp!r}")
    if is_labels and interp == "trilinear":
        raise GridError("trilinear interpolation on a LabelMap would invent labels; use nearest")
    if target_grid is None:
        target_grid = vol.grid
    elif hasattr(target_grid, "grid"):
        target_grid = target_grid.grid
    dims, spacing = _check_grid(*target_grid)
    M, o = _index_map(t, vol.spacing, spacing)
    out_shape = (dims[2], dims[1], dims[0])
    if interp == "nearest":
        out = resample3d_nearest(vol.data, M, o, out_shape)
        return LabelMap(out, spacing) if is_labels else Volume(out, spacing)
    out = resample3d_trilinear(vol.data, M, o, out_shape)
    return Volume(out, spacing)


def read_volume(path):
    """Read a .vol/.lbl file; returns Volume or LabelMap per the dtype code."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, dtype_code, nx, ny, nz, sx, sy, sz, reserved = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if dtype_code not in (_DTYPE_IMAGE, _DTYPE_LABELS):
        raise VolumeFormatError(f"{path}: unknown dtype code {dtype_code}")
    count = nx * ny * nz
    itemsize = 4 if dtype_code == _DTYPE_IMAGE else 1
    expected = _HEADER.size + count * itemsize
    if len(raw) < expected:
        raise VolumeFormatError(
            f"{path}: truncated payload ({len(raw)} bytes, expected {expected})"
        )
    if len(raw) > expected:
        raise VolumeFormatError(
            f"{path}: trailing bytes ({len(raw)} bytes, expected {expected})"
        )
    payload = raw[_HEADER.size:]
    if dtype_code == _DTYPE_IMAGE:
        arr = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
        return Volume(arr, (sx, sy, sz))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(nz, ny, nx)
    return LabelMap(arr, (sx, sy, sz))


def write_volume(path, vol) -> None:
    """Write a Volume (.vol) or LabelMap (.lbl); round-trips bit-exactly."""
    if isinstance(vol, Volume):
        dtype_code = _DTYPE_IMAGE
        payload = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    elif isinstance(vol, LabelMap):
        dtype_code = _DTYPE_LABELS
        payload = vol.data.tobytes()
    else:
        raise GridError(f"cannot write object of type {type(vol).__name__}")
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    header = _HEADER.pack(_MAGIC, dtype_code, nx, ny, nz, sx, sy, sz, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
