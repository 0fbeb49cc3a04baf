"""6-DOF rigid registration by coordinate descent over NCC, plus rigid
atlas label propagation.

The optimizer is derivative-free on purpose: NCC under trilinear resampling
has noisy gradients, and a Powell-style parameter sweep with step halving is
robust at this scale. A Gaussian-smoothed multi-resolution pyramid supplies
capture range; each level warm-starts the next.

The internal metric differs from the plain :func:`ncc` in two ways that keep
the optimum at true alignment for degraded inputs: both images are smoothed
by at least one voxel (otherwise fractional shifts look better than zero
because interpolation smooths the moving image's noise), and the fixed brain
mask is eroded (the sharp-versus-blurred rim otherwise dominates and biases
the peak).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

from segforge.grid import GridError, LabelMap, RigidTransform, Volume, resample, same_grid


class RegistrationError(ValueError):
    """Invalid registration inputs."""


class ZeroVarianceError(RegistrationError):
    """NCC undefined: one of the inputs is constant over the mask."""


class RegistrationFailure(RuntimeError):
    """Optimization ended worse than the identity transform."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class RegistrationOptions:
    pyramid_factors: tuple[int, ...] = (4, 2, 1)
    max_iterations: int = 100
    initial_step_vox: float = 1.0
    initial_step_deg: float = 2.0
    shrink: float = 0.5
    min_step_vox: float = 0.01
    min_step_deg: float = 0.1
    mask_erosion_vox: int = 2

    def __post_init__(self):
        f = tuple(int(x) for x in self.pyramid_factors)
        object.__setattr__(self, "pyramid_factors", f)
        if not f or f[-1] != 1 or any(a <= b for a, b in zip(f, f[1:])):
            raise RegistrationError(
                f"pyramid factors must be strictly decreasing and end at 1, got {f}"
            )
        if self.max_iterations < 0:
            raise RegistrationError("max_iterations must be >= 0")
        if not (0 < self.shrink < 1):
            raise RegistrationError("shrink factor must lie in (0, 1)")
        if self.mask_erosion_vox < 0:
            raise RegistrationError("mask_erosion_vox must be >= 0")


class RegistrationResult(NamedTuple):
    transform: RigidTransform
    ncc: float
    identity_ncc: float


def ncc(a: Volume, b: Volume, mask: Optional[np.ndarray] = None) -> float:
    """Pearson correlation of voxel pairs over ``mask`` (default: everywhere)."""
    if not same_grid(a, b):
        raise RegistrationError("ncc requires volumes on the same grid")
    if mask is None:
        x = a.data.ravel()
        y = b.data.ravel()
    else:
        x = a.data[mask]
        y = b.data[mask]
    if x.size < 2:
        raise RegistrationError(f"ncc needs >= 2 voxels in the mask, got {x.size}")
    v = _pearson(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    if v is None:
        raise ZeroVarianceError("ncc undefined: zero variance over the mask")
    return v


def _pearson(x: np.ndarray, y: np.ndarray):
    xm = x - x.mean()
    ym = y - y.mean()
    denom = math.sqrt(float(xm @ xm) * float(ym @ ym))
    if denom == 0.0:
        return None
    return float(xm @ ym) / denom


class _Level:
    """One pyramid level: smoothed volumes plus the decimated metric mask."""

    def __init__(self, moving: Volume, fixed: Volume, mask: np.ndarray, factor: int):
        sigma = max(0.5 * factor, 1.0)
        step = slice(None, None, factor)
        self.moving = Volume(
            gaussian_filter(moving.data, sigma)[step, step, step],
            tuple(s * factor for s in moving.spacing),
        )
        self.fixed = Volume(
            gaussian_filter(fixed.data, sigma)[step, step, step],
            tuple(s * factor for s in fixed.spacing),
        )
        self.mask = np.ascontiguousarray(mask[step, step, step])
        self.fixed_vals = self.fixed.data[self.mask].astype(np.float64)

    def metric(self, params: np.ndarray, center) -> float:
        """Masked NCC of fixed against moving pulled through ``params``."""
        t = RigidTransform(
            rotation=tuple(params[:3]), translation=tuple(params[3:]), center=center
        )
        warped = resample(self.moving, t, self.fixed.grid, interp="trilinear")
        y = warped.data[self.mask].astype(np.float64)
        if y.size < 2:
            return float("-inf")
        v = _pearson(self.fixed_vals, y)
        return float("-inf") if v is None else v


def register_rigid(
    moving: Volume,
    fixed: Volume,
    opts: Optional[RegistrationOptions] = None,
    initial: Optional[RigidTransform] = None,
) -> RegistrationResult:
    """Find the rigid transform maximizing NCC(fixed, resample(moving, T)).

    The transform is a pull-back: it maps fixed-grid world points into the
    moving volume. Search is coordinate descent over (rx, ry, rz, tx, ty, tz),
    one parameter at a time with step halving, coarse-to-fine over the pyramid.
    """
    if opts is None:
        opts = RegistrationOptions()
    if float(moving.data.std()) == 0.0 or float(fixed.data.std()) == 0.0:
        raise ZeroVarianceError("registration requires non-constant volumes")
    center = fixed.world_center()
    mean_spacing = sum(fixed.spacing) / 3.0

    mask = fixed.data > 0
    if opts.mask_erosion_vox > 0:
        eroded = binary_erosion(mask, iterations=opts.mask_erosion_vox)
        if eroded.sum() >= 2:
            mask = eroded

    if initial is None:
        params = np.zeros(6)
    else:
        params = np.array(list(initial.rotation) + list(initial.translation), dtype=float)

    finest = _Level(moving, fixed, mask, 1)
    identity_ncc = finest.metric(np.zeros(6), center)

    for factor in opts.pyramid_factors:
        level = finest if factor == 1 else _Level(moving, fixed, mask, factor)
        level_best = level.metric(params, center)
        # Warm starts can be worse than the default start at a finer level;
        # keep whichever wins so the default path never regresses.
        if initial is None and np.any(params != 0.0):
            at_zero = level.metric(np.zeros(6), center)
            if at_zero > level_best:
                params = np.zeros(6)
                level_best = at_zero
        t_step = opts.initial_step_vox * factor * mean_spacing
        r_step = math.radians(opts.initial_step_deg) * factor
        t_floor = opts.min_step_vox * mean_spacing
        r_floor = math.radians(opts.min_step_deg)
        for _ in range(opts.max_iterations):
            improved = False
            for i in range(6):
                step = r_step if i < 3 else t_step
                for sign in (1.0, -1.0):
                    cand = params.copy()
                    cand[i] += sign * step
                    value = level.metric(cand, center)
                    if value > level_best:
                        params = cand
                        level_best = value
                        improved = True
                        break
            if not improved:
                if t_step <= t_floor and r_step <= r_floor:
                    break
                t_step *= opts.shrink
                r_step *= opts.shrink

    final = finest.metric(params, center)
    transform = RigidTransform(
        rotation=tuple(params[:3]), translation=tuple(params[3:]), center=center
    )
    return RegistrationResult(transform=transform, ncc=final, identity_ncc=identity_ncc)


def propagate_labels(
    atlas_vol: Volume,
    atlas_labels: LabelMap,
    target: Volume,
    opts: Optional[RegistrationOptions] = None,
) -> LabelMap:
    """Label the target by rigid registration of an already-labeled volume."""
    if not same_grid(atlas_vol, atlas_labels):
        raise GridError("atlas volume and labels must share a grid")
    result = register_rigid(moving=atlas_vol, fixed=target, opts=opts)
    return resample(atlas_labels, result.transform, target.grid, interp="nearest")
