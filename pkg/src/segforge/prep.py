"""Intensity standardization, augmentation, and axial slice extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from segforge.grid import GridError, LabelMap, Volume, same_grid


class PrepError(ValueError):
    """Invalid preprocessing input."""


@dataclass(frozen=True)
class AugmentParams:
    flip_probability: float = 0.5  # per axis
    rotation_range: tuple[float, float] = (0.0, 360.0)  # degrees
    noise_sigma: float = 0.05  # fraction of slice standard deviation
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.flip_probability <= 1.0):
            raise PrepError(f"flip probability must lie in [0, 1], got {self.flip_probability}")
        lo, hi = self.rotation_range
        if hi < lo:
            raise PrepError(f"rotation range must be ordered, got {self.rotation_range}")
        if self.noise_sigma < 0:
            raise PrepError("noise sigma must be >= 0")


def _masked_cdf(data: np.ndarray, bins: int):
    """Bin centers and the midpoint empirical CDF of the nonzero voxels."""
    values = data[data != 0].astype(np.float64)
    if values.size < 2 or values.min() == values.max():
        return None
    lo, hi = float(values.min()), float(values.max())
    h = (hi - lo) / (bins - 1)
    centers = lo + h * np.arange(bins)
    idx = np.clip(np.floor((values - lo) / h + 0.5).astype(np.int64), 0, bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    cum = np.cumsum(hist)
    # CDF evaluated at each bin center: mass strictly below plus half the bin.
    cdf = (cum - 0.5 * hist) / values.size
    return centers, cdf


def reference_cdf(ref: Volume, bins: int = 256):
    """(bin centers, CDF) of the reference; storable, e.g. inside a checkpoint."""
    if bins < 2:
        raise PrepError(f"bins must be >= 2, got {bins}")
    pair = _masked_cdf(ref.data, bins)
    if pair is None:
        raise PrepError("histogram reference needs non-constant nonzero voxels")
    return pair

def histogram_match_cdf(src: Volume, centers, cdf) -> Volume:
    """Monotone remap of src's nonzero intensities onto a stored reference CDF.

    Each nonzero src value is sent through src's empirical CDF and back
    through the inverse of the reference's, both piecewise linear between bin
    centers. Background zeros stay zero.
    """
    r_centers = np.asarray(centers, dtype=np.float64)
    r_cdf = np.asarray(cdf, dtype=np.float64)
    if r_centers.ndim != 1 or r_centers.shape != r_cdf.shape or r_centers.size < 2:
        raise PrepError("reference centers and cdf must be matching 1D arrays")
    src_cdf = _masked_cdf(src.data, r_centers.size)
    if src_cdf is None:
        raise PrepError("histogram matching needs non-constant nonzero voxels in the source")
    s_centers, s_cdf = src_cdf
    out = np.zeros_like(src.data)
    mask = src.data != 0
    quantiles = np.interp(src.data[mask].astype(np.float64), s_centers, s_cdf)
    out[mask] = np.interp(quantiles, r_cdf, r_centers).astype(np.float32)
    return Volume(out, src.spacing)

def histogram_match(src: Volume, ref: Volume, bins: int = 256) -> Volume:
    """Monotone remap of src's nonzero intensities onto ref's distribution."""
    centers, cdf = reference_cdf(ref, bins)
    return histogram_match_cdf(src, centers, cdf)


def normalize(v: Volume) -> Volume:
    """Z-score over the nonzero voxels; background stays 0."""
    mask = v.data != 0
    values = v.data[mask].astype(np.float64)
    if values.size < 2:
        raise PrepError("normalize needs >= 2 nonzero voxels")
    std = values.std()
    if std == 0.0:
        raise PrepError("normalize undefined: zero variance over the nonzero mask")
    out = np.zeros_like(v.data)
    out[mask] = ((values - values.mean()) / std).astype(np.float32)
    return Volume(out, v.spacing)


def extract_axial_slices(v: Volume, l: LabelMap):
    """All (image, label, z) axial slices whose label plane is non-empty."""
    if not same_grid(v, l):
        raise GridError("volume and labels must share a grid")
    out = []
    for z in range(v.data.shape[0]):
        lab = l.data[z]
        if lab.any():
            out.append((v.data[z], lab, z))
    return out


def _snap(v: float) -> float:
    # cos/sin of cardinal angles land within float rounding of an integer;
    # left unsnapped, the residual maps edge pixels to coordinates like -1e-15,
    # which affine_transform fills with cval instead of sampling index 0.
    r = round(v)
    return float(r) if abs(v - r) < 1e-12 else float(v)


def augment(image: np.ndarray, label: np.ndarray, p: AugmentParams, draw_index: int):
    """One seeded augmentation draw: shared flips + rotation, noise on image only.

    The spatial transform (flip decisions and one rotation angle) is applied
    identically to image (bilinear) and label (nearest); pixels rotated out of
    the frame become 0. Deterministic function of (p.seed, draw_index).
    """
    if image.shape != label.shape:
        raise PrepError(f"image and label shapes differ: {image.shape} vs {label.shape}")
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise PrepError(f"augment needs square 2D slices, got {image.shape}")
    rng = np.random.default_rng((p.seed, draw_index))
    flip0 = rng.random() < p.flip_probability
    flip1 = rng.random() < p.flip_probability
    lo, hi = p.rotation_range
    angle = rng.uniform(lo, hi)

    img = np.asarray(image, dtype=np.float32)
    lab = np.asarray(label, dtype=np.uint8)
    if flip0:
        img = img[::-1, :]
        lab = lab[::-1, :]
    if flip1:
        img = img[:, ::-1]
        lab = lab[:, ::-1]
    if angle != 0.0:
        # Pull-back rotation about the slice center ((n-1)/2, (n-1)/2).
        rad = np.deg2rad(angle)
        c, s = _snap(np.cos(rad)), _snap(np.sin(rad))
        matrix = np.array([[c, -s], [s, c]])
        center = (np.asarray(img.shape, dtype=np.float64) - 1.0) / 2.0
        offset = center - matrix @ center
        img = affine_transform(img, matrix, offset=offset, order=1, cval=0.0, prefilter=False)
        lab = affine_transform(lab, matrix, offset=offset, order=0, cval=0, prefilter=False)
    else:
        img = np.ascontiguousarray(img)
        lab = np.ascontiguousarray(lab)

    if p.noise_sigma > 0:
        sigma = p.noise_sigma * float(img.std())
        if sigma > 0:
            img = img + rng.standard_normal(img.shape, dtype=np.float32) * np.float32(sigma)
    return img, lab
