"""Training losses (generalized Dice, MAE) and label-space evaluation metrics.

The losses attach to an autodiff graph as single nodes with analytic backward
rules; reductions run in float64 regardless of tensor dtype so the scalar is
stable. The evaluation metrics (per-class Dice, 95th-percentile Hausdorff
distance) operate on LabelMaps by voxel counting and are pure functions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from segforge.autodiff import AutodiffError, Graph, Tensor
from segforge.grid import LABEL_NAMES, GridError, LabelMap, same_grid

GDL_EPS = 1e-5


class MetricError(ValueError):
    """Invalid metric inputs."""


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) one-hot planes."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise MetricError(
            f"labels outside [0, {num_classes - 1}]: found {labels.min()}..{labels.max()}")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1, axis=1)
    return out


def _check_loss_inputs(probs: Tensor, onehot: np.ndarray) -> np.ndarray:
    if not isinstance(probs, Tensor):
        raise AutodiffError("probs must be a Tensor")
    onehot = np.asarray(onehot)
    if probs.data.ndim != 4:
        raise AutodiffError(f"probs must be (N, C, H, W), got shape {probs.data.shape}")
    if onehot.shape != probs.data.shape:
        raise AutodiffError(
            f"shape mismatch: probs {probs.data.shape} vs onehot {tuple(onehot.shape)}")
    return onehot.astype(np.float64, copy=False)


def gdl(g: Graph, probs: Tensor, onehot: np.ndarray) -> Tensor:
    """Generalized Dice loss with per-batch class weights w_l = 1/(sum_n r_ln + eps)^2.

    loss = 1 - 2 * (sum_l w_l sum_n p*r) / (sum_l w_l sum_n (p + r)).
    """
    r = _check_loss_inputs(probs, onehot)
    p = probs.data.astype(np.float64, copy=False)
    class_truth = r.sum(axis=(0, 2, 3))
    w = 1.0 / (class_truth + GDL_EPS) ** 2
    num = float((w * (p * r).sum(axis=(0, 2, 3))).sum())
    den = float((w * (p + r).sum(axis=(0, 2, 3))).sum())
    loss = 1.0 - 2.0 * num / den
    out = Tensor(np.asarray(loss), dtype=probs.data.dtype)

    def backward_fn(dout):
        # d loss / d p = -2 w_l (r * den - num) / den^2, broadcast over pixels
        wl = w[None, :, None, None]
        dp = -2.0 * wl * (r * den - num) / (den * den)
        return ((float(dout.reshape(())) * dp).astype(probs.data.dtype),)

    return g.record(out, (probs,), backward_fn)


def mae(g: Graph, probs: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean absolute error over all pixels and classes."""
    r = _check_loss_inputs(probs, onehot)
    p = probs.data.astype(np.float64, copy=False)
    diff = p - r
    loss = float(np.abs(diff).mean())
    out = Tensor(np.asarray(loss), dtype=probs.data.dtype)

    def backward_fn(dout):
        dp = np.sign(diff) / diff.size
        return ((float(dout.reshape(())) * dp).astype(probs.data.dtype),)

    return g.record(out, (probs,), backward_fn)


def _class_masks(pred: LabelMap, truth: LabelMap, c: int):
    if not isinstance(pred, LabelMap) or not isinstance(truth, LabelMap):
        raise MetricError("pred and truth must be LabelMaps")
    if not same_grid(pred, truth):
        raise GridError(f"grid mismatch: {pred.grid} vs {truth.grid}")
    if not (0 <= int(c) <= 255):
        raise MetricError(f"class id out of range: {c}")
    return pred.data == c, truth.data == c


def dice_per_class(pred: LabelMap, truth: LabelMap, c: int):
    """2|P&T| / (|P|+|T|); None (undefined) iff the class is empty in both."""
    p, t = _class_masks(pred, truth, c)
    sp = int(np.count_nonzero(p))
    st = int(np.count_nonzero(t))
    if sp + st == 0:
        return None
    inter = int(np.count_nonzero(p & t))
    return 2.0 * inter / (sp + st)


def border_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one of 6 neighbors outside the mask or volume."""
    exposed = np.zeros(mask.shape, dtype=bool)
    for axis in range(3):
        lead = [slice(None)] * 3
        trail = [slice(None)] * 3
        lead[axis] = slice(1, None)
        trail[axis] = slice(None, -1)
        lead, trail = tuple(lead), tuple(trail)
        # neighbor in +axis direction missing, or voxel on the volume face
        plus = np.ones(mask.shape, dtype=bool)
        plus[trail] = ~mask[lead]
        minus = np.ones(mask.shape, dtype=bool)
        minus[lead] = ~mask[trail]
        exposed |= plus | minus
    return mask & exposed


def _nearest_rank_95(sorted_values: np.ndarray) -> float:
    n = sorted_values.size
    # ceil(0.95 n) in exact integer arithmetic; float ceil(0.95*n) is off by
    # one whenever n is a multiple of 20 because 0.95 rounds up in binary.
    idx = (19 * n + 19) // 20
    return float(sorted_values[idx - 1])


def _directed_95(src_mm: np.ndarray, dst_mm: np.ndarray, chunk: int = 256) -> float:
    mins = np.empty(src_mm.shape[0], dtype=np.float64)
    for start in range(0, src_mm.shape[0], chunk):
        block = src_mm[start:start + chunk]
        delta = block[:, None, :] - dst_mm[None, :, :]
        d2 = (delta * delta).sum(axis=2)
        mins[start:start + block.shape[0]] = d2.min(axis=1)
    return _nearest_rank_95(np.sort(np.sqrt(mins)))


def hd95(pred: LabelMap, truth: LabelMap, c: int):
    """95th-percentile symmetric Hausdorff distance between class borders, in mm.

    Directed distances run between border-voxel centers; each direction takes
    the nearest-rank 95th percentile and the result is the max of the two.
    None (undefined) when the class is empty on either side.
    """
    p, t = _class_masks(pred, truth, c)
    if not p.any() or not t.any():
        return None
    sx, sy, sz = pred.spacing
    scale = np.array([sz, sy, sx], dtype=np.float64)  # argwhere yields (z, y, x)
    p_mm = np.argwhere(border_voxels(p)) * scale
    t_mm = np.argwhere(border_voxels(t)) * scale
    return max(_directed_95(p_mm, t_mm), _directed_95(t_mm, p_mm))


@dataclass(frozen=True)
class EvalRow:
    class_id: int
    class_name: str
    dice: float | None
    hd95_mm: float | None


@dataclass(frozen=True)
class EvalReport:
    """Per-class Dice and HD95 for tissue classes 1..7 plus defined-entry means."""
    rows: tuple
    mean_dice: float | None
    mean_hd95_mm: float | None


def evaluate(pred: LabelMap, truth: LabelMap) -> EvalReport:
    """Dice + HD95 for classes 1..7; background excluded; means skip undefined."""
    rows = []
    for c in sorted(LABEL_NAMES):
        rows.append(EvalRow(c, LABEL_NAMES[c],
                            dice_per_class(pred, truth, c), hd95(pred, truth, c)))
    dices = [r.dice for r in rows if r.dice is not None]
    hds = [r.hd95_mm for r in rows if r.hd95_mm is not None]
    return EvalReport(
        rows=tuple(rows),
        mean_dice=sum(dices) / len(dices) if dices else None,
        mean_hd95_mm=sum(hds) / len(hds) if hds else None,
    )


REPORT_HEADER = ("volume_id", "class_id", "class_name", "dice", "hd95_mm")


def _field(value) -> str:
    return "" if value is None else f"{value:.6f}"


def write_report_csv(path, reports) -> None:
    """Write rows for (volume_id, EvalReport) pairs; undefined = empty field."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for volume_id, report in reports:
            for row in report.rows:
                writer.writerow([volume_id, row.class_id, row.class_name,
                                 _field(row.dice), _field(row.hd95_mm)])
