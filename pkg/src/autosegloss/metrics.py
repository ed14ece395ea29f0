"""Exact segmentation metrics on discrete label masks.

All scores are dataset-level: per-class counts are summed over every image
before any ratio is taken.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DomainError

BD_KERNEL = 3
DEFAULT_TOLERANCE_PX = 2


class MetricName(str, Enum):
    GACC = "gacc"
    MACC = "macc"
    MIOU = "miou"
    FWIOU = "fwiou"
    BIOU = "biou"
    BF1 = "bf1"

    @property
    def is_boundary(self) -> bool:
        return self in (MetricName.BIOU, MetricName.BF1)


ALL_METRICS = tuple(MetricName)


@dataclass(frozen=True)
class MetricId:
    name: MetricName
    boundary_tolerance_px: int = 0

    def __post_init__(self):
        object.__setattr__(self, "name", MetricName(self.name))
        tol = self.boundary_tolerance_px
        if not isinstance(tol, (int, np.integer)) or tol < 0:
            raise ConfigError(f"boundary tolerance must be a non-negative integer, got {tol!r}")
        if not self.name.is_boundary and tol != 0:
            raise ConfigError(f"{self.name.value} takes no boundary tolerance")

    @classmethod
    def of(cls, name, tolerance_px: int | None = None) -> "MetricId":
        """Build a metric id, defaulting the tolerance for boundary metrics."""
        name = MetricName(str(name).lower())
        if tolerance_px is None:
            tolerance_px = DEFAULT_TOLERANCE_PX if name.is_boundary else 0
        elif not name.is_boundary:
            tolerance_px = 0
        return cls(name, int(tolerance_px))

    @property
    def tolerance_kernel(self) -> int:
        return 2 * self.boundary_tolerance_px + 1

    def __str__(self):
        if self.name.is_boundary:
            return f"{self.name.value}@{self.boundary_tolerance_px}px"
        return self.name.value


@dataclass(frozen=True, eq=False)
class LabelMask:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise DomainError(f"label mask must be a non-empty 2-D array, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise DomainError(f"labels must be integers, got {labels.dtype}")
        if self.num_classes < 2:
            raise DomainError(f"num_classes must be >= 2, got {self.num_classes}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DomainError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)


def one_hot(mask: LabelMask, c: int) -> np.ndarray:
    if not 0 <= c < mask.num_classes:
        raise DomainError(f"class {c} out of range for {mask.num_classes} classes")
    return (mask.labels == c).astype(np.uint8)


def one_hot_stack(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(..., H, W) integer labels -> (..., H, W, C) indicator array."""
    return (labels[..., None] == np.arange(num_classes)).astype(dtype)


# -- pooling ---------------------------------------------------------------

def _check_kernel(kernel_px: int):
    if kernel_px < 1 or kernel_px % 2 == 0:
        raise ConfigError(f"pooling kernel must be odd and >= 1, got {kernel_px}")


def _windows(x: np.ndarray, kernel_px: int) -> np.ndarray:
    _check_kernel(kernel_px)
    r = kernel_px // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad, mode="edge")
    return sliding_window_view(xp, (kernel_px, kernel_px), axis=(-2, -1))


def min_pool(x: np.ndarray, kernel_px: int) -> np.ndarray:
    """Stride-1 min filter over the last two axes with replicate padding."""
    x = np.asarray(x)
    if kernel_px == 1:
        _check_kernel(kernel_px)
        return x.copy()
    return _windows(x, kernel_px).min(axis=(-2, -1))


def max_pool(x: np.ndarray, kernel_px: int) -> np.ndarray:
    """Stride-1 max filter over the last two axes with replicate padding."""
    x = np.asarray(x)
    if kernel_px == 1:
        _check_kernel(kernel_px)
        return x.copy()
    return _windows(x, kernel_px).max(axis=(-2, -1))


def pool_with_index(x: np.ndarray, kernel_px: int, mode: str):
    """Pool like min_pool/max_pool and also return, per output pixel, the flat
    (h*W + w) index of the selected input pixel. Used to route gradients."""
    x = np.asarray(x)
    H, W = x.shape[-2:]
    flat_idx = np.arange(H * W).reshape(H, W)
    if kernel_px == 1:
        _check_kernel(kernel_px)
        return x.copy(), np.broadcast_to(flat_idx, x.shape)
    win = _windows(x, kernel_px)
    win = win.reshape(win.shape[:-2] + (kernel_px * kernel_px,))
    pick = win.argmin(axis=-1) if mode == "min" else win.argmax(axis=-1)
    vals = np.take_along_axis(win, pick[..., None], axis=-1)[..., 0]
    iwin = _windows(flat_idx, kernel_px).reshape(H, W, kernel_px * kernel_px)
    iwin = np.broadcast_to(iwin, pick.shape + (kernel_px * kernel_px,))
    src = np.take_along_axis(iwin, pick[..., None], axis=-1)[..., 0]
    return vals, src


def scatter_to_source(grad_out: np.ndarray, src: np.ndarray) -> np.ndarray:
    """Adjoint of a pooling gather: accumulate grad_out onto the source pixels."""
    H, W = grad_out.shape[-2:]
    lead = grad_out.shape[:-2]
    B = int(np.prod(lead)) if lead else 1
    offs = (np.arange(B) * (H * W)).reshape(lead + (1, 1)) if lead else 0
    flat = np.bincount((src + offs).ravel(), weights=grad_out.ravel(), minlength=B * H * W)
    return flat.reshape(grad_out.shape)


def boundary_extract(plane: np.ndarray, kernel_px: int = BD_KERNEL) -> np.ndarray:
    """Binary boundary map: plane XOR min_pool(plane)."""
    plane = np.asarray(plane)
    if plane.size and not np.all((plane == 0) | (plane == 1)):
        raise DomainError("boundary_extract expects a binary {0,1} plane")
    b = plane.astype(bool)
    return (b ^ min_pool(b, kernel_px)).astype(np.uint8)


def boundary_region(gt_labels: np.ndarray, num_classes: int, tolerance_px: int = 0) -> np.ndarray:
    """Pixels lying on the boundary of any ground-truth class, dilated by the tolerance."""
    planes = np.moveaxis(one_hot_stack(gt_labels, num_classes, dtype=bool), -1, -3)
    bd = planes ^ min_pool(planes, BD_KERNEL)
    region = bd.any(axis=-3)
    return max_pool(region, 2 * tolerance_px + 1)


# -- metric evaluation -------------------------------------------------------

def eval_metric(metric, preds: Sequence[LabelMask], gts: Sequence[LabelMask]) -> float:
    """Dataset-level score of ``metric`` for aligned prediction/ground-truth masks."""
    if not isinstance(metric, MetricId):
        metric = MetricId.of(metric)
    preds, gts = list(preds), list(gts)
    if not preds or not gts:
        raise DomainError("eval_metric needs at least one image")
    if len(preds) != len(gts):
        raise DomainError(f"{len(preds)} predictions for {len(gts)} ground truths")
    C = gts[0].num_classes
    for p, g in zip(preds, gts):
        if p.labels.shape != g.labels.shape:
            raise DomainError(f"shape mismatch {p.labels.shape} vs {g.labels.shape}")
        if p.num_classes != C or g.num_classes != C:
            raise DomainError("num_classes differs across masks")
    counts = None
    for p, g in zip(preds, gts):
        c = confusion_counts(metric, p.labels[None], g.labels[None], C)
        counts = c if counts is None else {k: counts[k] + c[k] for k in counts}
    return score_from_counts(metric, counts)


def eval_metric_arrays(metric, pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Like eval_metric on stacked (N, H, W) label arrays; no per-mask validation."""
    if not isinstance(metric, MetricId):
        metric = MetricId.of(metric)
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.shape[0] == 0:
        raise DomainError("eval_metric needs at least one image")
    return score_from_counts(metric, confusion_counts(metric, pred, gt, num_classes))


def confusion_counts(metric: MetricId, pred: np.ndarray, gt: np.ndarray, C: int) -> dict:
    """Per-class integer counts for a batch of (N, H, W) masks."""
    P = one_hot_stack(pred, C, dtype=bool)
    G = one_hot_stack(gt, C, dtype=bool)
    axes = (0, 1, 2)
    if metric.name is MetricName.BF1:
        k = metric.tolerance_kernel
        bp = np.moveaxis(P, -1, 1)
        bg = np.moveaxis(G, -1, 1)
        bdp = bp ^ min_pool(bp, BD_KERNEL)
        bdg = bg ^ min_pool(bg, BD_KERNEL)
        axes = (0, 2, 3)
        return {
            "tp_prec": (bdp & max_pool(bdg, k)).sum(axis=axes).astype(np.int64),
            "pred_bd": bdp.sum(axis=axes).astype(np.int64),
            "tp_rec": (max_pool(bdp, k) & bdg).sum(axis=axes).astype(np.int64),
            "gt_bd": bdg.sum(axis=axes).astype(np.int64),
        }
    if metric.name is MetricName.BIOU:
        region = boundary_region(gt, C, metric.boundary_tolerance_px)[..., None]
        P = P & region
        G = G & region
    inter = (P & G).sum(axis=axes).astype(np.int64)
    return {
        "inter": inter,
        "union": (P | G).sum(axis=axes).astype(np.int64),
        "gt": G.sum(axis=axes).astype(np.int64),
        "pred": P.sum(axis=axes).astype(np.int64),
    }


def score_from_counts(metric: MetricId, counts: dict) -> float:
    name = metric.name
    if name is MetricName.BF1:
        return _bf1(counts["tp_prec"], counts["pred_bd"], counts["tp_rec"], counts["gt_bd"])
    inter = counts["inter"].astype(np.float64)
    union = counts["union"].astype(np.float64)
    gt = counts["gt"].astype(np.float64)
    if name is MetricName.GACC:
        return float(inter.sum() / gt.sum())
    if name is MetricName.MACC:
        valid = gt > 0
        return float(np.mean(inter[valid] / gt[valid])) if valid.any() else 1.0
    valid = union > 0
    if name is MetricName.FWIOU:
        return float(np.sum(gt[valid] / gt.sum() * (inter[valid] / union[valid])))
    # miou, biou
    if not valid.any():
        return 1.0
    return float(np.mean(inter[valid] / union[valid]))


def _bf1(tp_prec, pred_bd, tp_rec, gt_bd) -> float:
    tp_prec, pred_bd = tp_prec.astype(np.float64), pred_bd.astype(np.float64)
    tp_rec, gt_bd = tp_rec.astype(np.float64), gt_bd.astype(np.float64)
    prec = np.divide(tp_prec, pred_bd, out=np.zeros_like(tp_prec), where=pred_bd > 0)
    rec = np.divide(tp_rec, gt_bd, out=np.zeros_like(tp_rec), where=gt_bd > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(denom), where=denom > 0)
    keep = (pred_bd > 0) | (gt_bd > 0)
    return float(np.mean(f1[keep])) if keep.any() else 1.0
