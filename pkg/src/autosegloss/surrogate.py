"""Differentiable surrogates of the segmentation metrics.

Predictions enter as softmax probabilities and every logical operator in the
metric formula is replaced by a parameterized ``h`` built from a monotone
curve (see :mod:`autosegloss.curves`). Every score function returns the
score together with its gradient with respect to the probability map, so the
training loss gradient is obtained without an autodiff engine.

Arrays are channels-last: probabilities ``(N, H, W, C)``, labels ``(N, H, W)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import curves
from .curves import GCurve
from .errors import ConfigError, DomainError, NumericError
from .metrics import (
    BD_KERNEL, MetricId, MetricName, max_pool, min_pool, one_hot_stack,
    boundary_region, pool_with_index, scatter_to_source,
)

AND, OR, XOR = "AND", "OR", "XOR"

# One entry per logical-operator occurrence; XOR is carried as an (or, and) pair.
SLOT_LAYOUT = {
    MetricName.GACC: [(AND, None)],
    MetricName.MACC: [(AND, None)],
    MetricName.MIOU: [(AND, None), (OR, None)],
    MetricName.FWIOU: [(AND, None), (OR, None)],
    MetricName.BIOU: [(AND, None), (OR, None), (XOR, "or"), (XOR, "and")],
    MetricName.BF1: [(AND, None), (AND, None), (XOR, "or"), (XOR, "and")],
}


@dataclass(frozen=True)
class LogicalOpSlot:
    op_kind: str
    curve: GCurve
    part: str | None = None  # "or" / "and" half of an XOR pair


@dataclass(frozen=True)
class LossSpec:
    metric: MetricId
    slots: tuple
    weight: float = 1.0
    combine: tuple | None = None  # (other LossSpec, weight)

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        layout = SLOT_LAYOUT[self.metric.name]
        got = [(s.op_kind, s.part) for s in self.slots]
        if got != layout:
            raise ConfigError(f"{self.metric} expects slots {layout}, got {got}")
        if self.combine is not None:
            other, w = self.combine
            if other.combine is not None:
                raise ConfigError("only two losses can be combined")
            if abs(self.weight + w - 1.0) > 1e-9 or self.weight < 0 or w < 0:
                raise ConfigError("combined loss weights must be non-negative and sum to 1")
        elif self.weight != 1.0:
            raise ConfigError("a single loss must have weight 1")

    @property
    def family(self) -> str:
        return self.slots[0].curve.family

    @property
    def n_segments(self) -> int:
        return self.slots[0].curve.n_segments

    def flat_params(self) -> np.ndarray:
        return np.concatenate([s.curve.theta for s in self.slots])

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "metric": self.metric.name.value,
            "tolerance_px": self.metric.boundary_tolerance_px,
            "slots": [_slot_dict(s) for s in self.slots],
        }
        if self.combine is not None:
            other, w = self.combine
            d["weight"] = self.weight
            d["combine"] = {"weight": w, "spec": other.to_dict()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        try:
            allowed = {"metric", "tolerance_px", "slots", "weight", "combine", "seed"}
            extra = set(d) - allowed
            if extra:
                raise ConfigError(f"unknown LossSpec keys {sorted(extra)}")
            metric = MetricId.of(d["metric"], d.get("tolerance_px"))
            slots = []
            for s in d["slots"]:
                curve = curves.curve_from_params(s["family"], s["theta"], s.get("n_segments"))
                slots.append(LogicalOpSlot(s["op_kind"], curve, s.get("part")))
            combine = None
            if d.get("combine") is not None:
                c = d["combine"]
                combine = (cls.from_dict(c["spec"]), float(c["weight"]))
            return cls(metric, tuple(slots), float(d.get("weight", 1.0)), combine)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed LossSpec: {exc}") from exc

    def to_json(self, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "LossSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"LossSpec is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("LossSpec JSON must be an object")
        return cls.from_dict(d)


def _slot_dict(s: LogicalOpSlot) -> dict:
    d = {
        "op_kind": s.op_kind,
        "family": s.curve.family,
        "n_segments": s.curve.n_segments,
        "theta": [float(x) for x in s.curve.theta],
    }
    if s.part is not None:
        d["part"] = s.part
    return d


def slot_count(metric) -> int:
    return len(SLOT_LAYOUT[_metric(metric).name])


def spec_from_params(metric, family: str, n_segments: int, params) -> LossSpec:
    """Split a flat parameter vector into one curve per operator slot."""
    metric = _metric(metric)
    layout = SLOT_LAYOUT[metric.name]
    per = curves.param_count(family, n_segments)
    params = np.asarray(params, dtype=np.float64).ravel()
    if params.size != per * len(layout):
        raise ConfigError(f"{metric} needs {per * len(layout)} parameters, got {params.size}")
    slots = [
        LogicalOpSlot(kind, curves.curve_from_params(family, params[i * per:(i + 1) * per], n_segments), part)
        for i, (kind, part) in enumerate(layout)
    ]
    return LossSpec(metric, tuple(slots))


def identity_spec(metric, family: str = curves.BEZIER, n_segments: int | None = None) -> LossSpec:
    n = n_segments or curves.DEFAULT_SEGMENTS[family]
    p = curves.identity_params(family, n)
    return spec_from_params(metric, family, n, np.tile(p, slot_count(metric)))


def combined(first: LossSpec, second: LossSpec, w1: float = 0.5, w2: float = 0.5) -> LossSpec:
    return LossSpec(first.metric, first.slots, w1, (second, w2))


def _metric(metric) -> MetricId:
    return metric if isinstance(metric, MetricId) else MetricId.of(metric)


# -- softmax -------------------------------------------------------------------

def softmax_relax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(z))[0])
        raise DomainError(f"non-finite logit at {bad}")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (probs * dprobs).sum(axis=-1, keepdims=True))


# -- soft boundary ---------------------------------------------------------------

def soft_boundary(plane: np.ndarray, or_curve: GCurve, and_curve: GCurve, with_grad: bool = False):
    """Relaxed BD(p) = h_xor(p, min_pool(p)) over the last two axes, clipped to [0, 1].

    Exactly binary planes take the discrete path. With ``with_grad`` the
    result is ``(bd, backward)`` where ``backward(d_bd)`` returns d_plane.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if np.all((plane == 0.0) | (plane == 1.0)) and not with_grad:
        b = plane.astype(bool)
        return (b ^ min_pool(b, BD_KERNEL)).astype(np.float64)
    low, src = pool_with_index(plane, BD_KERNEL, "min")
    oa, doa = or_curve.evaluate(plane, True)
    ob, dob = or_curve.evaluate(low, True)
    aa, daa = and_curve.evaluate(plane, True)
    ab, dab = and_curve.evaluate(low, True)
    x = oa + ob - oa * ob - aa * ab
    bd = np.clip(x, 0.0, 1.0)
    if not with_grad:
        return bd

    def backward(d_bd):
        dx = d_bd * ((x > 0.0) & (x < 1.0))
        d_plane = dx * (doa * (1.0 - ob) - daa * ab)
        d_low = dx * (dob * (1.0 - oa) - dab * aa)
        return d_plane + scatter_to_source(d_low, src)

    return bd, backward


# -- scores ---------------------------------------------------------------------

def _as_batch(probs, gts):
    if isinstance(probs, (list, tuple)):
        probs = np.stack([np.asarray(p, dtype=np.float64) for p in probs])
    if isinstance(gts, (list, tuple)):
        gts = np.stack([np.asarray(getattr(g, "labels", g)) for g in gts])
    probs = np.asarray(probs, dtype=np.float64)
    gts = np.asarray(getattr(gts, "labels", gts))
    if probs.ndim == 3:
        probs = probs[None]
    if gts.ndim == 2:
        gts = gts[None]
    if probs.shape[:3] != gts.shape or probs.shape[0] == 0:
        raise DomainError(f"probability shape {probs.shape} does not match labels {gts.shape}")
    return probs, gts


def surrogate_score(spec: LossSpec, probs, gts, with_grad: bool = False):
    """Surrogate metric value; with ``with_grad`` also d(score)/d(probs)."""
    P, labels = _as_batch(probs, gts)
    C = P.shape[-1]
    if labels.min() < 0 or labels.max() >= C:
        raise DomainError("ground-truth label outside the class range")
    Y = one_hot_stack(labels, C)
    s, d = _single_score(spec, P, Y, labels, with_grad)
    if spec.combine is not None:
        other, w2 = spec.combine
        s2, d2 = _single_score(other, P, Y, labels, with_grad)
        s = spec.weight * s + w2 * s2
        if with_grad:
            d = spec.weight * d + w2 * d2
    return (s, d) if with_grad else s


def _single_score(spec: LossSpec, P, Y, labels, with_grad):
    name = spec.metric.name
    c = [slot.curve for slot in spec.slots]
    if name is MetricName.GACC:
        return _gacc(P, Y, c[0], with_grad)
    if name is MetricName.MACC:
        return _macc(P, Y, c[0], with_grad)
    if name in (MetricName.MIOU, MetricName.FWIOU):
        return _iou(P, Y, c[0], c[1], None, name is MetricName.FWIOU, with_grad)
    if name is MetricName.BIOU:
        region = boundary_region(labels, P.shape[-1], spec.metric.boundary_tolerance_px)
        return _iou(P, Y, c[0], c[1], region[..., None].astype(np.float64), False, with_grad)
    return _bf1(P, Y, c[0], c[1], c[2], c[3], spec.metric.tolerance_kernel, with_grad)


_SUM = (0, 1, 2)


def _gacc(P, Y, g_and, with_grad):
    ga, dga = g_and.evaluate(P, True)
    total = Y.sum()
    s = (ga * Y).sum() / total
    return s, (dga * Y / total if with_grad else None)


def _macc(P, Y, g_and, with_grad):
    ga, dga = g_and.evaluate(P, True)
    n = Y.sum(axis=_SUM)
    valid = n > 0
    K = valid.sum()
    hit = (ga * Y).sum(axis=_SUM)
    s = (hit[valid] / n[valid]).sum() / K
    if not with_grad:
        return s, None
    coef = np.divide(1.0, n * K, out=np.zeros_like(n), where=valid)
    return s, dga * Y * coef


def _iou(P, Y, g_and, g_or, region, freq_weighted, with_grad):
    ga, dga = g_and.evaluate(P, True)
    go, dgo = g_or.evaluate(P, True)
    inter_cell = ga * Y
    union_cell = go + Y - go * Y
    if region is not None:
        inter_cell = inter_cell * region
        union_cell = union_cell * region
    inter = inter_cell.sum(axis=_SUM)
    union = union_cell.sum(axis=_SUM)
    valid = union > 0
    safe_union = np.where(valid, union, 1.0)
    if freq_weighted:
        n = Y.sum(axis=_SUM)
        w = np.where(valid, n / n.sum(), 0.0)
    else:
        K = valid.sum()
        if K == 0:
            return 1.0, (np.zeros_like(P) if with_grad else None)
        w = np.where(valid, 1.0 / K, 0.0)
    s = (w * inter / safe_union).sum()
    if not with_grad:
        return s, None
    d_inter = w / safe_union
    d_union = -w * inter / (safe_union * safe_union)
    dP = d_inter * dga * Y + d_union * dgo * (1.0 - Y)
    if region is not None:
        dP = dP * region
    return s, dP


def _bf1(P, Y, g_prec, g_rec, g_xor_or, g_xor_and, kernel, with_grad):
    # per-class planes: (N, C, H, W)
    Pc = np.moveaxis(P, -1, 1)
    Yc = np.moveaxis(Y, -1, 1).astype(bool)
    bd_gt = (Yc ^ min_pool(Yc, BD_KERNEL)).astype(np.float64)
    near_gt = max_pool(bd_gt, kernel)
    if with_grad:
        bd_pred, bd_backward = soft_boundary(Pc, g_xor_or, g_xor_and, with_grad=True)
    else:
        bd_pred = soft_boundary(Pc, g_xor_or, g_xor_and)
    near_pred, src = pool_with_index(bd_pred, kernel, "max")
    gp, dgp = g_prec.evaluate(bd_pred, True)
    gr, dgr = g_rec.evaluate(near_pred, True)
    axes = (0, 2, 3)
    tp_p = (gp * near_gt).sum(axis=axes)
    d_p = gp.sum(axis=axes)  # counted through the same curve so precision stays <= 1
    tp_r = (gr * bd_gt).sum(axis=axes)
    d_r = bd_gt.sum(axis=axes)
    has_p, has_r = d_p > 0, d_r > 0
    sp = np.where(has_p, d_p, 1.0)
    sr = np.where(has_r, d_r, 1.0)
    prec = np.where(has_p, tp_p / sp, 0.0)
    rec = np.where(has_r, tp_r / sr, 0.0)
    tot = prec + rec
    pos = tot > 0
    st = np.where(pos, tot, 1.0)
    f1 = np.where(pos, 2.0 * prec * rec / st, 0.0)
    keep = has_p | has_r
    K = keep.sum()
    if K == 0:
        return 1.0, (np.zeros_like(P) if with_grad else None)
    s = f1[keep].sum() / K
    if not with_grad:
        return s, None
    w = keep / K
    d_prec = np.where(pos, w * 2.0 * rec * rec / (st * st), 0.0)
    d_rec = np.where(pos, w * 2.0 * prec * prec / (st * st), 0.0)
    e = (None, slice(None), None, None)  # broadcast per-class over (N, C, H, W)
    d_bd = (np.where(has_p, d_prec / sp, 0.0)[e] * near_gt
            - np.where(has_p, d_prec * tp_p / (sp * sp), 0.0)[e]) * dgp
    d_near = np.where(has_r, d_rec / sr, 0.0)[e] * dgr * bd_gt
    d_bd = d_bd + scatter_to_source(d_near, src)
    dPc = bd_backward(d_bd)
    return s, np.moveaxis(dPc, 1, -1)


# -- training loss -----------------------------------------------------------------

def surrogate_loss_and_grad(spec: LossSpec, logits: np.ndarray, gts: np.ndarray):
    """Loss ``1 - surrogate score`` on a minibatch and its gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 3:
        z = z[None]
    if z.shape[0] == 0:
        raise DomainError("empty batch")
    if not np.all(np.isfinite(z)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(z))[0])
        raise NumericError("non-finite logit", pixel=bad)
    P = softmax_relax(z)
    s, dP = surrogate_score(spec, P, gts, with_grad=True)
    dz = softmax_backward(P, -dP)
    if not np.isfinite(s) or not np.all(np.isfinite(dz)):
        bad = np.argwhere(~np.isfinite(dz))
        where = tuple(int(i) for i in bad[0]) if bad.size else None
        raise NumericError("non-finite surrogate loss or gradient", pixel=where)
    return 1.0 - float(s), dz.reshape(np.shape(logits))


# -- arithmetic extension ------------------------------------------------------------

def naive_loss_and_grad(metric, logits: np.ndarray, gts: np.ndarray):
    """Loss and gradient of the plain arithmetic extension (AND = ab, OR = a+b-ab).

    Only the accuracy and region-IoU metrics are written out here; it exists
    to cross-check the parameterized path with identity curves.
    """
    metric = _metric(metric)
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 3:
        z = z[None]
    labels = np.asarray(gts)
    if labels.ndim == 2:
        labels = labels[None]
    P = softmax_relax(z)
    Y = one_hot_stack(labels, P.shape[-1])
    name = metric.name
    if name is MetricName.GACC:
        total = Y.sum()
        s = (P * Y).sum() / total
        dP = np.ones_like(P) * Y / total
    elif name is MetricName.MACC:
        n = Y.sum(axis=_SUM)
        valid = n > 0
        K = valid.sum()
        s = ((P * Y).sum(axis=_SUM)[valid] / n[valid]).sum() / K
        dP = np.ones_like(P) * Y * np.divide(1.0, n * K, out=np.zeros_like(n), where=valid)
    elif name in (MetricName.MIOU, MetricName.FWIOU):
        inter = (P * Y).sum(axis=_SUM)
        union = (P + Y - P * Y).sum(axis=_SUM)
        valid = union > 0
        safe = np.where(valid, union, 1.0)
        if name is MetricName.FWIOU:
            n = Y.sum(axis=_SUM)
            w = np.where(valid, n / n.sum(), 0.0)
        else:
            w = np.where(valid, 1.0 / valid.sum(), 0.0)
        s = (w * inter / safe).sum()
        dP = (w / safe) * np.ones_like(P) * Y + (-w * inter / (safe * safe)) * np.ones_like(P) * (1.0 - Y)
    else:
        raise ConfigError(f"no hard-coded arithmetic extension for {metric}")
    dz = softmax_backward(P, -dP)
    return 1.0 - float(s), dz.reshape(np.shape(logits))
