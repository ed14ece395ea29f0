"""Monotone maps g: [0,1] -> [0,1] with g(0)=0, g(1)=1, and the logical
operators built from them.

Two families are supported:

* ``bezier``: a chain of ``n`` quadratic Bezier segments through 2n+1 control
  points. Raw parameters are 2n-1 pairs in [0,1]^2; each pair gives the
  fraction of the remaining distance to (1, 1) covered by the next control
  point, so both coordinates are non-decreasing by construction.
* ``linear``: ``n`` line segments over a uniform grid on [0,1]. Raw parameters
  are any reals; the slopes are ``n * softmax(theta)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

BEZIER = "bezier"
LINEAR = "linear"
FAMILIES = (BEZIER, LINEAR)

DEFAULT_SEGMENTS = {BEZIER: 2, LINEAR: 5}

U_CLAMP = (0.01, 0.99)


def param_count(family: str, n_segments: int) -> int:
    if family == BEZIER:
        return 2 * (2 * n_segments - 1)
    if family == LINEAR:
        return n_segments
    raise DomainError(f"unknown curve family {family!r}")


def segments_from_count(family: str, count: int) -> int:
    if family == BEZIER:
        if count < 2 or count % 2 or (count // 2 + 1) % 2:
            raise DomainError(f"{count} is not a valid Bezier parameter count")
        return (count // 2 + 1) // 2
    if family == LINEAR:
        if count < 1:
            raise DomainError("linear family needs at least one parameter")
        return count
    raise DomainError(f"unknown curve family {family!r}")


def identity_params(family: str, n_segments: int) -> np.ndarray:
    """Raw parameters for which g(y) = y."""
    if family == BEZIER:
        # evenly spaced control points on the diagonal: B_i = i / 2n
        m = 2 * n_segments
        frac = 1.0 / (m - np.arange(1, m) + 1.0)
        return np.repeat(frac, 2)
    if family == LINEAR:
        return np.zeros(n_segments)
    raise DomainError(f"unknown curve family {family!r}")


@dataclass(frozen=True, eq=False)
class GCurve:
    family: str
    n_segments: int
    theta: np.ndarray
    # realized geometry: Bezier control points or linear endpoints
    knots_u: np.ndarray = field(repr=False)
    knots_v: np.ndarray = field(repr=False)

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.knots_u, self.knots_v))

    @property
    def control_points(self) -> np.ndarray:
        return np.stack([self.knots_u, self.knots_v], axis=1)

    def __call__(self, y):
        return g_eval(self, y)

    def evaluate(self, y: np.ndarray, with_grad: bool = False):
        """Unchecked vectorized evaluation; returns g or (g, dg/dy)."""
        y = np.asarray(y, dtype=np.float64)
        if self.is_identity:
            return (y.copy(), np.ones_like(y)) if with_grad else y.copy()
        if self.family == BEZIER:
            return _bezier_eval(self.knots_u, self.knots_v, y, with_grad)
        return _linear_eval(self.knots_u, self.knots_v, y, with_grad)


def curve_from_params(family: str, theta, n_segments: int | None = None) -> GCurve:
    theta = np.array(theta, dtype=np.float64).ravel()
    if family not in FAMILIES:
        raise DomainError(f"unknown curve family {family!r}")
    if n_segments is None:
        n_segments = segments_from_count(family, theta.size)
    if theta.size != param_count(family, n_segments):
        raise DomainError(
            f"{family} curve with {n_segments} segments takes "
            f"{param_count(family, n_segments)} parameters, got {theta.size}")
    if not np.all(np.isfinite(theta)):
        raise DomainError("curve parameters must be finite")
    if family == BEZIER:
        if theta.min() < 0 or theta.max() > 1:
            raise DomainError("Bezier parameters must lie in [0, 1]")
        u, v = _bezier_points(theta)
    else:
        u, v = _linear_points(theta)
    theta.setflags(write=False)
    u.setflags(write=False)
    v.setflags(write=False)
    return GCurve(family, n_segments, theta, u, v)


def identity_curve(family: str = BEZIER, n_segments: int | None = None) -> GCurve:
    n = n_segments or DEFAULT_SEGMENTS[family]
    return curve_from_params(family, identity_params(family, n), n)


def _bezier_points(theta: np.ndarray):
    pairs = theta.reshape(-1, 2)
    tu = np.clip(pairs[:, 0], *U_CLAMP)
    tv = pairs[:, 1]
    m = pairs.shape[0] + 1
    u = np.empty(m + 1)
    v = np.empty(m + 1)
    u[0] = v[0] = 0.0
    for i in range(1, m):
        u[i] = u[i - 1] + tu[i - 1] * (1.0 - u[i - 1])
        v[i] = v[i - 1] + tv[i - 1] * (1.0 - v[i - 1])
    u[m] = v[m] = 1.0
    return u, v


def _linear_points(theta: np.ndarray):
    n = theta.size
    e = np.exp(theta - theta.max())
    slopes = n * (e / e.sum())
    u = np.arange(n + 1) / n
    v = np.concatenate([[0.0], np.cumsum(slopes) / n])
    v[-1] = 1.0
    return u, v


def params_from_points(curve: GCurve) -> np.ndarray:
    """Re-derive raw parameters from the realized geometry (Bezier u-values come
    back clamped; linear parameters come back mean-centred log-slopes)."""
    u, v = curve.knots_u, curve.knots_v
    if curve.family == BEZIER:
        tu = (u[1:-1] - u[:-2]) / (1.0 - u[:-2])
        den = 1.0 - v[:-2]
        tv = np.divide(v[1:-1] - v[:-2], den, out=np.zeros_like(den), where=den > 0)
        return np.stack([tu, tv], axis=1).ravel()
    logs = np.log(np.diff(v) * curve.n_segments)
    return logs - logs.mean()


def _bezier_eval(u, v, y, with_grad):
    joints = u[0::2]
    k = np.searchsorted(joints[1:-1], y, side="left")
    u0, u1, u2 = u[2 * k], u[2 * k + 1], u[2 * k + 2]
    v0, v1, v2 = v[2 * k], v[2 * k + 1], v[2 * k + 2]
    a = u0 - 2.0 * u1 + u2
    b = 2.0 * (u1 - u0)
    dy = y - u0
    disc = np.maximum(b * b + 4.0 * a * dy, 0.0)
    # root of a s^2 + b s - dy = 0 on the increasing branch, in cancellation-free form
    s = np.clip(2.0 * dy / (b + np.sqrt(disc)), 0.0, 1.0)
    t = 1.0 - s
    g = t * t * v0 + 2.0 * s * t * v1 + s * s * v2
    g = np.clip(g, 0.0, 1.0)
    g = np.where(y >= 1.0, 1.0, np.where(y <= 0.0, 0.0, g))
    if not with_grad:
        return g
    dv = 2.0 * t * (v1 - v0) + 2.0 * s * (v2 - v1)
    du = 2.0 * t * (u1 - u0) + 2.0 * s * (u2 - u1)
    return g, np.maximum(dv / du, 0.0)


def _linear_eval(u, v, y, with_grad):
    n = u.size - 1
    k = np.searchsorted(u[1:-1], y, side="left")
    slope = (v[k + 1] - v[k]) * n
    g = np.clip(v[k] + slope * (y - u[k]), 0.0, 1.0)
    g = np.where(y >= 1.0, 1.0, np.where(y <= 0.0, 0.0, g))
    if not with_grad:
        return g
    return g, slope


def _check_unit(name, x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
        raise DomainError(f"{name} must lie in [0, 1]")
    return x


def g_eval(curve: GCurve, y):
    y = _check_unit("y", y)
    out = curve.evaluate(y)
    return float(out) if out.ndim == 0 else out


def g_grad(curve: GCurve, y):
    y = _check_unit("y", y)
    _, d = curve.evaluate(y, with_grad=True)
    return float(d) if np.ndim(d) == 0 else d


def h_and(a, b, curve: GCurve, with_grad: bool = False):
    a, b = _check_unit("a", a), _check_unit("b", b)
    ga, da = curve.evaluate(a, True)
    gb, db = curve.evaluate(b, True)
    val = ga * gb
    if with_grad:
        return val, da * gb, db * ga
    return val


def h_or(a, b, curve: GCurve, with_grad: bool = False):
    a, b = _check_unit("a", a), _check_unit("b", b)
    ga, da = curve.evaluate(a, True)
    gb, db = curve.evaluate(b, True)
    val = ga + gb - ga * gb
    if with_grad:
        return val, da * (1.0 - gb), db * (1.0 - ga)
    return val


def h_xor(a, b, or_curve: GCurve, and_curve: GCurve, with_grad: bool = False):
    """OR minus AND; may dip below zero when the two curves differ."""
    if with_grad:
        vo, dao, dbo = h_or(a, b, or_curve, True)
        va, daa, dba = h_and(a, b, and_curve, True)
        return vo - va, dao - daa, dbo - dba
    return h_or(a, b, or_curve) - h_and(a, b, and_curve)


def curve_csv(curve: GCurve, points: int = 1001) -> str:
    ys = np.linspace(0.0, 1.0, points)
    gs = curve.evaluate(ys)
    rows = ["y,g"] + [f"{y:.17g},{g:.17g}" for y, g in zip(ys, gs)]
    return "\n".join(rows) + "\n"
