"""Quantitative evaluation: integrated mean error between force traces,
insertion-depth spiral angle, and batch statistics."""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .errors import AxisUndefined, NoOverlap

SUCCESS_ALPHA_DEG = 280.0


@dataclass(frozen=True)
class ForceTrace:
    """Force magnitude against a strictly increasing abscissa."""

    x: np.ndarray  # depth (mm) or time (s)
    f: np.ndarray  # |F| (N)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if len(x) < 2 or np.any(np.diff(x) <= 0.0):
            raise ValueError("trace abscissa must be strictly increasing")


@dataclass(frozen=True)
class DepthReport:
    alpha_max: float  # deg
    success: bool
    cause: str

    @classmethod
    def from_run(cls, alpha_max, cause, threshold=SUCCESS_ALPHA_DEG):
        premature = cause != "completed" and alpha_max < threshold
        return cls(alpha_max=float(alpha_max),
                   success=bool(alpha_max >= threshold and not premature),
                   cause=cause)


def ime(trace_a: ForceTrace, trace_b: ForceTrace, floor=1e-6):
    """Integrated mean relative error of trace_b against trace_a.

    Trapezoidal integral of |(F_a - F_b)/F_a| over the common abscissa
    range, normalized by the range length; returned as a fraction of unity.
    Relative to trace_a, hence not symmetric.
    """
    lo = max(trace_a.x[0], trace_b.x[0])
    hi = min(trace_a.x[-1], trace_b.x[-1])
    if hi <= lo:
        raise NoOverlap("traces share no abscissa range")
    xs = np.union1d(trace_a.x, trace_b.x)
    xs = xs[(xs >= lo) & (xs <= hi)]
    if xs[0] > lo:
        xs = np.concatenate([[lo], xs])
    if xs[-1] < hi:
        xs = np.concatenate([xs, [hi]])
    fa = np.interp(xs, trace_a.x, trace_a.f)
    fb = np.interp(xs, trace_b.x, trace_b.f)
    if np.any(fa <= floor):
        raise ValueError(f"reference trace at or below the {floor} N floor")
    rel = np.abs((fa - fb) / fa)
    return float(np.trapz(rel, xs) / (hi - lo))


# ---------------------------------------------------------------------------
# Insertion-depth spiral angle
# ---------------------------------------------------------------------------

_angle_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _axis_of(lumen):
    """(center, axis) from generator metadata or a centerline plane fit."""
    if lumen.spiral is not None:
        return np.asarray(lumen.spiral.center), np.asarray(lumen.spiral.axis)
    s = np.linspace(0.0, lumen.L, 400)
    pts = lumen.pose_at_many(s)[:, :3, 3]
    c = pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(pts - c, full_matrices=False)
    axis = vt[2]
    resid = np.sqrt(np.mean(((pts - c) @ axis) ** 2))
    inplane = pts - c - np.outer((pts - c) @ axis, axis)
    mean_radius = np.mean(np.linalg.norm(inplane, axis=1))
    if resid > 0.2 * mean_radius:
        raise AxisUndefined(
            f"plane-fit residual {resid:.3g} exceeds 20% of mean radius")
    return c, axis


def _angle_table(lumen):
    """Cached (s, alpha_deg) table: unwrapped centerline azimuth, zeroed at
    the entrance."""
    cached = _angle_cache.get(lumen)
    if cached is not None:
        return cached
    center, axis = _axis_of(lumen)
    axis = axis / np.linalg.norm(axis)
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(axis)))] = 1.0
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    s = np.linspace(0.0, lumen.L, 800)
    rel = lumen.pose_at_many(s)[:, :3, 3] - center
    az = np.unwrap(np.arctan2(rel @ v, rel @ u))
    alpha = np.degrees(az - az[0])
    if alpha[-1] < 0:
        alpha = -alpha  # orient so depth accumulates positively
    table = (s, alpha)
    _angle_cache[lumen] = table
    return table


def angle_of_arc(lumen, s):
    """Spiral rotation angle alpha (deg) of the centerline point at s."""
    s_tab, alpha = _angle_table(lumen)
    return float(np.interp(s, s_tab, alpha))


def insertion_angle(lumen, tip_position):
    """Spiral rotation angle of a tip position: project to the closest
    surface point (beta free), keep s, map to the unwrapped azimuth."""
    from . import contact as ct  # local import; contact pulls no metrics

    res = ct.closest_point_many(lumen, np.asarray(tip_position, float)[None, :])
    return angle_of_arc(lumen, float(res.s[0]))


def batch_stats(reports):
    """(mean alpha_max, std, success count, premature count) over reports."""
    if not reports:
        raise ValueError("need at least one report")
    alphas = np.array([r.alpha_max for r in reports])
    mean = float(alphas.mean())
    std = float(alphas.std(ddof=1)) if len(alphas) > 1 else 0.0
    succ = sum(1 for r in reports if r.success)
    premature = sum(1 for r in reports
                    if r.cause != "completed" and not r.success)
    return mean, std, succ, premature
