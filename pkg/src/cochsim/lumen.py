"""Analytic lumen model: discrete frames -> piecewise-constant-strain pose
curve -> swept asymmetric-ellipse surface with closed-form parameter Jacobian.

The model is immutable after construction; every evaluation is a pure
function, so instances can be shared freely across threads.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import liegroup as lg
from .errors import OutOfRange, ParallelAxes

CLAMP_TOL = 1e-9


@dataclass(frozen=True)
class StationFrame:
    """One centerline station: arc length plus attached pose."""

    s: float
    g: np.ndarray  # 4x4 pose; x-axis along the centerline tangent


@dataclass(frozen=True)
class SpiralMeta:
    """Optional generator metadata: spiral axis for depth-angle evaluation."""

    center: np.ndarray
    axis: np.ndarray
    # analytic (s, alpha_deg) table from the generator; not serialized
    alpha_table: tuple | None = field(default=None, compare=False)


class LumenModel:
    """Swept-tube cavity driven by a piecewise-constant-strain pose curve.

    Frames ``g_i`` at arc lengths ``s_i`` are interpolated by constant body
    twists ``xi_i`` per segment; cross sections are vertically asymmetric
    ellipses with piecewise-linear scalar profiles a(s), b_u(s), b_l(s) and
    flattening exponent ``p >= 1``.
    """

    def __init__(self, s_nodes, g_nodes, xi, a, b_u, b_l, p=2.0, spiral=None):
        self.s_nodes = np.ascontiguousarray(s_nodes, dtype=float)
        self.g_nodes = np.ascontiguousarray(g_nodes, dtype=float)
        self.xi = np.ascontiguousarray(xi, dtype=float)
        self.a_nodes = np.ascontiguousarray(a, dtype=float)
        self.bu_nodes = np.ascontiguousarray(b_u, dtype=float)
        self.bl_nodes = np.ascontiguousarray(b_l, dtype=float)
        self.p = float(p)
        self.spiral = spiral
        n_seg = len(self.s_nodes) - 1
        if self.xi.shape != (n_seg, 6):
            raise ValueError("xi must have one 6-vector per segment")
        if self.p < 1.0:
            raise ValueError("flattening exponent must be >= 1")
        for name, arr in (("a", self.a_nodes), ("b_u", self.bu_nodes),
                          ("b_l", self.bl_nodes)):
            if arr.shape != self.s_nodes.shape:
                raise ValueError(f"profile {name} must match station count")
            if np.any(arr <= 0.0):
                raise ValueError(f"profile {name} must be positive")
        ds = np.diff(self.s_nodes)
        if np.any(ds <= 0.0):
            raise ValueError("station arc lengths must be strictly increasing")
        # per-segment profile slopes (right-segment rule at nodes)
        self._da = np.diff(self.a_nodes) / ds
        self._dbu = np.diff(self.bu_nodes) / ds
        self._dbl = np.diff(self.bl_nodes) / ds

    @property
    def L(self) -> float:
        return float(self.s_nodes[-1])

    @property
    def n_segments(self) -> int:
        return len(self.s_nodes) - 1

    @classmethod
    def from_frames(cls, frames, a, b_u, b_l, p=2.0, spiral=None):
        """Build from StationFrames, fitting the segment twists."""
        s = np.array([f.s for f in frames])
        g = np.stack([f.g for f in frames])
        xi = fit_pcs(frames)
        return cls(s, g, xi, a, b_u, b_l, p=p, spiral=spiral)

    # -- pose curve ---------------------------------------------------------

    def _clamp(self, s):
        s = np.asarray(s, dtype=float)
        bad = (s < -CLAMP_TOL) | (s > self.L + CLAMP_TOL)
        if np.any(bad):
            raise OutOfRange(
                f"arc length outside [0, {self.L}] beyond clamp tolerance"
            )
        if np.any((s < 0.0) | (s > self.L)):
            warnings.warn("arc length clamped to [0, L]", stacklevel=3)
        return np.clip(s, 0.0, self.L)

    def _segment_of(self, s):
        """Segment indices; at nodes the right segment is used."""
        idx = np.searchsorted(self.s_nodes, s, side="right") - 1
        return np.clip(idx, 0, self.n_segments - 1)

    def pose_at(self, s):
        """Pose g_c(s) of the centerline frame."""
        s = float(self._clamp(s))
        i = int(self._segment_of(s))
        return self.g_nodes[i] @ lg.exp_se3(self.xi[i], s - self.s_nodes[i])

    def pose_at_many(self, s):
        """(m,) arc lengths -> (m,4,4) poses, vectorized."""
        s = self._clamp(s)
        idx = self._segment_of(s)
        steps = lg.exp_se3_batch(self.xi[idx], s - self.s_nodes[idx])
        return self.g_nodes[idx] @ steps

    # -- cross-section profiles ---------------------------------------------

    def profiles_at(self, s):
        """(a, b_u, b_l) values and slopes at s (arrays or scalars)."""
        s = self._clamp(s)
        idx = self._segment_of(s)
        ds = s - self.s_nodes[idx]
        a = self.a_nodes[idx] + self._da[idx] * ds
        bu = self.bu_nodes[idx] + self._dbu[idx] * ds
        bl = self.bl_nodes[idx] + self._dbl[idx] * ds
        return a, bu, bl, self._da[idx], self._dbu[idx], self._dbl[idx]

    def profile_b(self, s, beta):
        """Angle-dependent vertical semi-axis b(s, beta)."""
        _, bu, bl, _, _, _ = self.profiles_at(s)
        w = 0.5 * (1.0 + np.sin(beta))
        return bl - (bl - bu) * w**self.p

    # -- surface -------------------------------------------------------------

    def _local_section(self, s, beta):
        """Local-frame contour f and its s/beta partials, all (m,3)."""
        beta = np.asarray(beta, dtype=float)
        a, bu, bl, da, dbu, dbl = self.profiles_at(s)
        sb, cb = np.sin(beta), np.cos(beta)
        w = 0.5 * (1.0 + sb)
        wp = w**self.p
        b = bl - (bl - bu) * wp
        db_ds = dbl - (dbl - dbu) * wp
        # d/dbeta of w^p; p >= 1 keeps w^(p-1) finite at w = 0
        dwp = self.p * w ** (self.p - 1.0) * 0.5 * cb
        db_dbeta = -(bl - bu) * dwp
        zeros = np.zeros_like(b)
        f = np.stack([zeros, a * cb, b * sb], axis=-1)
        df_ds = np.stack([zeros, da * cb, db_ds * sb], axis=-1)
        df_dbeta = np.stack([zeros, -a * sb, b * cb + db_dbeta * sb], axis=-1)
        return f, df_ds, df_dbeta

    def surface_point(self, s, beta):
        """Global surface point p_c(s, beta)."""
        out = self.surface_point_many(np.atleast_1d(s), np.atleast_1d(beta))
        return out[0] if np.isscalar(s) or np.ndim(s) == 0 else out

    def surface_point_many(self, s, beta):
        g = self.pose_at_many(s)
        f, _, _ = self._local_section(s, beta)
        return g[:, :3, 3] + np.einsum("nij,nj->ni", g[:, :3, :3], f)

    def surface_jacobian(self, s, beta):
        """3x2 matrix [dp_c/ds, dp_c/dbeta] at one (s, beta)."""
        tau = self.surface_jacobian_many(np.atleast_1d(s), np.atleast_1d(beta))
        return tau[0]

    def surface_jacobian_many(self, s, beta):
        """(m,3,2) surface Jacobians, closed form."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        idx = self._segment_of(self._clamp(s))
        g = self.pose_at_many(s)
        f, df_ds, df_dbeta = self._local_section(s, beta)
        kappa = self.xi[idx, :3]
        eps = self.xi[idx, 3:]
        col_s = eps + np.cross(kappa, f) + df_ds
        R = g[:, :3, :3]
        out = np.empty((len(s), 3, 2))
        out[:, :, 0] = np.einsum("nij,nj->ni", R, col_s)
        out[:, :, 1] = np.einsum("nij,nj->ni", R, df_dbeta)
        return out

    def surface_with_jacobian(self, s, beta):
        """(p_c, poses, tau) in one pass for contact queries."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        idx = self._segment_of(self._clamp(s))
        g = self.pose_at_many(s)
        f, df_ds, df_dbeta = self._local_section(s, beta)
        R = g[:, :3, :3]
        pc = g[:, :3, 3] + np.einsum("nij,nj->ni", R, f)
        col_s = self.xi[idx, 3:] + np.cross(self.xi[idx, :3], f) + df_ds
        tau = np.empty((len(s), 3, 2))
        tau[:, :, 0] = np.einsum("nij,nj->ni", R, col_s)
        tau[:, :, 1] = np.einsum("nij,nj->ni", R, df_dbeta)
        return pc, g, tau

    # -- validation & io ------------------------------------------------------

    def reconstruction_error(self):
        """Max mismatch of exp(xi_i * ds_i) chaining g_i into g_{i+1}."""
        ds = np.diff(self.s_nodes)
        steps = lg.exp_se3_batch(self.xi, ds)
        pred = self.g_nodes[:-1] @ steps
        return float(np.abs(pred - self.g_nodes[1:]).max())

    def validate(self, tol=1e-8):
        if self.reconstruction_error() > tol:
            raise ValueError("segment twists do not reproduce station poses")
        for g in self.g_nodes:
            if not lg.check_pose(g):
                raise ValueError("station pose is not a rigid transform")
        return True

    def to_json_dict(self):
        d = {
            "stations": [
                {
                    "s": float(s),
                    "g": [float(v) for v in np.hstack(
                        [g[:3, :3], g[:3, 3:4]]).ravel()],
                }
                for s, g in zip(self.s_nodes, self.g_nodes)
            ],
            "xi": [[float(v) for v in row] for row in self.xi],
            "a": [float(v) for v in self.a_nodes],
            "b_u": [float(v) for v in self.bu_nodes],
            "b_l": [float(v) for v in self.bl_nodes],
            "p": self.p,
            "L": self.L,
        }
        if self.spiral is not None:
            d["spiral"] = {
                "center": [float(v) for v in self.spiral.center],
                "axis": [float(v) for v in self.spiral.axis],
            }
        return d

    @classmethod
    def from_json_dict(cls, d):
        s = np.array([st["s"] for st in d["stations"]])
        g = np.zeros((len(s), 4, 4))
        for i, st in enumerate(d["stations"]):
            m = np.array(st["g"]).reshape(3, 4)
            g[i, :3, :3] = m[:, :3]
            g[i, :3, 3] = m[:, 3]
            g[i, 3, 3] = 1.0
        spiral = None
        if "spiral" in d:
            spiral = SpiralMeta(
                center=np.array(d["spiral"]["center"]),
                axis=np.array(d["spiral"]["axis"]),
            )
        return cls(s, g, np.array(d["xi"]), np.array(d["a"]),
                   np.array(d["b_u"]), np.array(d["b_l"]),
                   p=d["p"], spiral=spiral)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def build_frames(stations, parallel_tol=1e-6):
    """Station samples -> right-handed frames with tangent x-axis.

    The in-plane z-axis follows the section major axis (p+ - p-), sign-flipped
    against the previous station when needed so consecutive frames stay
    continuous before strain fitting.
    """
    if len(stations) < 2:
        raise ValueError("need at least 2 stations")
    frames = []
    z_prev = None
    for st in stations:
        x = np.asarray(st.t, dtype=float)
        x = x / np.linalg.norm(x)
        d = np.asarray(st.p_plus, dtype=float) - np.asarray(st.p_minus, dtype=float)
        z_raw = d / np.linalg.norm(d)
        if np.linalg.norm(np.cross(z_raw, x)) <= parallel_tol:
            raise ParallelAxes(f"major axis parallel to tangent at s={st.s}")
        if z_prev is not None and np.dot(z_raw, z_prev) < 0.0:
            z_raw = -z_raw
        y = np.cross(z_raw, x)
        y = y / np.linalg.norm(y)
        z = np.cross(x, y)
        z_prev = z
        R = np.column_stack([x, y, z])
        frames.append(StationFrame(s=float(st.s), g=lg.pose(R, np.asarray(st.r, dtype=float))))
    return frames


def fit_pcs(frames):
    """Constant body twist per segment from the SE(3) log of relative poses."""
    xi = np.zeros((len(frames) - 1, 6))
    for i in range(len(frames) - 1):
        ds = frames[i + 1].s - frames[i].s
        if ds <= 0.0:
            raise ValueError("station arc lengths must be strictly increasing")
        rel = lg.pose_inv(frames[i].g) @ frames[i + 1].g
        xi[i] = lg.log_se3(rel) / ds
    return xi


def transform_lumen(model: LumenModel, g: np.ndarray) -> LumenModel:
    """Apply a rigid transform to the whole model (tests and registration)."""
    g_nodes = np.asarray(g) @ model.g_nodes
    spiral = None
    if model.spiral is not None:
        R, p = g[:3, :3], g[:3, 3]
        spiral = SpiralMeta(center=R @ model.spiral.center + p,
                            axis=R @ model.spiral.axis,
                            alpha_table=model.spiral.alpha_table)
    return LumenModel(model.s_nodes, g_nodes, model.xi, model.a_nodes,
                      model.bu_nodes, model.bl_nodes, p=model.p, spiral=spiral)


def synthetic_spiral(
    turns=2.5,
    rho_start=5.5,
    rho_end=1.0,
    a_start=0.9,
    a_end=0.35,
    bu_frac=0.75,
    bl_frac=0.95,
    stations=40,
    vestibule=1.5,
    p_flat=2.0,
) -> LumenModel:
    """Planar tapering spiral lumen for desk-scale testing.

    The centerline is a polar spiral rho(theta) linear in theta, wound in the
    xy-plane about the origin, preceded by a straight entry segment of length
    ``vestibule``. Cross-section profiles taper linearly along arc length.
    The spiral axis (+z) and center are attached as metadata together with an
    analytic depth-angle table.
    """
    if turns <= 0 or rho_start <= 0 or rho_end <= 0:
        raise ValueError("spiral parameters must be positive")
    theta_tot = turns * 2.0 * np.pi
    drho = (rho_end - rho_start) / theta_tot

    # dense arc-length table for the polar part
    th = np.linspace(0.0, theta_tot, 20_000)
    rho = rho_start + drho * th
    speed = np.hypot(rho, drho)
    s_dense = np.concatenate([[0.0], np.cumsum(
        0.5 * (speed[1:] + speed[:-1]) * np.diff(th))])
    L_spiral = s_dense[-1]
    L_total = vestibule + L_spiral

    def polar_point(theta):
        r = rho_start + drho * theta
        return np.array([r * np.cos(theta), r * np.sin(theta), 0.0])

    def polar_tangent(theta):
        r = rho_start + drho * theta
        d = np.array([
            drho * np.cos(theta) - r * np.sin(theta),
            drho * np.sin(theta) + r * np.cos(theta),
            0.0,
        ])
        return d / np.linalg.norm(d)

    t0 = polar_tangent(0.0)
    entry = polar_point(0.0) - vestibule * t0

    s_stations = np.linspace(0.0, L_total, stations)
    frames = []
    z = np.array([0.0, 0.0, 1.0])
    for s in s_stations:
        if s <= vestibule:
            pos = entry + s * t0
            x = t0
        else:
            theta = np.interp(s - vestibule, s_dense, th)
            pos = polar_point(theta)
            x = polar_tangent(theta)
        y = np.cross(z, x)
        R = np.column_stack([x, y / np.linalg.norm(y), z])
        frames.append(StationFrame(s=float(s), g=lg.pose(R, pos)))

    a = a_start + (a_end - a_start) * s_stations / L_total
    bu = bu_frac * a
    bl = bl_frac * a

    # analytic depth angle: azimuth about the center, unwrapped, zero at s=0
    s_table = np.concatenate([np.linspace(0.0, vestibule, 50, endpoint=False),
                              vestibule + s_dense[::20], [L_total]])
    pts = []
    for s in s_table:
        if s <= vestibule:
            pts.append(entry + s * t0)
        else:
            pts.append(polar_point(np.interp(s - vestibule, s_dense, th)))
    pts = np.array(pts)
    az = np.unwrap(np.arctan2(pts[:, 1], pts[:, 0]))
    alpha = np.degrees(az - az[0])

    meta = SpiralMeta(center=np.zeros(3), axis=z.copy(),
                      alpha_table=(s_table, alpha))
    return LumenModel.from_frames(frames, a, bu, bl, p=p_flat, spiral=meta)
