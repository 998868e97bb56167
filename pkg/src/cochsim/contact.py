"""Contact machinery on the analytic lumen surface.

Closest-point projection of rod stations onto the parametric surface,
contact frames, the smoothed Signorini + Coulomb slack algebra, and the
frame transfer of wrenches and velocities between contact and body frames.

Slack layout per contact pair: u = [u_n, u_t1, u_t2]. Contact-frame wrench
is torque-first, [0_3; Lambda_n; Lambda_t], with Lambda_n = D_eps(-u_n) and
Lambda_t = D_eps(x) t - u_t, x = |u_t| - mu Lambda_n, t = u_t / |u_t|
(norm regularized by EPS_T so t is defined everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import liegroup as lg
from .errors import DegenerateTangents

EPS_T = 1e-8  # tangent-direction regularization at |u_t| -> 0
GRID_MULTISTART = (16, 8)  # (s, beta) seeds when no warm start exists


def smooth_plus(x, eps):
    """Smooth approximation of max(0, x): (x + sqrt(x^2 + eps^2)) / 2."""
    x = np.asarray(x, dtype=float)
    return 0.5 * (x + np.sqrt(x * x + eps * eps))


def smooth_plus_derivative(x, eps):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + x / np.sqrt(x * x + eps * eps))


# ---------------------------------------------------------------------------
# Closest-point projection
# ---------------------------------------------------------------------------


@dataclass
class ClosestPointResult:
    s: np.ndarray
    beta: np.ndarray
    distance: np.ndarray
    stationary: np.ndarray  # projected-gradient condition met
    boundary: np.ndarray  # s clamped at 0 or L with outward gradient


def closest_point_many(model, p, seed_s=None, seed_beta=None,
                       tol=1e-8, max_iter=100):
    """Batch closest-point projection by projected gradient descent.

    Minimizes half the squared distance to the surface over (s, beta) with s
    clamped to [0, L] and beta wrapped mod 2pi; steps are diagonally scaled
    gradient steps with backtracking. Without seeds, every probe descends
    from the full multi-start grid and the best converged point is kept
    (coiled lumens put competing turns within reach of a single start).
    Always returns the best point found, with stationarity status attached.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if seed_s is None or seed_beta is None:
        return _closest_point_multistart(model, p, tol, max_iter)
    return _closest_point_descent(model, p, np.array(seed_s, dtype=float),
                                  np.array(seed_beta, dtype=float),
                                  tol, max_iter)


def _closest_point_multistart(model, p, tol, max_iter):
    ns, nb = GRID_MULTISTART
    s_grid = np.linspace(0.0, model.L, ns)
    b_grid = np.linspace(0.0, 2 * np.pi, nb, endpoint=False)
    S, B = np.meshgrid(s_grid, b_grid, indexing="ij")
    n, m = len(p), ns * nb
    p_rep = np.repeat(p, m, axis=0)
    s0 = np.tile(S.ravel(), n)
    b0 = np.tile(B.ravel(), n)
    res = _closest_point_descent(model, p_rep, s0, b0, tol, max_iter)
    best = np.argmin(res.distance.reshape(n, m), axis=1) + m * np.arange(n)
    return ClosestPointResult(
        s=res.s[best], beta=res.beta[best], distance=res.distance[best],
        stationary=res.stationary[best], boundary=res.boundary[best],
    )


def _closest_point_descent(model, p, s, beta, tol, max_iter):
    """Projected descent with a curvature-scaled (2x2 Gauss-Newton) metric.

    The step preconditions the gradient by (tau^T tau + damping)^-1, which
    keeps the descent direction but removes the zig-zag of raw gradient
    steps on anisotropic sections; backtracking guards each update.
    """
    n = len(p)
    s = np.clip(s.copy(), 0.0, model.L)
    beta = np.mod(beta, 2 * np.pi)
    gtol = tol * (1.0 + np.linalg.norm(p, axis=1))

    pc, _, tau = model.surface_with_jacobian(s, beta)
    diff = pc - p
    F = 0.5 * np.einsum("ni,ni->n", diff, diff)
    stationary = np.zeros(n, dtype=bool)
    boundary = np.zeros(n, dtype=bool)
    stalled = np.zeros(n, dtype=bool)  # backtracking hit the noise floor

    for _ in range(max_iter):
        grad = np.einsum("nij,ni->nj", tau, diff)  # (n,2)
        proj = grad.copy()
        at_lo = (s <= 0.0) & (grad[:, 0] > 0.0)
        at_hi = (s >= model.L) & (grad[:, 0] < 0.0)
        proj[at_lo | at_hi, 0] = 0.0
        gnorm = np.linalg.norm(proj, axis=1)
        stationary = gnorm <= gtol
        boundary = (at_lo | at_hi) & stationary
        active = ~stationary & ~stalled
        if not active.any():
            break
        idx = np.flatnonzero(active)
        # batched 2x2 solve of (tau^T tau + lam I) step = proj
        G = np.einsum("nij,nik->njk", tau[idx], tau[idx])
        lam = 1e-10 * (G[:, 0, 0] + G[:, 1, 1]) + 1e-300
        a = G[:, 0, 0] + lam
        d = G[:, 1, 1] + lam
        b = G[:, 0, 1]
        det = a * d - b * b
        gx, gy = proj[idx, 0], proj[idx, 1]
        step = np.column_stack([(d * gx - b * gy) / det,
                                (-b * gx + a * gy) / det])
        alpha = np.ones(len(idx))
        s_a, b_a, F_a = s[idx], beta[idx], F[idx]
        F_try = F_a
        s_try, b_try = s_a, b_a
        for _bt in range(14):
            s_try = np.clip(s_a - alpha * step[:, 0], 0.0, model.L)
            b_try = np.mod(b_a - alpha * step[:, 1], 2 * np.pi)
            pc_try = model.surface_point_many(s_try, b_try)
            d_try = pc_try - p[idx]
            F_try = 0.5 * np.einsum("ni,ni->n", d_try, d_try)
            worse = F_try >= F_a
            if not worse.any():
                break
            alpha = np.where(worse, 0.5 * alpha, alpha)
        accept = F_try < F_a
        # probes improving only at the noise floor leave the active set
        weak = F_a - F_try <= 1e-10 * np.maximum(F_a, 1e-30)
        stalled[idx[weak]] = True
        moved = idx[accept]
        s[moved] = s_try[accept]
        beta[moved] = b_try[accept]
        if not accept.any():
            break
        pc_act, _, tau_act = model.surface_with_jacobian(s[moved], beta[moved])
        pc[moved], tau[moved] = pc_act, tau_act
        diff[moved] = pc_act - p[moved]
        F[moved] = 0.5 * np.einsum("ni,ni->n", diff[moved], diff[moved])

    return ClosestPointResult(
        s=s, beta=beta, distance=np.sqrt(2.0 * F),
        stationary=stationary, boundary=boundary,
    )


def closest_point(model, p, seed=None, tol=1e-8):
    """Single-point convenience wrapper; returns (s, beta)."""
    if seed is None:
        res = closest_point_many(model, [p], tol=tol)
    else:
        res = closest_point_many(model, [p], seed_s=[seed[0]],
                                 seed_beta=[seed[1]], tol=tol)
    return float(res.s[0]), float(res.beta[0])


# ---------------------------------------------------------------------------
# Contact frames and gaps
# ---------------------------------------------------------------------------


def contact_frame_many(model, s, beta, tangent_tol=1e-9):
    """Contact poses g_c at surface parameters: columns [n, e1, e2] + p_c.

    n is the unit normal of the tangent plane, flipped when needed so it
    points inward (toward the centerline); e1 follows the s-tangent and
    e2 = n x e1 completes the right-handed triad.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    pc, g, tau = model.surface_with_jacobian(s, beta)
    t1 = tau[:, :, 0]
    t2 = tau[:, :, 1]
    n_raw = np.cross(t1, t2)
    n_norm = np.linalg.norm(n_raw, axis=1)
    if np.any(n_norm <= tangent_tol):
        raise DegenerateTangents("surface tangents linearly dependent")
    n = n_raw / n_norm[:, None]
    inward = np.einsum("ni,ni->n", n, g[:, :3, 3] - pc)
    n = np.where(inward[:, None] < 0.0, -n, n)
    e1 = t1 / np.linalg.norm(t1, axis=1)[:, None]
    e2 = np.cross(n, e1)
    out = np.zeros((len(s), 4, 4))
    out[:, 3, 3] = 1.0
    out[:, :3, 0] = n
    out[:, :3, 1] = e1
    out[:, :3, 2] = e2
    out[:, :3, 3] = pc
    return out


def contact_frame(model, X):
    """Contact pose at one (s, beta)."""
    return contact_frame_many(model, [X[0]], [X[1]])[0]


def normal_gap(g_c, g, r_ea):
    """Signed normal gap d_n = (g_c^-1 g)_{1,4} - r_EA; positive in separation."""
    rel = lg.pose_inv(g_c) @ g
    return float(rel[0, 3]) - r_ea


def normal_gap_many(g_c, g, r_ea):
    n = g_c[:, :3, 0]
    return np.einsum("ni,ni->n", n, g[:, :3, 3] - g_c[:, :3, 3]) - r_ea


def _pose_from_points(p):
    out = np.zeros((len(p), 4, 4))
    out[:] = np.eye(4)
    out[:, :3, 3] = p
    return out


# ---------------------------------------------------------------------------
# Slack algebra: contact-frame forces and their partials
# ---------------------------------------------------------------------------


def slack_force(u, mu, eps):
    """Contact-frame force [Lambda_n, Lambda_t(2)] from one slack triple."""
    f, _ = slack_force_many(np.atleast_2d(u), mu, eps)
    return f[0]


def slack_force_many(u, mu, eps, want_partials=False, partials_floor=None):
    """Batch slack -> force map, optionally with d(force)/d(slack).

    Returns (force (m,3), extras dict). extras carries the pieces reused by
    the residual derivatives: t, m_reg, x, D(x) and, when requested, the
    (m,3,3) partial derivative blocks. ``partials_floor`` bounds the
    tangential norm used inside the direction derivative: the exact slope at
    |u_t| -> 0 is D(x)/EPS_T, far stiffer than the secant over the smoothing
    scale, and flooring it (Newton matrices only) keeps steps well scaled
    without touching the residual.
    """
    u = np.asarray(u, dtype=float)
    un = u[:, 0]
    ut = u[:, 1:]
    lam_n = smooth_plus(-un, eps)
    m_reg = np.sqrt(np.einsum("ni,ni->n", ut, ut) + EPS_T**2)
    t = ut / m_reg[:, None]
    x = m_reg - mu * lam_n
    Dx = smooth_plus(x, eps)
    lam_t = Dx[:, None] * t - ut
    force = np.column_stack([lam_n, lam_t])
    extras = {"t": t, "m_reg": m_reg, "x": x, "Dx": Dx, "lam_n": lam_n}
    if want_partials:
        m_jac = m_reg if partials_floor is None else np.maximum(
            m_reg, partials_floor)
        dDn = smooth_plus_derivative(-un, eps)  # d(lam_n)/d(-u_n)
        dDx = smooth_plus_derivative(x, eps)
        dt_du = (np.eye(2)[None, :, :] / m_jac[:, None, None]
                 - np.einsum("ni,nj->nij", ut, ut) / (m_jac**3)[:, None, None])
        dforce = np.zeros((len(u), 3, 3))
        dforce[:, 0, 0] = -dDn
        # d lam_t / d u_n = D'(x) * mu * D'(-u_n) * t
        dforce[:, 1:, 0] = (dDx * mu * dDn)[:, None] * t
        # d lam_t / d u_t = D'(x) t t^T + D(x) dt/du - I
        dforce[:, 1:, 1:] = (
            dDx[:, None, None] * np.einsum("ni,nj->nij", t, t)
            + Dx[:, None, None] * dt_du
            - np.eye(2)[None, :, :]
        )
        extras["dforce"] = dforce
        extras["dDx"] = dDx
        extras["dDn"] = dDn
        extras["dt_du"] = dt_du
    return force, extras


def contact_wrench(g, g_c, u, mu, eps):
    """Body-frame wrench Lambda_e transferred from the contact frame."""
    force = slack_force(np.asarray(u, dtype=float), mu, eps)
    lam_c = np.concatenate([np.zeros(3), force])
    Ad = lg.adjoint_pose(lg.pose_inv(g_c) @ g)
    return Ad.T @ lam_c


def sliding_velocity(g, g_c, eta):
    """Tangential velocity of the contact point in the contact frame."""
    Ad = lg.adjoint_pose(lg.pose_inv(g_c) @ g)
    return (Ad @ np.asarray(eta, dtype=float))[4:6]


def constraint_residual(g, g_c, u, eta, r_ea, mu, eps):
    """Smoothed Signorini + Coulomb residual f_c for one pair.

    Zero exactly when the smoothed contact conditions hold:
    [d_n - D(u_n); v_t - D(x) t].
    """
    u = np.asarray(u, dtype=float)
    d_n = normal_gap(g_c, g, r_ea)
    v_t = sliding_velocity(g, g_c, eta)
    _, ex = slack_force_many(u[None, :], mu, eps)
    return np.concatenate([
        [d_n - smooth_plus(u[0], eps)],
        v_t - ex["Dx"][0] * ex["t"][0],
    ])


def solve_pair_slack(g, g_c, eta, r_ea, mu, eps, u0=None,
                     tol=1e-12, max_iter=60):
    """Newton solve of the 3-variable per-pair slack system (test oracle)."""
    u = np.zeros(3) if u0 is None else np.array(u0, dtype=float)
    d_n = normal_gap(g_c, g, r_ea)
    v_t = sliding_velocity(g, g_c, eta)
    for _ in range(max_iter):
        _, ex = slack_force_many(u[None, :], mu, eps, want_partials=True)
        f = np.concatenate([
            [d_n - smooth_plus(u[0], eps)],
            v_t - ex["Dx"][0] * ex["t"][0],
        ])
        if np.abs(f).max() < tol:
            break
        Jm = np.zeros((3, 3))
        Jm[0, 0] = -smooth_plus_derivative(u[0], eps)
        # d/du of D(x) t
        t = ex["t"][0]
        Jm[1:, 0] = -(ex["dDx"][0] * mu * ex["dDn"][0]) * t
        Jm[1:, 1:] = -(ex["dDx"][0] * np.outer(t, t)
                       + ex["Dx"][0] * ex["dt_du"][0])
        step = np.linalg.lstsq(Jm, f, rcond=None)[0]
        u = u - step
    return u


@dataclass
class ContactPair:
    """One rod station paired with its closest surface point."""

    k: int
    s_rod: float
    X: tuple  # (s, beta) surface parameters
    g_c: np.ndarray
    d_n: float
    u: np.ndarray  # slack [u_n, u_t1, u_t2]
    active: bool


class ContactSet:
    """Per-station contact state for one simulation (warm starts + masks).

    Stations are fixed material points on the rod. ``enabled`` masks out
    stations whose projection clamps to the entrance boundary while the
    station is still behind the entrance plane (the cavity only constrains
    material beyond its opening); disabled stations carry dummy decoupled
    slack rows.
    """

    def __init__(self, lumen, s_stations, r_ea, mu, eps):
        self.lumen = lumen
        self.s_stations = np.asarray(s_stations, dtype=float)
        self.r_ea = np.asarray(r_ea, dtype=float)
        self.mu = float(mu)
        self.eps = float(eps)
        m = len(self.s_stations)
        self.X = None  # (m,2) warm-start surface parameters
        self.g_c = np.zeros((m, 4, 4))
        self.enabled = np.zeros(m, dtype=bool)
        g0 = lumen.pose_at(0.0)
        self._entry_point = g0[:3, 3]
        self._entry_tangent = g0[:3, 0]
        # one oracle-grid cell, the warm-start jump threshold
        self._cell = (lumen.L / GRID_MULTISTART[0],
                      2 * np.pi / GRID_MULTISTART[1])

    @property
    def n_stations(self):
        return len(self.s_stations)

    def refresh(self, positions):
        """Update closest points and frames for the given station positions.

        Warm-started refreshes run on a bounded iteration budget: stations
        far from the wall live past the surface focal locus where tight
        stationarity is unreachable (and irrelevant — they carry no load).
        """
        positions = np.asarray(positions, dtype=float)
        if self.X is None:
            res = closest_point_many(self.lumen, positions)
        else:
            res = closest_point_many(self.lumen, positions,
                                     seed_s=self.X[:, 0],
                                     seed_beta=self.X[:, 1], max_iter=25)
            jump = (np.abs(res.s - self.X[:, 0]) > self._cell[0]) | (
                np.abs(np.mod(res.beta - self.X[:, 1] + np.pi, 2 * np.pi)
                       - np.pi) > self._cell[1])
            if jump.any():
                re = closest_point_many(self.lumen, positions[jump])
                better = re.distance < res.distance[jump]
                idx = np.flatnonzero(jump)[better]
                res.s[idx] = re.s[better]
                res.beta[idx] = re.beta[better]
        self.X = np.column_stack([res.s, res.beta])
        self.g_c = contact_frame_many(self.lumen, res.s, res.beta)
        behind = (positions - self._entry_point) @ self._entry_tangent < 0.0
        clamped_lo = res.s <= 1e-9
        # stations far on the material side of the wall are outside the
        # cavity (e.g. behind the entrance but radially nearest to a later
        # turn); the cutoff scales with the local cavity half-width
        d_n = normal_gap_many(self.g_c, _pose_from_points(positions),
                              self.r_ea)
        a_loc = self.lumen.profiles_at(res.s)[0]
        outside = d_n < -0.75 * a_loc
        self.enabled = ~((clamped_lo & behind) | outside)
        return res
