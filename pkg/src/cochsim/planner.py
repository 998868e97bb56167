"""RCM-constrained insertion planning.

The base pivots about a virtual remote-center-of-motion point at the cochlear
entrance while advancing along its own x-axis. A frozen (lagged-geometry)
quasi-static model is differentiated into a block system mapping base inputs
(omega_b, v_par) to the base-wrench rate; a damped pseudo-inverse law on the
lateral force components steers the insertion direction online.

Sign conventions: Lambda0 is the wrench the tool applies to the implant base
(sensor semantics), and the quasi-static residual subtracts applied loads, so
the base-wrench column of the block system carries -J0^T.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import contact as ct
from . import dynamics as dy
from . import liegroup as lg
from . import rod as rd
from .errors import EmptyPlans, SingularA

# pairs below this normal load are decoupled from the sensitivity system
ACTIVE_PAIR_THRESHOLD = 1e-9


@dataclass
class RcmState:
    """Remote-center-of-motion state: the base x-axis passes through p_a."""

    p_a: np.ndarray
    R_b: np.ndarray
    d_a: float
    v_par: float = 1.0
    omega_b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def base_pose(self):
        return rcm_base_pose(self)

    def rotate(self, omega_b, dt):
        self.omega_b = np.asarray(omega_b, dtype=float)
        self.R_b = self.R_b @ lg.exp_so3(self.omega_b * dt)

    def advance(self, dt):
        self.d_a = self.d_a - self.v_par * dt

    def check_invariant(self, tol=1e-9):
        g_b = self.base_pose()
        gap = (self.p_a - g_b[:3, 3]) - self.d_a * (self.R_b @ [1.0, 0, 0])
        return np.linalg.norm(gap) < tol


def rcm_base_pose(rcm: RcmState):
    """g_b = g_a * trans_x(-d_a), with g_a sharing the base orientation."""
    if rcm.d_a < 0:
        raise ValueError("axial distance must be nonnegative")
    g_a = lg.pose(rcm.R_b, rcm.p_a)
    return g_a @ lg.pose(np.eye(3), [-rcm.d_a, 0.0, 0.0])


def rcm_twist_maps(d_a):
    """(G_omega, G_v): base body twist = G_omega w_b + G_v v_par."""
    G_w = np.zeros((6, 3))
    G_w[:3, :3] = np.eye(3)
    G_w[4, 2] = -d_a
    G_w[5, 1] = d_a
    G_v = np.zeros((6, 1))
    G_v[3, 0] = 1.0
    return G_w, G_v


@dataclass
class SensitivityPack:
    """Input--wrench sensitivities of the base insertion wrench."""

    H_w: np.ndarray  # 6x3
    H_v: np.ndarray  # 6x1
    f_perp: np.ndarray  # 2-vector, lateral base force
    Lambda0: np.ndarray  # refined quasi-static base wrench

    @property
    def J_perp(self):
        return self.H_w[4:6, :]

    @property
    def b_perp(self):
        return self.H_v[4:6, :]


S_PERP = np.zeros((2, 6))
S_PERP[0, 4] = 1.0
S_PERP[1, 5] = 1.0


class FrozenModel:
    """Quasi-static model with lagged contact geometry.

    Contact transport (J at stations, Ad factors, frames) and tangential
    sliding velocities are frozen at the linearization point; the normal gap
    keeps its full dependence on the configuration through the forward
    kinematics. Both the analytic block system and the finite-difference
    oracle must be derived from this same model, or their linearizations
    diverge.
    """

    def __init__(self, sim: dy.Simulation):
        self.sim = sim
        self.rod = sim.rod
        self.grid = sim.grid
        self.g_b = sim.state.rod_state.g_b.copy()
        kin = sim.kinematics()
        qdot = sim.state.rod_state.qdot
        terms = sim._contact_terms(kin, qdot, sim.state.lam)
        self.J_st = terms["J_st"].copy()
        self.Ad = terms["Ad"].copy()
        self.v_t_frozen = terms["v_t"].copy()
        self.g_c = sim.contacts.g_c.copy()
        self.n_frozen = self.g_c[:, :3, 0].copy()
        self.p_c_frozen = self.g_c[:, :3, 3].copy()
        self.r_ea = sim.contacts.r_ea
        self.enabled = sim.contacts.enabled.copy()
        force = sim.station_forces()
        self.active = self.enabled & (force[:, 0] >= ACTIVE_PAIR_THRESHOLD)
        self.K = sim.K
        self.Ns = sim.Ns
        self.M = sim.M
        self.mu = sim.mu
        self.eps = sim.eps
        self.frictionless = sim.frictionless
        self._st_idx = sim._st_idx
        # warm start from the dynamic state
        self.q_strain0 = sim.state.rod_state.q[6:].copy()
        self.lam0 = sim.state.lam.copy()

    # -- frozen residual -----------------------------------------------------

    def _forces(self, lam, want_partials=False):
        force, ex = ct.slack_force_many(lam.reshape(self.M, 3), self.mu,
                                        self.eps, want_partials=want_partials)
        if self.frictionless:
            force = force.copy()
            force[:, 1:] = 0.0
            if want_partials:
                ex["dforce"] = ex["dforce"].copy()
                ex["dforce"][:, 1:, :] = 0.0
        return force, ex

    def residual(self, q_base, q_strain, lam, collect=False):
        q = np.concatenate([q_base, q_strain])
        state = rd.RodState(q=q, qdot=np.zeros_like(q), g_b=self.g_b)
        kin = rd.kinematics(self.rod, state, self.grid, want_jacobian=False)
        p_st = kin.poses[self._st_idx][:, :3, 3]
        d_n = np.einsum("ki,ki->k", self.n_frozen,
                        p_st - self.p_c_frozen) - self.r_ea
        force, ex = self._forces(lam)
        lam_c = np.concatenate([np.zeros((self.M, 3)), force], axis=1)
        lam_e = np.einsum("kji,kj->ki", self.Ad, lam_c)
        F_e = np.einsum("kiN,ki->N", self.J_st[self.active],
                        lam_e[self.active])
        r_dyn = self.K @ q - F_e
        u = lam.reshape(self.M, 3)
        r_c = np.empty((self.M, 3))
        r_c[:, 0] = d_n - ct.smooth_plus(u[:, 0], self.eps)
        if self.frictionless:
            r_c[:, 1:] = u[:, 1:]
        else:
            r_c[:, 1:] = self.v_t_frozen - ex["Dx"][:, None] * ex["t"]
        inact = ~self.active
        r_c[inact, 1:] = u[inact, 1:] - self.lam0.reshape(self.M, 3)[inact, 1:]
        r_c[~self.enabled, 0] = u[~self.enabled, 0] - 1.0
        res = np.concatenate([r_dyn[6:], r_c.ravel()])
        if collect:
            Lambda0 = -r_dyn[:6] + (self.K @ q)[:6]  # = F_e base rows
            return res, -Lambda0, kin
        return res

    def solve(self, q_base, tol=1e-11, max_iter=40):
        """Newton solve of the frozen model at the prescribed base increment.

        Returns (q_strain, lam, Lambda0) with Lambda0 = -F_e restricted to
        the base block (J0 lagged at identity).
        """
        q_strain = self.q_strain0.copy()
        lam = self.lam0.copy()
        res, Lambda0, _ = self.residual(q_base, q_strain, lam, collect=True)
        scale = 1.0 + np.abs(self.K @ np.concatenate([q_base, q_strain])).max()
        for _ in range(max_iter):
            if np.abs(res).max() < tol * scale:
                break
            A = self._newton_matrix(q_base, q_strain, lam)
            dz = np.linalg.solve(A, -res)
            alpha = 1.0
            f0 = float(res @ res)
            for _bt in range(30):
                qs_try = q_strain + alpha * dz[:self.Ns]
                lam_try = lam + alpha * dz[self.Ns:]
                res_try, Lam_try, _ = self.residual(q_base, qs_try, lam_try,
                                                    collect=True)
                if float(res_try @ res_try) <= f0 * (1 - 1e-4 * alpha):
                    break
                alpha *= 0.5
            else:
                break
            q_strain, lam, res, Lambda0 = qs_try, lam_try, res_try, Lam_try
        return q_strain, lam, Lambda0

    def _newton_matrix(self, q_base, q_strain, lam):
        """Exact derivative of the frozen residual in (q_strain, lam)."""
        blocks = self.diff_blocks(q_base, q_strain, lam)
        A = np.zeros((self.Ns + 3 * self.M, self.Ns + 3 * self.M))
        A[:self.Ns, :self.Ns] = self.K[6:, 6:]
        A[:self.Ns, self.Ns:] = blocks["F_lam"][6:, :]
        A[self.Ns:, :self.Ns] = blocks["C_q"][:, 6:]
        A[self.Ns:, self.Ns:] = blocks["C_lam"]
        return A

    def diff_blocks(self, q_base, q_strain, lam):
        """F_lam (dR/dlam), C_q, C_lam of the frozen model, exact."""
        q = np.concatenate([q_base, q_strain])
        state = rd.RodState(q=q, qdot=np.zeros_like(q), g_b=self.g_b)
        kin = rd.kinematics(self.rod, state, self.grid)
        g_st = kin.poses[self._st_idx]
        J_now = kin.J[self._st_idx]
        force, ex = self._forces(lam, want_partials=True)
        # dR/dlam = -dF_e/dlam (frozen transport)
        W = np.einsum("kij,kil->kjl", self.Ad[:, 3:, :], ex["dforce"])
        F_lam = np.zeros((self.Ns + 6, 3 * self.M))
        C_q = np.zeros((3 * self.M, self.Ns + 6))
        C_lam = np.zeros((3 * self.M, 3 * self.M))
        dDn_u = ct.smooth_plus_derivative(lam.reshape(self.M, 3)[:, 0],
                                          self.eps)
        t = ex["t"]
        for k in range(self.M):
            c = 3 * k
            if not self.enabled[k]:
                C_lam[c, c] = 1.0
            else:
                # normal gap keeps full q dependence (exact FK derivative)
                w = g_st[k, :3, :3].T @ self.n_frozen[k]
                C_q[c, :] = w @ J_now[k, 3:, :]
                C_lam[c, c] = -dDn_u[k]
            if self.frictionless or not self.active[k]:
                C_lam[c + 1:c + 3, c + 1:c + 3] = np.eye(2)
            else:
                C_lam[c + 1:c + 3, c] = -(ex["dDx"][k] * self.mu
                                          * ex["dDn"][k]) * t[k]
                C_lam[c + 1:c + 3, c + 1:c + 3] = -(
                    ex["dDx"][k] * np.outer(t[k], t[k])
                    + ex["Dx"][k] * ex["dt_du"][k])
            if self.active[k]:
                F_lam[:, c:c + 3] = F_lam[:, c:c + 3] \
                    - self.J_st[k].T @ W[k]
        return {"F_lam": F_lam, "C_q": C_q, "C_lam": C_lam}


def assemble_diff_system(frozen: FrozenModel, d_a):
    """Block system A [qdot; Lam0dot; lamdot] = B_w w + B_v v.

    Rows: differentiated quasi-static balance, boundary kinematics under the
    RCM constraint, differentiated contact constraints. The balance carries
    -J0^T on the base-wrench rate because applied wrenches are subtracted
    in the residual.
    """
    Nq = frozen.Ns + 6
    M3 = 3 * frozen.M
    n = Nq + 6 + M3
    blocks = frozen.diff_blocks(np.zeros(6), frozen.q_strain0, frozen.lam0)
    A = np.zeros((n, n))
    J0 = np.zeros((6, Nq))
    J0[:, :6] = np.eye(6)
    A[:Nq, :Nq] = frozen.K
    A[:Nq, Nq:Nq + 6] = -J0.T
    A[:Nq, Nq + 6:] = blocks["F_lam"]
    A[Nq:Nq + 6, :Nq] = J0
    A[Nq + 6:, :Nq] = blocks["C_q"]
    A[Nq + 6:, Nq + 6:] = blocks["C_lam"]
    G_w, G_v = rcm_twist_maps(d_a)
    B_w = np.zeros((n, 3))
    B_w[Nq:Nq + 6, :] = G_w
    B_v = np.zeros((n, 1))
    B_v[Nq:Nq + 6, :] = G_v
    return A, B_w, B_v


def sensitivities(frozen: FrozenModel, d_a) -> SensitivityPack:
    """Solve the block system for the base-wrench input sensitivities."""
    A, B_w, B_v = assemble_diff_system(frozen, d_a)
    Nq = frozen.Ns + 6
    rhs = np.concatenate([B_w, B_v], axis=1)
    try:
        X = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularA(str(exc)) from exc
    if not np.all(np.isfinite(X)):
        raise SingularA("non-finite sensitivity solution")
    H = X[Nq:Nq + 6, :]
    _, _, Lambda0 = frozen.solve(np.zeros(6))
    return SensitivityPack(H_w=H[:, :3], H_v=H[:, 3:4],
                           f_perp=S_PERP @ Lambda0, Lambda0=Lambda0)


def fd_sensitivities(frozen: FrozenModel, d_a, delta=1e-6):
    """Central-difference H from re-solving the frozen model (test oracle)."""
    G_w, G_v = rcm_twist_maps(d_a)
    dirs = np.concatenate([G_w, G_v], axis=1)  # base twists per input
    H = np.zeros((6, 4))
    for j in range(4):
        _, _, lp = frozen.solve(delta * dirs[:, j])
        _, _, lm = frozen.solve(-delta * dirs[:, j])
        H[:, j] = (lp - lm) / (2 * delta)
    return H[:, :3], H[:, 3:4]


def feedback_omega(pack: SensitivityPack, v_par, gain_k, eps_dls,
                   omega_max=0.5):
    """Damped pseudo-inverse direction update suppressing lateral force."""
    if eps_dls <= 0:
        raise ValueError("damping must be positive")
    Jp = pack.J_perp
    rhs = gain_k * pack.f_perp + (pack.b_perp @ [v_par])
    M2 = Jp @ Jp.T + eps_dls * np.eye(2)
    w = -Jp.T @ np.linalg.solve(M2, rhs)
    norm = np.linalg.norm(w)
    if norm > omega_max:
        w = w * (omega_max / norm)
    return w


@dataclass
class Plan:
    """Depth-indexed base-motion sequence, replayable open loop."""

    entries: list  # of (depth_mm, R_b (3,3), d_a)
    meta: dict

    def to_json_dict(self):
        return {
            "entries": [
                {"depth_mm": float(d),
                 "R_b": [float(v) for v in np.asarray(R).ravel()],
                 "d_a_mm": float(da)}
                for d, R, da in self.entries
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_json_dict(cls, d):
        entries = [(e["depth_mm"], np.array(e["R_b"]).reshape(3, 3),
                    e["d_a_mm"]) for e in d["entries"]]
        return cls(entries=entries, meta=dict(d["meta"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))

    def late_stage_directions(self, fraction=0.2):
        if not self.entries:
            raise EmptyPlans("plan has no entries")
        depths = np.array([e[0] for e in self.entries])
        cutoff = depths[-1] - fraction * (depths[-1] - depths[0])
        return np.array([R[:, 0] for d, R, _ in self.entries if d >= cutoff])


def entrance_rcm(lumen, d_a0, R_b=None):
    """RCM state at the lumen entrance; default aligned with the centerline."""
    g0 = lumen.pose_at(0.0)
    if R_b is None:
        R_b = g0[:3, :3].copy()
    return RcmState(p_a=g0[:3, 3].copy(), R_b=np.asarray(R_b, float),
                    d_a=float(d_a0))


def make_base_schedule(rcm: RcmState, step_mm):
    """Base pose per step from the RCM state (fixed-orientation sources just
    never rotate it)."""
    def fn(i):
        rcm.d_a = rcm.d_a0 - (i + 1) * step_mm
        return rcm.base_pose()
    rcm.d_a0 = rcm.d_a
    return fn


class OnlinePlanner:
    """Per-step controller: quasi-static refine, sensitivities, feedback."""

    def __init__(self, rcm: RcmState, gain_k=5.0, eps_dls=1e-6,
                 omega_max=0.5, dt=0.05, control_every=1):
        self.rcm = rcm
        self.gain_k = gain_k
        self.eps_dls = eps_dls
        self.omega_max = omega_max
        self.dt = dt
        self.control_every = int(control_every)
        self._count = 0
        self.last_pack = None

    def __call__(self, sim, traj):
        self._count += 1
        if self._count % self.control_every:
            return
        frozen = FrozenModel(sim)
        try:
            pack = sensitivities(frozen, self.rcm.d_a)
        except SingularA:
            return  # hold the last commanded orientation
        self.last_pack = pack
        w = feedback_omega(pack, self.rcm.v_par, self.gain_k, self.eps_dls,
                           omega_max=self.omega_max)
        self.rcm.rotate(w, self.dt * self.control_every)


def plan_insertion(lumen, rod_model, rcm: RcmState, protocol,
                   sim_kwargs=None, gain_k=5.0, eps_dls=1e-6, omega_max=0.5,
                   record_pairs=False):
    """Run the online planner and emit the depth-indexed plan.

    Returns (plan, trajectory, sim). The plan records the base orientation
    and axial distance actually commanded at each advancement step and can
    be replayed open loop.
    """
    sim_kwargs = dict(sim_kwargs or {})
    sim_kwargs.setdefault("dt", protocol.dt)
    sim = dy.Simulation(lumen, rod_model, g_b0=rcm.base_pose(), **sim_kwargs)
    planner = OnlinePlanner(rcm, gain_k=gain_k, eps_dls=eps_dls,
                            omega_max=omega_max, dt=protocol.dt)
    entries = []
    d_a0 = rcm.d_a

    def base_pose_fn(i):
        rcm.d_a = d_a0 - (i + 1) * protocol.step_mm
        g = rcm.base_pose()
        entries.append(((i + 1) * protocol.step_mm, rcm.R_b.copy(), rcm.d_a))
        return g

    traj = dy.run_insertion(sim, protocol, base_pose_fn, controller=planner,
                            record_pairs=record_pairs)
    del entries[traj.n_steps:]  # drop poses of steps that failed to converge
    plan = Plan(entries=entries, meta={
        "k": gain_k, "eps_dls": eps_dls, "v_par": protocol.v_par,
        "step_mm": protocol.step_mm,
    })
    return plan, traj, sim


def replay_plan(lumen, rod_model, plan: Plan, rcm: RcmState, protocol=None,
                sim_kwargs=None, record_pairs=False):
    """Re-run an insertion from a stored base-motion sequence."""
    sim_kwargs = dict(sim_kwargs or {})
    if protocol is None:
        protocol = dy.InsertionProtocol(
            v_par=plan.meta["v_par"], step_mm=plan.meta["step_mm"],
            max_advance_mm=plan.entries[-1][0])
    sim_kwargs.setdefault("dt", protocol.dt)
    p_a = rcm.p_a

    def base_pose_fn(i):
        _, R_b, d_a = plan.entries[min(i, len(plan.entries) - 1)]
        g_a = lg.pose(R_b, p_a)
        return g_a @ lg.pose(np.eye(3), [-d_a, 0.0, 0.0])

    sim = dy.Simulation(lumen, rod_model, g_b0=rcm.base_pose(), **sim_kwargs)
    proto = dy.InsertionProtocol(
        v_par=protocol.v_par, step_mm=protocol.step_mm,
        max_advance_mm=min(protocol.max_advance_mm,
                           plan.entries[-1][0]),
        max_steps=len(plan.entries),
        stall_window=protocol.stall_window,
        stall_fraction=protocol.stall_fraction)
    traj = dy.run_insertion(sim, proto, base_pose_fn,
                            record_pairs=record_pairs)
    return traj, sim


def sample_cone_orientations(axis, half_angle_rad, n, azimuth0=0.0):
    """n rotations whose x-axes sit on a cone about the given axis."""
    if not 0.0 <= half_angle_rad < np.pi / 2:
        raise ValueError("half angle must be in [0, pi/2)")
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(axis)))] = 1.0
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    out = []
    for j in range(n):
        az = azimuth0 + 2 * np.pi * j / n
        d = (np.cos(half_angle_rad) * axis
             + np.sin(half_angle_rad) * (np.cos(az) * u + np.sin(az) * v))
        y = np.cross(axis, d)
        ny = np.linalg.norm(y)
        if ny < 1e-12:
            y = u.copy()
        else:
            y /= ny
        z = np.cross(d, y)
        out.append(np.column_stack([d, y, z]))
    return out


def goid(plans, fraction=0.2):
    """Global optimal insertion direction: normalized mean of the late-stage
    base x-axis directions across plans."""
    if not plans:
        raise EmptyPlans("no plans")
    dirs = [p.late_stage_directions(fraction) for p in plans]
    acc = np.concatenate(dirs, axis=0).mean(axis=0)
    n = np.linalg.norm(acc)
    if n == 0.0:
        raise EmptyPlans("late-stage directions cancel")
    return acc / n
