"""Contact pseudo-dynamics: DAE residual assembly, implicit-Euler Newton
stepping, and insertion runs.

Unknowns per time step are the nodal strains and the stacked contact slacks;
the prescribed base pose is eliminated (folded into the cached base pose so
the base increment stays zero) and the base wrench is recovered from the
base-block force balance. Contact frames are frozen at the start of each
step from the previous configuration; the residual is exact for that frozen
geometry, and the Newton matrix is its analytic derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import contact as ct
from . import liegroup as lg
from . import metrics as mt
from . import rod as rd
from .errors import DimensionMismatch, NonConvergence


def station_layout(length, n_stations, distal_refine=False):
    """Contact stations on (0, L], uniform; optionally doubled density over
    the distal quarter."""
    if not distal_refine:
        return length * np.arange(1, n_stations + 1) / n_stations
    n_prox = int(round(n_stations * 0.5))
    n_dist = n_stations - n_prox
    prox = np.linspace(0.0, 0.75 * length, n_prox + 1)[1:]
    dist = np.linspace(0.75 * length, length, n_dist + 1)[1:]
    return np.concatenate([prox, dist])


@dataclass
class DaeState:
    """Full simulation state: rod coordinates, slacks, base wrench, clock."""

    rod_state: rd.RodState
    lam: np.ndarray  # (3*M,) stacked contact slacks
    Lambda0: np.ndarray  # (6,) base insertion wrench, base body frame
    t: float = 0.0
    step: int = 0

    def copy(self):
        return DaeState(rod_state=self.rod_state.copy(), lam=self.lam.copy(),
                        Lambda0=self.Lambda0.copy(), t=self.t, step=self.step)


@dataclass
class InsertionProtocol:
    """Axial advancement schedule and stop criteria."""

    v_par: float = 1.0  # mm/s
    step_mm: float = 0.05
    max_advance_mm: float = 1e9  # stop after this much commanded advance
    max_steps: int = 100_000
    stall_window: int = 20
    stall_fraction: float = 0.1

    @property
    def dt(self) -> float:
        return self.step_mm / self.v_par


@dataclass
class Trajectory:
    """Per-step records of one insertion run."""

    t: list = field(default_factory=list)
    depth_alpha_deg: list = field(default_factory=list)
    Lambda0: list = field(default_factory=list)
    tip_pos: list = field(default_factory=list)
    tip_s: list = field(default_factory=list)
    base_pose: list = field(default_factory=list)
    q: list = field(default_factory=list)
    stall_flag: list = field(default_factory=list)
    pair_rows: list = field(default_factory=list)
    termination: str = "completed"

    @property
    def n_steps(self):
        return len(self.t)

    def force_magnitude(self):
        lam = np.asarray(self.Lambda0)
        return np.linalg.norm(lam[:, 3:], axis=1)

    def lateral_force(self):
        lam = np.asarray(self.Lambda0)
        return lam[:, 4:6]

    def alpha_max(self):
        return max(self.depth_alpha_deg) if self.depth_alpha_deg else 0.0


class Simulation:
    """One rod inside one lumen, stepped quasi-statically with contact."""

    def __init__(
        self,
        lumen,
        rod,
        mu=0.58,
        eps=1e-3,
        n_stations=64,
        distal_refine=False,
        dt=0.05,
        viscosity="auto",
        viscosity_factor=0.1,
        newton_tol=1e-8,
        newton_max_iter=30,
        jacobian="analytic",
        g_b0=None,
    ):
        self.lumen = lumen
        self.rod = rod
        self.mu = float(mu)
        self.frictionless = self.mu == 0.0
        self.eps = float(eps)
        self.dt = float(dt)
        self.newton_tol = float(newton_tol)
        self.newton_max_iter = int(newton_max_iter)
        self.jacobian_mode = jacobian

        self.stations = station_layout(rod.length, n_stations, distal_refine)
        self.M = len(self.stations)
        self.grid = rd.evaluation_grid(rod, extra=np.concatenate(
            [self.stations, [0.0]]))
        self._st_idx = np.searchsorted(self.grid, np.round(self.stations, 12))

        self.K, D_unit = rod.assemble_KD()
        if viscosity == "auto":
            self.nu = rd.auto_viscosity(self.K, D_unit, self.dt,
                                        factor=viscosity_factor)
        else:
            self.nu = float(viscosity)
        self.D = self.nu * D_unit
        self.Ns = rod.n_strain
        self._Kss = self.K[6:, 6:]
        self._Dss = self.D[6:, 6:]

        r_ea = rod.radius_at(self.stations)
        self.contacts = ct.ContactSet(lumen, self.stations, r_ea,
                                      self.mu, self.eps)

        if g_b0 is None:
            g_b0 = np.eye(4)
        self.state = DaeState(
            rod_state=rd.RodState.rest(rod, g_b=g_b0),
            lam=np.tile([1.0, 0.0, 0.0], self.M),
            Lambda0=np.zeros(6),
        )
        # spatial dead loads [(arc length, world force 3-vector)]
        self.dead_loads = []
        self._qdot_base = np.zeros(6)
        self._kin = None
        self.refresh_contacts()

    # -- geometry refresh -----------------------------------------------------

    def kinematics(self, q=None, qdot=None):
        rs = self.state.rod_state
        st = rd.RodState(q=rs.q if q is None else q,
                         qdot=rs.qdot if qdot is None else qdot,
                         g_b=rs.g_b)
        return rd.kinematics(self.rod, st, self.grid)

    def refresh_contacts(self, kin=None):
        """Re-project stations and freeze contact frames for the next solve."""
        if kin is None:
            kin = self.kinematics()
        self._kin = kin
        p = kin.poses[self._st_idx][:, :3, 3]
        res = self.contacts.refresh(p)
        # slack warm start for stations that just became enabled
        lam = self.state.lam.reshape(self.M, 3)
        fresh = self.contacts.enabled & ~getattr(self, "_was_enabled",
                                                 np.zeros(self.M, bool))
        if fresh.any():
            d0 = ct.normal_gap_many(self.contacts.g_c[fresh],
                                    kin.poses[self._st_idx][fresh],
                                    self.contacts.r_ea[fresh])
            lam[fresh, 0] = np.maximum(d0, self.eps)
            lam[fresh, 1:] = 0.0
        self._was_enabled = self.contacts.enabled.copy()
        self.state.lam = lam.ravel()
        return res

    # -- residual -------------------------------------------------------------

    def _contact_terms(self, kin, qdot, lam, want_partials=False,
                       partials_floor=None):
        """Per-station quantities for the frozen contact frames."""
        g_st = kin.poses[self._st_idx]
        J_st = kin.J[self._st_idx]
        g_c = self.contacts.g_c
        rel = np.einsum("kij,kjl->kil", _pose_inv_batch(g_c), g_st)
        Ad = lg.adjoint_pose_batch(rel)
        d_n = ct.normal_gap_many(g_c, g_st, self.contacts.r_ea)
        eta = J_st @ qdot
        v_t = np.einsum("kij,kj->ki", Ad[:, 4:6, :], eta)
        force, ex = ct.slack_force_many(lam.reshape(self.M, 3), self.mu,
                                        self.eps, want_partials=want_partials,
                                        partials_floor=partials_floor)
        if self.frictionless:
            force = force.copy()
            force[:, 1:] = 0.0
            if want_partials:
                ex["dforce"] = ex["dforce"].copy()
                ex["dforce"][:, 1:, :] = 0.0
        lam_c = np.concatenate([np.zeros((self.M, 3)), force], axis=1)
        lam_e = np.einsum("kji,kj->ki", Ad, lam_c)
        return {
            "g_st": g_st, "J_st": J_st, "Ad": Ad, "d_n": d_n, "eta": eta,
            "v_t": v_t, "force": force, "ex": ex, "lam_c": lam_c,
            "lam_e": lam_e,
        }

    def _reduced_residual(self, z, q_strain_prev, dt, collect=False):
        """Residual of the (q_strain, lam) system with frozen contact frames."""
        q_strain = z[:self.Ns]
        lam = z[self.Ns:]
        q = np.concatenate([np.zeros(6), q_strain])
        qdot = np.concatenate([self._qdot_base,
                               (q_strain - q_strain_prev) / dt])
        kin = self.kinematics(q=q, qdot=qdot)
        terms = self._contact_terms(kin, qdot, lam)
        en = self.contacts.enabled
        F_e = np.einsum("kiN,ki->N", terms["J_st"][en], terms["lam_e"][en])
        F_e = F_e + self._dead_load_force(kin)
        elastic = self.D @ qdot + self.K @ q
        r_dyn = elastic - F_e
        terms["scale"] = 1.0 + max(np.abs(elastic).max(),
                                   np.abs(F_e).max() if np.ndim(F_e) else 0.0)
        ex = terms["ex"]
        r_c = np.empty((self.M, 3))
        u = lam.reshape(self.M, 3)
        r_c[:, 0] = terms["d_n"] - ct.smooth_plus(u[:, 0], self.eps)
        if self.frictionless:
            # tangential slacks carry no force: keep them parked at zero
            r_c[:, 1:] = u[:, 1:]
        else:
            # dt scaling puts the velocity rows on the displacement scale
            # of the other residual rows (merit-function conditioning)
            r_c[:, 1:] = dt * (terms["v_t"] - ex["Dx"][:, None] * ex["t"])
        r_c[~en, 0] = u[~en, 0] - 1.0
        r_c[~en, 1:] = u[~en, 1:]
        res = np.concatenate([r_dyn[6:], r_c.ravel()])
        if collect:
            return res, kin, terms, r_dyn
        return res

    def assemble_residual(self, state: DaeState, state_prev: DaeState, dt):
        """Full stacked residual [R_dyn(N); R_bc(6); R_contact(3M)].

        R_dyn covers all q rows including the base block, where the applied
        base wrench enters through J0^T Lambda0 = [Lambda0; 0]; applied
        wrenches are subtracted from the elastic/viscous terms. R_bc is the
        prescribed-base condition, zero by construction after a step.
        """
        if len(state.lam) != 3 * self.M:
            raise DimensionMismatch("slack vector does not match stations")
        if len(state.rod_state.q) != self.rod.dim_q:
            raise DimensionMismatch("q does not match rod discretization")
        q = state.rod_state.q
        qdot = state.rod_state.qdot
        kin = rd.kinematics(self.rod, state.rod_state, self.grid)
        terms = self._contact_terms(kin, qdot, state.lam)
        en = self.contacts.enabled
        F_e = np.einsum("kiN,ki->N", terms["J_st"][en], terms["lam_e"][en])
        F_e = F_e + self._dead_load_force(kin)
        r_dyn = self.D @ qdot + self.K @ q - F_e
        r_dyn[:6] -= state.Lambda0
        r_bc = q[:6].copy()
        ex = terms["ex"]
        u = state.lam.reshape(self.M, 3)
        r_c = np.empty((self.M, 3))
        r_c[:, 0] = terms["d_n"] - ct.smooth_plus(u[:, 0], self.eps)
        if self.frictionless:
            r_c[:, 1:] = u[:, 1:]
        else:
            r_c[:, 1:] = dt * (terms["v_t"] - ex["Dx"][:, None] * ex["t"])
        r_c[~en, 0] = u[~en, 0] - 1.0
        r_c[~en, 1:] = u[~en, 1:]
        return np.concatenate([r_dyn, r_bc, r_c.ravel()])

    def _dead_load_force(self, kin):
        """Generalized force of spatial point forces (testing/statics)."""
        if not self.dead_loads:
            return 0.0
        out = np.zeros(self.rod.dim_q)
        for s, f_world in self.dead_loads:
            g = kin.pose(s)
            wrench = np.concatenate([np.zeros(3), g[:3, :3].T @ f_world])
            out += kin.jacobian(s).T @ wrench
        return out

    # -- Newton matrix ----------------------------------------------------------

    def _analytic_matrix(self, kin, qdot, lam, dt):
        """Derivative of the reduced residual, geometry frozen at the iterate."""
        M, Ns = self.M, self.Ns
        terms = self._contact_terms(kin, qdot, lam, want_partials=True,
                                    partials_floor=self.eps)
        en = self.contacts.enabled
        J_s = terms["J_st"][:, :, 6:]  # (M,6,Ns)
        Ad = terms["Ad"]
        ex = terms["ex"]
        A = np.zeros((Ns + 3 * M, Ns + 3 * M))
        A[:Ns, :Ns] = self._Kss + self._Dss / dt
        # dF_e/du blocks: Ad^T [0; dforce]
        W = np.einsum("kij,kil->kjl", Ad[:, 3:, :], ex["dforce"])  # (M,6,3)
        blocks = np.einsum("kiN,kil->kNl", J_s, W)  # (M,Ns,3)
        # contact rows
        n_body = np.einsum("kij,ki->kj", terms["g_st"][:, :3, :3],
                           self.contacts.g_c[:, :3, 0])
        drow_n = np.einsum("ki,kiN->kN", n_body, J_s[:, 3:, :])  # (M,Ns)
        AdJ = np.einsum("kij,kjN->kiN", Ad[:, 4:6, :], J_s)  # (M,2,Ns)
        dDn_u = ct.smooth_plus_derivative(lam.reshape(M, 3)[:, 0], self.eps)
        t = ex["t"]
        dfric_un = -(ex["dDx"] * self.mu * ex["dDn"])[:, None] * t  # (M,2)
        dfric_ut = -(ex["dDx"][:, None, None]
                     * np.einsum("ki,kj->kij", t, t)
                     + ex["Dx"][:, None, None] * ex["dt_du"])  # (M,2,2)
        for k in range(M):
            c = Ns + 3 * k
            if not en[k]:
                A[c:c + 3, c:c + 3] = np.eye(3)
                continue
            A[:Ns, c:c + 3] = -blocks[k]
            A[c, :Ns] = drow_n[k]
            A[c, c] = -dDn_u[k]
            if self.frictionless:
                A[c + 1:c + 3, c + 1:c + 3] = np.eye(2)
            else:
                A[c + 1:c + 3, :Ns] = AdJ[k]
                A[c + 1:c + 3, c] = dt * dfric_un[k]
                A[c + 1:c + 3, c + 1:c + 3] = dt * dfric_ut[k]
        return A

    def _fd_matrix(self, z, q_strain_prev, dt):
        """Forward-difference Jacobian of the reduced residual (column-wise)."""
        base = self._reduced_residual(z, q_strain_prev, dt)
        A = np.zeros((len(base), len(z)))
        for j in range(len(z)):
            h = 1e-7 * (1.0 + abs(z[j]))
            zp = z.copy()
            zp[j] += h
            A[:, j] = (self._reduced_residual(zp, q_strain_prev, dt) - base) / h
        return A

    # -- stepping ----------------------------------------------------------------

    def newton_solve(self, q_strain_prev, dt, tol=None, max_iter=None,
                     refresh_every=None):
        """Solve the implicit-Euler step for (q_strain, lam) in place.

        Armijo backtracking on the squared residual norm; raises
        NonConvergence (a stall/buckling indicator) when the iteration fails.
        ``refresh_every`` re-projects the frozen contact frames at the
        current iterate every so many iterations (an outer fixed point on
        the lagged geometry, needed when the rod slides along tightly
        curving walls). Returns the iteration count.
        """
        tol = self.newton_tol if tol is None else tol
        max_iter = self.newton_max_iter if max_iter is None else max_iter
        st = self.state
        z = np.concatenate([st.rod_state.q[6:], st.lam])
        res, kin, terms, r_dyn = self._reduced_residual(
            z, q_strain_prev, dt, collect=True)
        tol_eff = tol * terms["scale"]
        norm = np.abs(res).max()
        it = 0
        force_fd = self.jacobian_mode == "fd"
        fd_retry = False
        while norm >= tol_eff and it < max_iter:
            if refresh_every and it and it % refresh_every == 0:
                # caller owns a snapshot: state is scratch during the solve
                self.state.rod_state.q = np.concatenate(
                    [np.zeros(6), z[:self.Ns]])
                self.state.lam = z[self.Ns:].copy()
                self.refresh_contacts(kin)
                z = np.concatenate([z[:self.Ns], self.state.lam])
                res, kin, terms, r_dyn = self._reduced_residual(
                    z, q_strain_prev, dt, collect=True)
                norm = np.abs(res).max()
                if norm < tol_eff:
                    break
            qdot = np.concatenate([self._qdot_base,
                                   (z[:self.Ns] - q_strain_prev) / dt])
            if force_fd or fd_retry:
                A = self._fd_matrix(z, q_strain_prev, dt)
            else:
                A = self._analytic_matrix(kin, qdot, z[self.Ns:], dt)
            try:
                dz = np.linalg.solve(A, -res)
            except np.linalg.LinAlgError:
                break
            # Armijo backtracking on |res|^2
            f0 = float(res @ res)
            alpha = 1.0
            accepted = False
            while alpha >= 1e-4:
                z_try = z + alpha * dz
                res_try, kin_try, terms_try, r_dyn_try = \
                    self._reduced_residual(z_try, q_strain_prev, dt,
                                           collect=True)
                if float(res_try @ res_try) <= f0 * (1.0 - 1e-4 * alpha):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                if not (force_fd or fd_retry):
                    # frozen-geometry matrix stagnated: one exact retry
                    fd_retry = True
                    continue
                break  # stagnated; the final tolerance check decides
            fd_retry = False
            z, res, kin, terms, r_dyn = z_try, res_try, kin_try, terms_try, \
                r_dyn_try
            norm = np.abs(res).max()
            it += 1
        if norm >= tol_eff:
            raise NonConvergence(it, float(norm))
        # commit
        st.rod_state.q = np.concatenate([np.zeros(6), z[:self.Ns]])
        st.rod_state.qdot = np.concatenate(
            [self._qdot_base, (z[:self.Ns] - q_strain_prev) / dt])
        st.lam = z[self.Ns:]
        st.Lambda0 = r_dyn[:6].copy()
        self._kin = kin
        self._terms = terms
        return it

    def _snapshot(self):
        return (self.state.copy(),
                None if self.contacts.X is None else self.contacts.X.copy(),
                self.contacts.g_c.copy(), self.contacts.enabled.copy(),
                self._was_enabled.copy(), self._qdot_base.copy())

    def _restore(self, snap):
        self.state = snap[0].copy()
        self.contacts.X = None if snap[1] is None else snap[1].copy()
        self.contacts.g_c = snap[2].copy()
        self.contacts.enabled = snap[3].copy()
        self._was_enabled = snap[4].copy()
        self._qdot_base = snap[5].copy()

    def step(self, g_b_new, dt=None, _depth=0):
        """Advance one implicit-Euler step with the prescribed base pose.

        On Newton failure the contact frames are refreshed at the current
        iterate and the solve retried (fixed-point on the frozen geometry);
        persistent failure subdivides the base motion. A step that still
        fails after subdivision propagates NonConvergence, which callers
        treat as a stall/buckling indicator.
        """
        dt = self.dt if dt is None else dt
        st = self.state
        snap = self._snapshot()
        g_b_prev = st.rod_state.g_b
        self._qdot_base = lg.log_se3(lg.pose_inv(g_b_prev) @ g_b_new) / dt
        st.rod_state.g_b = np.array(g_b_new, dtype=float)
        q_strain_prev = st.rod_state.q[6:].copy()
        kin = self.kinematics(q=st.rod_state.q, qdot=st.rod_state.qdot)
        self.refresh_contacts(kin)
        self._warm_start_friction(kin, dt, q_strain_prev)
        iters = 0
        for attempt in range(2):
            try:
                iters += self.newton_solve(q_strain_prev, dt,
                                           max_iter=60, refresh_every=12)
                st.t += dt
                st.step += 1
                return iters
            except NonConvergence:
                if attempt == 1:
                    break
                # re-project at the struggling iterate and try again
                self._restore(snap)
                self._qdot_base = lg.log_se3(
                    lg.pose_inv(g_b_prev) @ np.asarray(g_b_new, float)) / dt
                st = self.state
                st.rod_state.g_b = np.array(g_b_new, dtype=float)
                q_strain_prev = st.rod_state.q[6:].copy()
                self.refresh_contacts()
        self._restore(snap)
        if _depth >= 4:
            raise NonConvergence(iters, float("nan"))
        inc = lg.log_se3(lg.pose_inv(g_b_prev) @ np.asarray(g_b_new, float))
        g_mid = g_b_prev @ lg.exp_se3(0.5 * inc, 1.0)
        try:
            sub_iters = self.step(g_mid, 0.5 * dt, _depth=_depth + 1)
            sub_iters += self.step(g_b_new, 0.5 * dt, _depth=_depth + 1)
        except NonConvergence:
            self._restore(snap)  # leave the caller a clean pre-step state
            raise
        self.state.step -= 1  # subdivided halves count as one step
        return iters + sub_iters

    def _warm_start_friction(self, kin, dt, q_strain_prev):
        """Seed tangential slacks from u_t = v_t - Lambda_t of the predictor.

        Continuous across stick (v ~ 0, u = -Lambda_prev) and slip
        (u tracks the sliding velocity); cuts the Newton iteration count.
        """
        st = self.state
        lam = st.lam.reshape(self.M, 3)
        if self.frictionless:
            lam[:, 1:] = 0.0
            st.lam = lam.ravel()
            return
        qdot = np.concatenate([self._qdot_base, np.zeros(self.Ns)])
        terms = self._contact_terms(kin, qdot, st.lam)
        lam_t_prev = terms["force"][:, 1:]
        en = self.contacts.enabled
        lam[en, 1:] = terms["v_t"][en] - lam_t_prev[en]
        st.lam = lam.ravel()

    # -- diagnostics ----------------------------------------------------------

    def tip_pose(self):
        return self._kin.pose(self.rod.length)

    def tip_surface_s(self):
        """Arc-length projection of the tip onto the lumen centerline."""
        return float(self.contacts.X[-1, 0])

    def station_forces(self):
        """(Lambda_n, Lambda_t(2)) per station at the current state."""
        force, _ = ct.slack_force_many(self.state.lam.reshape(self.M, 3),
                                       self.mu, self.eps)
        if self.frictionless:
            force = force.copy()
            force[:, 1:] = 0.0
        return force

    def active_pairs(self, threshold=None):
        """Stations bearing normal load above the smoothing resolution."""
        threshold = self.eps if threshold is None else threshold
        force = self.station_forces()
        return self.contacts.enabled & (force[:, 0] >= threshold)

    def pairs(self):
        """Current ContactPair list (frozen frames, current slacks)."""
        force = self.station_forces()
        active = self.active_pairs()
        g_st = self._kin.poses[self._st_idx]
        d_n = ct.normal_gap_many(self.contacts.g_c, g_st, self.contacts.r_ea)
        out = []
        for k in range(self.M):
            out.append(ct.ContactPair(
                k=k, s_rod=float(self.stations[k]),
                X=(float(self.contacts.X[k, 0]), float(self.contacts.X[k, 1])),
                g_c=self.contacts.g_c[k], d_n=float(d_n[k]),
                u=self.state.lam[3 * k:3 * k + 3].copy(),
                active=bool(active[k]),
            ))
        return out

    def balance_residual(self):
        """Sum of all wrenches transported to the spatial frame.

        Contact wrenches are transported from their contact frames, the base
        wrench from the base frame; statics demands the sum vanish.
        """
        en = self.contacts.enabled
        lam_c = np.concatenate([np.zeros((self.M, 3)),
                                self.station_forces()], axis=1)
        total = np.zeros(6)
        for k in np.flatnonzero(en):
            Ad = lg.adjoint_pose(lg.pose_inv(self.contacts.g_c[k]))
            total += Ad.T @ lam_c[k]
        g0 = self._kin.pose(0.0)
        total += lg.adjoint_pose(lg.pose_inv(g0)).T @ self.state.Lambda0
        return total

    def pair_dump_rows(self, step):
        force = self.station_forces()
        active = self.active_pairs()
        g_st = self._kin.poses[self._st_idx]
        d_n = ct.normal_gap_many(self.contacts.g_c, g_st, self.contacts.r_ea)
        # stick when the tangential slack sits inside the friction slice
        u = self.state.lam.reshape(self.M, 3)
        m = np.sqrt((u[:, 1:] ** 2).sum(axis=1) + ct.EPS_T**2)
        stick = (m - self.mu * force[:, 0]) < 0.0
        rows = []
        for k in range(self.M):
            if not self.contacts.enabled[k]:
                continue
            rows.append((step, k, float(self.stations[k]),
                         float(self.contacts.X[k, 0]),
                         float(self.contacts.X[k, 1]), float(d_n[k]),
                         float(force[k, 0]), float(force[k, 1]),
                         float(force[k, 2]), int(stick[k]), int(active[k])))
        return rows


def solve_static(sim: Simulation, settle_tol=1e-7, max_settle=60, tol=None):
    """Settle to static equilibrium at the current base pose.

    Repeats implicit pseudo-time steps with zero base motion until the
    strain update drops into the Newton noise floor; at the fixed point
    qdot ~ 0 and the state satisfies the static balance. settle_tol must
    stay above the Newton tolerance or the loop chases solver jitter.
    """
    sim._qdot_base = np.zeros(6)
    for _ in range(max_settle):
        prev = sim.state.rod_state.q[6:].copy()
        sim.refresh_contacts()
        sim.newton_solve(prev, sim.dt, tol=tol)
        if np.abs(sim.state.rod_state.q[6:] - prev).max() < settle_tol:
            return sim.state
    raise NonConvergence(max_settle, float("nan"))


def _pose_inv_batch(g):
    out = np.zeros_like(g)
    RT = np.swapaxes(g[:, :3, :3], 1, 2)
    out[:, :3, :3] = RT
    out[:, :3, 3] = -np.einsum("kij,kj->ki", RT, g[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


def run_insertion(sim: Simulation, protocol: InsertionProtocol,
                  base_pose_fn, controller=None, record_q=False,
                  record_pairs=False, balance_check=None):
    """March an insertion: per step, prescribe the base pose, converge the
    DAE, record the trajectory.

    base_pose_fn(i) supplies the base pose for step i; controller(sim, traj),
    when given, runs after each converged step (the planner uses it to steer
    subsequent poses). Stall is declared when tip advance over the trailing
    window drops below the commanded fraction. NonConvergence is recorded as
    the termination cause, not raised.
    """
    traj = Trajectory()
    commanded = protocol.v_par * protocol.dt
    n_steps = min(protocol.max_steps,
                  int(round(protocol.max_advance_mm / protocol.step_mm)))
    alpha_running = 0.0
    for i in range(n_steps):
        g_b = base_pose_fn(i)
        try:
            sim.step(g_b, dt=protocol.dt)
        except NonConvergence:
            traj.termination = "nonconvergence"
            break
        tip = sim.tip_pose()
        tip_s = sim.tip_surface_s()
        alpha = mt.angle_of_arc(sim.lumen, tip_s)
        alpha_running = max(alpha_running, alpha)
        traj.t.append(sim.state.t)
        traj.depth_alpha_deg.append(alpha_running)
        traj.Lambda0.append(sim.state.Lambda0.copy())
        traj.tip_pos.append(tip[:3, 3].copy())
        traj.tip_s.append(tip_s)
        traj.base_pose.append(sim.state.rod_state.g_b.copy())
        if record_q:
            traj.q.append(sim.state.rod_state.q.copy())
        if record_pairs:
            traj.pair_rows.extend(sim.pair_dump_rows(sim.state.step))
        if balance_check is not None:
            balance_check(sim)
        stalled = False
        w = protocol.stall_window
        if len(traj.tip_s) > w:
            advance = traj.tip_s[-1] - traj.tip_s[-1 - w]
            stalled = advance < protocol.stall_fraction * commanded * w
        traj.stall_flag.append(int(stalled))
        if stalled:
            traj.termination = "stall"
            break
        if controller is not None:
            controller(sim, traj)
    return traj
