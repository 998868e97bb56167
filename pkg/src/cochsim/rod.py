"""Geometrically exact Cosserat rod with piecewise-linear strain coordinates.

Generalized coordinates q = [q_base(6); q_strain(6*(n+1))]: a body-frame
exponential increment of the base pose plus nodal strain values. The strain
field is xi(s) = xi0(s) + Phi(s) q_strain with C0 hat functions; kinematics
chains midpoint-frozen SE(3) exponentials on a sub-step grid, and the
geometric Jacobian is the exact derivative of that discrete chain, so
J(s) qdot matches finite differences of the kinematics to machine-level
consistency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import liegroup as lg

STRAIGHT_XI0 = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])

# 2-point Gauss rule on [0,1]
_GAUSS_T = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_W = np.array([0.5, 0.5])


class RodModel:
    """Discretization plus material law of the electrode-array rod.

    Circular cross-section with linearly tapered radius; stiffness density
    K(s) = diag(GJ, EI, EI, EA, GA, GA) and viscous density D(s) =
    nu * diag(J, I, I, A, A, A). Units: mm, N, MPa, s.
    """

    def __init__(
        self,
        length=25.0,
        n_elements=12,
        youngs_mpa=25.2,
        poisson=0.45,
        base_diameter_mm=0.4,
        tip_diameter_mm=0.3,
        m_sub=8,
        xi0=None,
    ):
        self.length = float(length)
        self.sigma = np.linspace(0.0, self.length, n_elements + 1)
        self.E = float(youngs_mpa)
        self.poisson = float(poisson)
        self.G = self.E / (2.0 * (1.0 + self.poisson))
        self.r_base = 0.5 * float(base_diameter_mm)
        self.r_tip = 0.5 * float(tip_diameter_mm)
        self.m_sub = int(m_sub)
        if xi0 is None:
            xi0 = STRAIGHT_XI0
        xi0 = np.asarray(xi0, dtype=float)
        if xi0.ndim == 1:
            self.xi0_nodes = np.tile(xi0, (len(self.sigma), 1))
        else:
            if xi0.shape != (len(self.sigma), 6):
                raise ValueError("xi0 must be a 6-vector or per-node array")
            self.xi0_nodes = xi0.copy()

    # -- layout ---------------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.sigma)

    @property
    def n_strain(self) -> int:
        return 6 * self.n_nodes

    @property
    def dim_q(self) -> int:
        return 6 + self.n_strain

    def radius_at(self, s):
        return self.r_base + (self.r_tip - self.r_base) * np.asarray(s) / self.length

    def stiffness_density(self, s):
        """Diagonal of the 6x6 cross-section stiffness at s."""
        r = self.radius_at(s)
        A = np.pi * r**2
        I = np.pi * r**4 / 4.0
        Jp = 2.0 * I
        return np.stack([self.G * Jp, self.E * I, self.E * I,
                         self.E * A, self.G * A, self.G * A], axis=-1)

    def viscous_density(self, s):
        """Diagonal of the unit-viscosity 6x6 damping density at s."""
        r = self.radius_at(s)
        A = np.pi * r**2
        I = np.pi * r**4 / 4.0
        return np.stack([2.0 * I, I, I, A, A, A], axis=-1)

    # -- strain basis ---------------------------------------------------------

    def _element_of(self, s):
        idx = np.searchsorted(self.sigma, s, side="right") - 1
        return np.clip(idx, 0, self.n_nodes - 2)

    def basis_weights(self, s):
        """(element index, left weight, right weight) of the hat basis at s."""
        k = self._element_of(s)
        t = (np.asarray(s) - self.sigma[k]) / (self.sigma[k + 1] - self.sigma[k])
        return k, 1.0 - t, t

    def basis_eval(self, s):
        """Dense 6 x n_strain strain-basis row block at s."""
        k, w0, w1 = self.basis_weights(float(s))
        out = np.zeros((6, self.n_strain))
        out[:, 6 * k:6 * k + 6] = np.eye(6) * w0
        out[:, 6 * (k + 1):6 * (k + 1) + 6] = np.eye(6) * w1
        return out

    def strain_at(self, q_strain, s):
        """xi(s) = xi0(s) + Phi(s) q_strain, vectorized over s."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k, w0, w1 = self.basis_weights(s)
        nodal = self.xi0_nodes + q_strain.reshape(-1, 6)
        return w0[:, None] * nodal[k] + w1[:, None] * nodal[k + 1]

    # -- assembled matrices ----------------------------------------------------

    def assemble_KD(self):
        """(K, D_unit): stiffness and unit-viscosity matrices over q.

        Base rows and columns are zero (the base carries no elastic energy);
        strain blocks use 2-point Gauss per element. K acts on q_strain, the
        deviation from the reference strain.
        """
        n = self.dim_q
        K = np.zeros((n, n))
        D = np.zeros((n, n))
        for e in range(self.n_nodes - 1):
            h = self.sigma[e + 1] - self.sigma[e]
            for t, w in zip(_GAUSS_T, _GAUSS_W):
                s = self.sigma[e] + t * h
                wts = np.array([1.0 - t, t])
                kdiag = self.stiffness_density(s)
                ddiag = self.viscous_density(s)
                for a in range(2):
                    ia = 6 + 6 * (e + a)
                    for b in range(2):
                        ib = 6 + 6 * (e + b)
                        c = w * h * wts[a] * wts[b]
                        K[ia:ia + 6, ib:ib + 6] += np.diag(c * kdiag)
                        D[ia:ia + 6, ib:ib + 6] += np.diag(c * ddiag)
        return K, D


def auto_viscosity(K, D_unit, dt, factor=0.1):
    """Viscosity scale making the slowest strain mode settle in factor*dt."""
    Ks = K[6:, 6:]
    Ds = D_unit[6:, 6:]
    lam = scipy.linalg.eigh(Ks, Ds, eigvals_only=True,
                            subset_by_index=[0, 0])[0]
    return factor * dt * float(lam)


@dataclass
class RodState:
    """Configuration of one rod: base increment + nodal strains, and rates."""

    q: np.ndarray
    qdot: np.ndarray
    g_b: np.ndarray  # cached base pose; q[:6] is an increment on top of it

    @classmethod
    def rest(cls, rod: RodModel, g_b=None):
        if g_b is None:
            g_b = np.eye(4)
        return cls(q=np.zeros(rod.dim_q), qdot=np.zeros(rod.dim_q),
                   g_b=np.array(g_b, dtype=float))

    def copy(self):
        return RodState(q=self.q.copy(), qdot=self.qdot.copy(),
                        g_b=self.g_b.copy())


@dataclass
class Kinematics:
    """Poses and exact discrete Jacobians on the evaluation grid."""

    s_grid: np.ndarray  # (m,)
    poses: np.ndarray  # (m,4,4)
    J: np.ndarray  # (m,6,dim_q)
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {round(float(s), 12): i for i, s in enumerate(self.s_grid)}

    def at(self, s):
        i = self._index.get(round(float(s), 12))
        if i is None:
            raise KeyError(f"s={s} not on the kinematics grid")
        return i

    def pose(self, s):
        return self.poses[self.at(s)]

    def jacobian(self, s):
        return self.J[self.at(s)]


def evaluation_grid(rod: RodModel, extra=None):
    """Sub-step grid: m_sub intervals per element merged with extra points."""
    pieces = [np.linspace(rod.sigma[e], rod.sigma[e + 1], rod.m_sub + 1)
              for e in range(rod.n_nodes - 1)]
    grid = np.concatenate(pieces)
    if extra is not None:
        grid = np.concatenate([grid, np.asarray(extra, dtype=float)])
    grid = np.unique(np.round(grid, 12))
    return np.clip(grid, 0.0, rod.length)


def kinematics(rod: RodModel, state: RodState, s_grid=None,
               want_jacobian=True) -> Kinematics:
    """Integrate g' = g hat(xi) along the rod with midpoint-frozen strain.

    Each grid interval advances by exp(xi(s_mid) h); the Jacobian recursion
    differentiates exactly that chain (tangent maps of the exponentials), so
    J is the exact derivative of the discrete kinematics with respect to q.
    """
    if s_grid is None:
        s_grid = evaluation_grid(rod)
    m = len(s_grid)
    h = np.diff(s_grid)
    mids = 0.5 * (s_grid[:-1] + s_grid[1:])
    xi_mid = rod.strain_at(state.q[6:], mids)

    steps = lg.exp_se3_batch(xi_mid, h)
    poses = np.empty((m, 4, 4))
    g0 = state.g_b @ lg.exp_se3(state.q[:6], 1.0)
    poses[0] = g0
    for j in range(m - 1):
        poses[j + 1] = poses[j] @ steps[j]

    if not want_jacobian:
        return Kinematics(s_grid=s_grid, poses=poses,
                          J=np.zeros((m, 6, rod.dim_q)))

    ad_inv = lg.adjoint_pose_inv_batch(steps)
    T = lg.dexp_se3_batch(-xi_mid * h[:, None])
    k_el, w0, w1 = rod.basis_weights(mids)

    J = np.zeros((m, 6, rod.dim_q))
    J[0, :, :6] = lg.dexp_se3(-state.q[:6])
    cur = J[0].copy()
    for j in range(m - 1):
        cur = ad_inv[j] @ cur
        blk = h[j] * T[j]
        c0 = 6 + 6 * k_el[j]
        cur[:, c0:c0 + 6] += w0[j] * blk
        cur[:, c0 + 6:c0 + 12] += w1[j] * blk
        J[j + 1] = cur
    return Kinematics(s_grid=s_grid, poses=poses, J=J)


def forward_kinematics(rod: RodModel, state: RodState, s_out=None):
    """Poses g(s) at the requested output arc lengths (default: nodes)."""
    if s_out is None:
        s_out = rod.sigma
    s_out = np.atleast_1d(np.asarray(s_out, dtype=float))
    kin = kinematics(rod, state, evaluation_grid(rod, extra=s_out),
                     want_jacobian=False)
    return np.stack([kin.pose(s) for s in s_out])


def geometric_jacobian(rod: RodModel, state: RodState, s):
    """6 x dim_q body Jacobian at arc length s: eta(s) = J(s) qdot."""
    kin = kinematics(rod, state, evaluation_grid(rod, extra=[s]))
    return kin.jacobian(s)
