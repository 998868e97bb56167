"""Exact SE(3)/SO(3)/se(3) kernel: hat/vee, exp, log, adjoints.

Conventions used everywhere in this package:

* a pose is a 4x4 homogeneous matrix ``g = [[R, p], [0, 1]]`` with ``R`` a
  rotation (dimensionless) and ``p`` a position in mm;
* a twist is a 6-vector ordered ``[angular(3); linear(3)]`` -- strains
  ``(kappa, epsilon)``, velocities ``(omega, v)``;
* a wrench is a 6-vector ordered ``[torque(3); force(3)]`` (N*mm, N).

All closed forms use Rodrigues + V-matrix expressions with a smooth Taylor
branch below ``SMALL_ANGLE`` so exp/log are continuous across the switch.
Everything is a pure function of ndarray values and thread-safe.
"""

from __future__ import annotations

import numpy as np

from .errors import NearPiRotation

# Branch point for the small-angle Taylor series.
SMALL_ANGLE = 1e-6

_EYE3 = np.eye(3)
_EYE4 = np.eye(4)


def skew(v):
    """3x3 skew-symmetric matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(m):
    """Inverse of :func:`skew`."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def pose(R, p):
    """Assemble a 4x4 pose from rotation and position."""
    g = np.eye(4)
    g[:3, :3] = R
    g[:3, 3] = p
    return g


def rotation(g):
    return np.asarray(g)[:3, :3]


def position(g):
    return np.asarray(g)[:3, 3]


def pose_inv(g):
    """Inverse of a pose, using the rigid-transform structure."""
    R = g[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ g[:3, 3]
    return out


def check_pose(g, tol=1e-10):
    """True when the rotation block is orthonormal with det +1 within tol."""
    R = g[:3, :3]
    return (
        np.abs(R.T @ R - _EYE3).max() <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def hat(xi):
    """se(3) matrix of a twist: skew(angular) upper-left, linear last column."""
    xi = np.asarray(xi, dtype=float)
    m = np.zeros((4, 4))
    m[:3, :3] = skew(xi[:3])
    m[:3, 3] = xi[3:]
    return m


def vee(m, tol=1e-9):
    """Twist of an se(3) matrix.

    Rejects matrices whose upper-left block is not skew-symmetric or whose
    last row is not zero beyond ``tol``.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise ValueError("vee expects a 4x4 matrix")
    if np.abs(m[:3, :3] + m[:3, :3].T).max() > tol or np.abs(m[3, :]).max() > tol:
        raise ValueError("matrix does not have se(3) structure")
    return np.concatenate([unskew(m[:3, :3]), m[:3, 3]])


def _rot_coeffs(theta):
    """Rodrigues/V-matrix coefficients A, B, C for one angle.

    A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3, with a Taylor
    branch below SMALL_ANGLE (cancellation-free via half-angle for B).
    """
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        A = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        B = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        return A, B, C
    s = np.sin(theta)
    half = np.sin(0.5 * theta)
    A = s / theta
    B = 2.0 * half * half / (theta * theta)
    C = (1.0 - A) / (theta * theta)
    return A, B, C


def exp_so3(w):
    """SO(3) exponential of a rotation vector (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    A, B, _ = _rot_coeffs(theta)
    K = skew(w)
    return _EYE3 + A * K + B * (K @ K)


def log_so3(R):
    """Rotation vector of a rotation matrix; raises near a half turn."""
    tr = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    if theta >= np.pi - 1e-6:
        raise NearPiRotation(f"rotation angle {theta:.9f} within 1e-6 of pi")
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    return w * (theta / np.sin(theta))


def exp_se3(xi, ell=1.0):
    """SE(3) exponential of a twist scaled by arc length ``ell``.

    Returns exp(hat(xi) * ell) in closed form: Rodrigues for the rotation,
    V-matrix for the translation.
    """
    xi = np.asarray(xi, dtype=float)
    w = xi[:3] * ell
    u = xi[3:] * ell
    theta = np.linalg.norm(w)
    A, B, C = _rot_coeffs(theta)
    K = skew(w)
    K2 = K @ K
    g = np.eye(4)
    g[:3, :3] = _EYE3 + A * K + B * K2
    g[:3, 3] = (_EYE3 + B * K + C * K2) @ u
    return g


def log_se3(g):
    """SE(3) logarithm as a twist; inverse of exp_se3(., 1).

    Raises NearPiRotation for rotation angles within 1e-6 of pi, where the
    axis (and hence the twist) is not recoverable to the accuracy this
    package guarantees.
    """
    w = log_so3(g[:3, :3])
    theta = np.linalg.norm(w)
    K = skew(w)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        Vinv = _EYE3 - 0.5 * K + (1.0 / 12.0 + theta * theta / 720.0) * K2
    else:
        A, B, _ = _rot_coeffs(theta)
        Vinv = _EYE3 - 0.5 * K + (1.0 - 0.5 * A / B) / (theta * theta) * K2
    return np.concatenate([w, Vinv @ g[:3, 3]])


def adjoint_pose(g):
    """Ad_g, mapping body twists to the parent frame: [[R,0],[skew(p)R,R]]."""
    R = g[:3, :3]
    p = g[:3, 3]
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[3:, :3] = skew(p) @ R
    return out


def adjoint_twist(xi):
    """ad_xi = [[skew(kappa),0],[skew(eps),skew(kappa)]]."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros((6, 6))
    K = skew(xi[:3])
    out[:3, :3] = K
    out[3:, 3:] = K
    out[3:, :3] = skew(xi[3:])
    return out


def dexp_se3(y, tol=1e-17, max_terms=30):
    """Tangent map T(y) = sum_k ad_y^k / (k+1)!.

    Satisfies exp(y)^-1 d/dt exp(y(t)) = hat(T(-y) ydot), which is the form
    needed to differentiate pose chains built from exponentials.
    """
    y = np.asarray(y, dtype=float)
    A = adjoint_twist(y)
    out = np.eye(6)
    term = np.eye(6)
    for k in range(1, max_terms):
        term = term @ A / (k + 1.0)
        out = out + term
        if np.abs(term).max() < tol:
            break
    return out


# ---------------------------------------------------------------------------
# Batched variants (used in kinematics and surface evaluation hot paths).
# ---------------------------------------------------------------------------


def skew_batch(v):
    """(n,3) -> (n,3,3) skew matrices."""
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _rot_coeffs_batch(theta):
    theta = np.asarray(theta, dtype=float)
    t2 = theta * theta
    small = theta < SMALL_ANGLE
    # Taylor branch everywhere, then overwrite the regular entries.
    A = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
    B = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    if np.any(~small):
        th = np.where(small, 1.0, theta)
        s = np.sin(th)
        half = np.sin(0.5 * th)
        A = np.where(small, A, s / th)
        B = np.where(small, B, 2.0 * half * half / (th * th))
        C = np.where(small, C, (1.0 - s / th) / (th * th))
    return A, B, C


def exp_se3_batch(xi, ell):
    """Batched exp: (n,6) twists, (n,) lengths -> (n,4,4) poses."""
    xi = np.asarray(xi, dtype=float)
    ell = np.asarray(ell, dtype=float).reshape(-1, 1)
    w = xi[:, :3] * ell
    u = xi[:, 3:] * ell
    theta = np.linalg.norm(w, axis=1)
    A, B, C = _rot_coeffs_batch(theta)
    K = skew_batch(w)
    K2 = K @ K
    n = xi.shape[0]
    g = np.zeros((n, 4, 4))
    g[:, 3, 3] = 1.0
    g[:, :3, :3] = _EYE3 + A[:, None, None] * K + B[:, None, None] * K2
    V = _EYE3 + B[:, None, None] * K + C[:, None, None] * K2
    g[:, :3, 3] = np.einsum("nij,nj->ni", V, u)
    return g


def adjoint_twist_batch(xi):
    """(n,6) -> (n,6,6) ad matrices."""
    xi = np.asarray(xi, dtype=float)
    n = xi.shape[0]
    out = np.zeros((n, 6, 6))
    K = skew_batch(xi[:, :3])
    out[:, :3, :3] = K
    out[:, 3:, 3:] = K
    out[:, 3:, :3] = skew_batch(xi[:, 3:])
    return out


def adjoint_pose_batch(g):
    """(n,4,4) poses -> (n,6,6) Ad_g matrices."""
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    R = g[:, :3, :3]
    out = np.zeros((n, 6, 6))
    out[:, :3, :3] = R
    out[:, 3:, 3:] = R
    out[:, 3:, :3] = skew_batch(g[:, :3, 3]) @ R
    return out


def adjoint_pose_inv_batch(g):
    """(n,4,4) poses -> (n,6,6) Ad_{g^-1} matrices."""
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    RT = np.swapaxes(g[:, :3, :3], 1, 2)
    pinv = -np.einsum("nij,nj->ni", RT, g[:, :3, 3])
    out = np.zeros((n, 6, 6))
    out[:, :3, :3] = RT
    out[:, 3:, 3:] = RT
    out[:, 3:, :3] = skew_batch(pinv) @ RT
    return out


def dexp_se3_batch(y, tol=1e-17, max_terms=30):
    """Batched T(y): (n,6) -> (n,6,6)."""
    A = adjoint_twist_batch(y)
    n = A.shape[0]
    out = np.broadcast_to(np.eye(6), (n, 6, 6)).copy()
    term = out.copy()
    for k in range(1, max_terms):
        term = term @ A / (k + 1.0)
        out += term
        if np.abs(term).max() < tol:
            break
    return out
