import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cochsim import liegroup as lg
from cochsim.errors import NearPiRotation


def integrate_pose_ode(xi, ell, n_steps=10_000):
    """Independent oracle: RK4 on the matrix ODE g' = g @ hat(xi)."""
    H = lg.hat(xi)
    g = np.eye(4)
    h = ell / n_steps
    for _ in range(n_steps):
        k1 = g @ H
        k2 = (g + 0.5 * h * k1) @ H
        k3 = (g + 0.5 * h * k2) @ H
        k4 = (g + h * k3) @ H
        g = g + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return g


class TestHatVee:
    def test_hat_zero(self):
        assert np.array_equal(lg.hat(np.zeros(6)), np.zeros((4, 4)))

    def test_round_trip_exact(self):
        xi = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        assert np.array_equal(lg.vee(lg.hat(xi)), xi)

    def test_skew_definition(self):
        m = lg.hat([0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], dtype=float)
        assert np.array_equal(m[:3, :3], expected)

    def test_vee_rejects_bad_structure(self):
        m = np.zeros((4, 4))
        m[0, 1] = 1.0  # not skew-symmetric against m[1,0]=0
        with pytest.raises(ValueError):
            lg.vee(m)
        m = lg.hat([1, 0, 0, 0, 0, 0])
        m[3, 0] = 1e-6
        with pytest.raises(ValueError):
            lg.vee(m)


class TestExp:
    def test_zero_twist(self):
        for ell in (0.0, 1.0, 7.3):
            assert np.array_equal(lg.exp_se3(np.zeros(6), ell), np.eye(4))

    def test_pure_translation(self):
        g = lg.exp_se3([0, 0, 0, 1, 0, 0], 2.0)
        assert np.allclose(g[:3, :3], np.eye(3))
        assert np.allclose(g[:3, 3], [2.0, 0.0, 0.0])

    def test_planar_arc_closed_form(self):
        # Quarter circle of radius 1: verified against RK4 integration of
        # g' = g hat(xi) with 1e4 steps.
        xi = np.array([0, 0, 1.0, 1.0, 0, 0])
        ell = np.pi / 2
        g = lg.exp_se3(xi, ell)
        assert np.allclose(g[:3, 3], [1.0, 1.0, 0.0], atol=1e-12)
        g_ref = integrate_pose_ode(xi, ell)
        assert np.abs(g - g_ref).max() < 1e-8

    def test_orthonormal_output(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            xi = rng.normal(size=6)
            g = lg.exp_se3(xi, rng.uniform(0.0, 2.0))
            assert lg.check_pose(g)

    def test_small_angle_branch_continuity(self):
        # Same geometric input evaluated just under and just over the branch
        # point must agree to far better than the branch tolerance.
        axis = np.array([1.0, 2.0, 2.0]) / 3.0
        for eps in (-1e-9, 1e-9):
            theta = lg.SMALL_ANGLE + eps
            xi = np.concatenate([axis * theta, [1.0, -0.5, 0.25]])
            below = lg.exp_se3(xi * (1 - 1e-15), 1.0)
            above = lg.exp_se3(xi * (1 + 1e-15), 1.0)
            assert np.abs(below - above).max() < 1e-12


class TestLog:
    def test_identity(self):
        assert np.allclose(lg.log_se3(np.eye(4)), np.zeros(6))

    def test_pure_translation(self):
        g = np.eye(4)
        g[:3, 3] = [2.0, 0.0, 0.0]
        assert np.allclose(lg.log_se3(g), [0, 0, 0, 2, 0, 0])

    def test_round_trip_specific(self):
        xi = np.array([0.1, 0.2, 0.3, 1.0, 0.0, 0.0])
        assert np.abs(lg.log_se3(lg.exp_se3(xi, 1.0)) - xi).max() < 1e-9

    def test_round_trip_random_1000(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            kappa = rng.normal(size=3)
            ell = rng.uniform(0.1, 2.0)
            # keep the rotation angle clear of pi
            kappa *= rng.uniform(0.0, np.pi - 0.1) / (np.linalg.norm(kappa) * ell)
            xi = np.concatenate([kappa, rng.normal(size=3)])
            rec = lg.log_se3(lg.exp_se3(xi, ell)) / ell
            worst = max(worst, np.abs(rec - xi).max())
        assert worst < 1e-9

    def test_near_pi_raises(self):
        g = lg.exp_se3([0, 0, 1, 0, 0, 0], np.pi - 1e-9)
        with pytest.raises(NearPiRotation):
            lg.log_se3(g)

    def test_exp_log_consistency_12_entries(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            xi = rng.normal(size=6)
            xi[:3] *= 2.5 / max(np.linalg.norm(xi[:3]), 1.0)
            g = lg.exp_se3(xi, 1.0)
            assert np.abs(lg.exp_se3(lg.log_se3(g), 1.0) - g).max() < 1e-9


class TestAdjoints:
    def test_identity_pose(self):
        assert np.array_equal(lg.adjoint_pose(np.eye(4)), np.eye(6))

    def test_pure_rotation_block_diag(self):
        R = lg.exp_so3([0.3, -0.2, 0.5])
        Ad = lg.adjoint_pose(lg.pose(R, np.zeros(3)))
        assert np.allclose(Ad[:3, :3], R)
        assert np.allclose(Ad[3:, 3:], R)
        assert np.allclose(Ad[3:, :3], 0.0)

    def test_homomorphism(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            g1 = lg.exp_se3(rng.normal(size=6), 1.0)
            g2 = lg.exp_se3(rng.normal(size=6), 1.0)
            lhs = lg.adjoint_pose(g1 @ g2)
            rhs = lg.adjoint_pose(g1) @ lg.adjoint_pose(g2)
            assert np.abs(lhs - rhs).max() < 1e-10

    def test_ad_zero(self):
        assert np.array_equal(lg.adjoint_twist(np.zeros(6)), np.zeros((6, 6)))

    def test_ad_self_annihilation(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            xi = rng.normal(size=6)
            assert np.abs(lg.adjoint_twist(xi) @ xi).max() < 1e-14

    def test_ad_derivative_identity(self):
        # d/dt Ad_{g(t)} = Ad_g ad_eta along g(t) = g0 exp(t eta), checked by
        # central differences.
        rng = np.random.default_rng(13)
        g0 = lg.exp_se3(rng.normal(size=6), 1.0)
        eta = rng.normal(size=6)
        h = 1e-6
        plus = lg.adjoint_pose(g0 @ lg.exp_se3(eta, h))
        minus = lg.adjoint_pose(g0 @ lg.exp_se3(eta, -h))
        fd = (plus - minus) / (2 * h)
        analytic = lg.adjoint_pose(g0) @ lg.adjoint_twist(eta)
        assert np.abs(fd - analytic).max() < 1e-6


class TestDexp:
    def test_zero_is_identity(self):
        assert np.allclose(lg.dexp_se3(np.zeros(6)), np.eye(6))

    def test_tangent_map_fd(self):
        # exp(y)^-1 d/dt exp(y + t dy) |_0 = hat(T(-y) dy)
        rng = np.random.default_rng(17)
        for _ in range(10):
            y = rng.normal(size=6) * 0.5
            dy = rng.normal(size=6)
            h = 1e-7
            gp = lg.exp_se3(y + h * dy, 1.0)
            gm = lg.exp_se3(y - h * dy, 1.0)
            body = lg.pose_inv(lg.exp_se3(y, 1.0)) @ ((gp - gm) / (2 * h))
            analytic = lg.hat(lg.dexp_se3(-y) @ dy)
            assert np.abs(body - analytic).max() < 1e-6


class TestBatched:
    def test_exp_matches_scalar(self):
        rng = np.random.default_rng(19)
        xi = rng.normal(size=(40, 6))
        ell = rng.uniform(0.0, 2.0, size=40)
        batch = lg.exp_se3_batch(xi, ell)
        for i in range(40):
            assert np.abs(batch[i] - lg.exp_se3(xi[i], ell[i])).max() < 1e-14

    def test_adjoint_inv_matches_scalar(self):
        rng = np.random.default_rng(23)
        g = lg.exp_se3_batch(rng.normal(size=(10, 6)), np.ones(10))
        batch = lg.adjoint_pose_inv_batch(g)
        for i in range(10):
            ref = lg.adjoint_pose(lg.pose_inv(g[i]))
            assert np.abs(batch[i] - ref).max() < 1e-13

    def test_dexp_matches_scalar(self):
        rng = np.random.default_rng(29)
        y = rng.normal(size=(10, 6)) * 0.5
        batch = lg.dexp_se3_batch(y)
        for i in range(10):
            assert np.abs(batch[i] - lg.dexp_se3(y[i])).max() < 1e-14


@given(
    st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6),
    st.floats(0.05, 2.0),
)
@settings(max_examples=200, deadline=None)
def test_exp_log_round_trip_property(xi_list, ell):
    xi = np.array(xi_list)
    ang = np.linalg.norm(xi[:3]) * ell
    if ang >= np.pi - 0.1:
        xi[:3] *= (np.pi - 0.2) / ang
    rec = lg.log_se3(lg.exp_se3(xi, ell)) / ell
    assert np.abs(rec - xi).max() < 1e-9
