import numpy as np
import pytest
import scipy.linalg

from endorecon.geometry import (
    PinholeCamera,
    PoseChain,
    bilinear_sample,
    bilinear_sample_with_gradient,
    reorthonormalize,
    rotation_defect,
    se3_exp,
    se3_inverse,
    se3_log,
    so3_exp,
    so3_hat,
    so3_left_jacobian,
    so3_left_jacobian_inv,
    so3_log,
    so3_vee,
    transform_points,
)


def _twist_hat(xi):
    """4x4 matrix form of a twist, for the matrix-exponential oracle."""
    M = np.zeros((4, 4))
    M[:3, :3] = so3_hat(xi[:3])
    M[:3, 3] = xi[3:]
    return M


def _random_twists(n, seed, max_angle=3.0):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angles = rng.uniform(1e-6, max_angle, size=n)
    v = rng.uniform(-1.0, 1.0, size=(n, 3))
    return np.hstack([axis * angles[:, None], v])


class TestSO3:
    def test_hat_vee_round_trip(self):
        w = np.array([0.3, -1.2, 2.5])
        assert np.array_equal(so3_vee(so3_hat(w)), w)

    def test_hat_is_cross_product(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a, b = rng.normal(size=(2, 3))
            np.testing.assert_allclose(so3_hat(a) @ b, np.cross(a, b), atol=1e-15)

    def test_exp_matches_matrix_exponential(self):
        for xi in _random_twists(20, seed=1):
            R = so3_exp(xi[:3])
            R_ref = scipy.linalg.expm(so3_hat(xi[:3]))
            np.testing.assert_allclose(R, R_ref, atol=1e-12)

    def test_exp_is_rotation(self):
        for xi in _random_twists(20, seed=2):
            R = so3_exp(xi[:3])
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_log_round_trip(self):
        for xi in _random_twists(20, seed=3):
            w = xi[:3]
            np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-9)

    def test_small_angle_branches_match_oracle(self):
        # Angles straddling the series/closed-form switchover.
        for theta in (1e-6, 0.99e-4, 1.01e-4, 1e-3):
            w = np.array([0.6, -0.8, 0.0]) * theta
            np.testing.assert_allclose(
                so3_exp(w), scipy.linalg.expm(so3_hat(w)), atol=1e-14
            )
            # Left Jacobian columns via the twist exponential's translation.
            for k in range(3):
                xi = np.concatenate([w, np.eye(3)[k]])
                col_ref = scipy.linalg.expm(_twist_hat(xi))[:3, 3]
                np.testing.assert_allclose(
                    so3_left_jacobian(w)[:, k], col_ref, atol=1e-14
                )

    def test_identity_log_is_zero(self):
        np.testing.assert_allclose(so3_log(np.eye(3)), np.zeros(3), atol=0.0)

    def test_log_raises_near_pi(self):
        w = np.array([np.pi - 1e-9, 0.0, 0.0])
        with pytest.raises(ValueError):
            so3_log(so3_exp(w))

    def test_log_survives_just_outside_pi_margin(self):
        w = np.array([np.pi - 1e-4, 0.0, 0.0])
        np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-6)

    def test_left_jacobian_inverse(self):
        for xi in _random_twists(20, seed=4):
            J = so3_left_jacobian(xi[:3])
            Jinv = so3_left_jacobian_inv(xi[:3])
            np.testing.assert_allclose(J @ Jinv, np.eye(3), atol=1e-10)


class TestSE3:
    def test_exp_matches_matrix_exponential(self):
        for xi in _random_twists(20, seed=5):
            T = se3_exp(xi)
            T_ref = scipy.linalg.expm(_twist_hat(xi))
            rel = np.abs(T - T_ref).max() / max(np.abs(T_ref).max(), 1.0)
            assert rel < 1e-9

    def test_log_round_trip(self):
        for xi in _random_twists(20, seed=6):
            np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)

    def test_exp_of_zero_is_identity(self):
        np.testing.assert_allclose(se3_exp(np.zeros(6)), np.eye(4), atol=0.0)

    def test_inverse(self):
        for xi in _random_twists(10, seed=7):
            T = se3_exp(xi)
            np.testing.assert_allclose(T @ se3_inverse(T), np.eye(4), atol=1e-12)
            np.testing.assert_allclose(se3_inverse(T) @ T, np.eye(4), atol=1e-12)

    def test_composition_associativity(self):
        a, b, c = (se3_exp(xi) for xi in _random_twists(3, seed=8))
        np.testing.assert_allclose((a @ b) @ c, a @ (b @ c), atol=1e-12)

    def test_transform_points_matches_homogeneous(self):
        rng = np.random.default_rng(9)
        T = se3_exp(_random_twists(1, seed=10)[0])
        pts = rng.normal(size=(7, 3))
        hom = np.hstack([pts, np.ones((7, 1))])
        ref = (T @ hom.T).T[:, :3]
        np.testing.assert_allclose(transform_points(T, pts), ref, atol=1e-12)


class TestReorthonormalize:
    def test_projects_back_to_rotation(self):
        rng = np.random.default_rng(11)
        T = se3_exp(_random_twists(1, seed=12)[0])
        T[:3, :3] += rng.normal(scale=1e-6, size=(3, 3))
        assert rotation_defect(T) > 1e-9
        fixed = reorthonormalize(T)
        assert rotation_defect(fixed) < 1e-12
        assert np.linalg.det(fixed[:3, :3]) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(fixed[:3, 3], T[:3, 3])

    def test_pose_chain_stays_on_manifold(self):
        rng = np.random.default_rng(13)
        chain = PoseChain()
        rel = se3_exp(np.array([1e-3, 2e-3, -1e-3, 0.01, 0.0, 0.005]))
        # Inject noise so drift actually accumulates.
        for _ in range(500):
            noisy = rel.copy()
            noisy[:3, :3] += rng.normal(scale=1e-12, size=(3, 3))
            chain.advance(noisy)
        assert rotation_defect(chain.pose) < 1e-9


class TestPinholeCamera:
    CAM = PinholeCamera(fx=300.0, fy=310.0, cx=159.5, cy=119.5, width=320, height=240)

    def test_project_known_point(self):
        # Point on the optical axis lands on the principal point.
        uv = self.CAM.project(np.array([[0.0, 0.0, 2.0]]))
        np.testing.assert_allclose(uv[0], [159.5, 119.5], atol=0.0)

    def test_project_backproject_round_trip(self):
        rng = np.random.default_rng(14)
        u = rng.uniform(0, self.CAM.width - 1, size=50)
        v = rng.uniform(0, self.CAM.height - 1, size=50)
        z = rng.uniform(0.05, 2.0, size=50)
        pts = self.CAM.backproject(u, v, z)
        uv = self.CAM.project(pts)
        np.testing.assert_allclose(uv[:, 0], u, atol=1e-10)
        np.testing.assert_allclose(uv[:, 1], v, atol=1e-10)
        np.testing.assert_allclose(pts[:, 2], z, atol=0.0)

    def test_nonpositive_depth_projects_invalid(self):
        uv = self.CAM.project(np.array([[0.1, 0.1, 0.0], [0.1, 0.1, -1.0]]))
        assert not np.isfinite(uv).any()

    def test_in_bounds(self):
        uv = np.array([
            [0.0, 0.0],
            [319.0, 239.0],
            [-0.01, 10.0],
            [319.01, 10.0],
            [10.0, np.nan],
        ])
        np.testing.assert_array_equal(
            self.CAM.in_bounds(uv), [True, True, False, False, False]
        )

    def test_scaled(self):
        half = self.CAM.scaled(0.5, 160, 120)
        assert half.fx == pytest.approx(150.0)
        assert half.cy == pytest.approx(59.75)
        assert (half.width, half.height) == (160, 120)


class TestBilinear:
    def test_integer_coordinates_return_pixels(self):
        rng = np.random.default_rng(15)
        img = rng.uniform(size=(6, 7))
        ys, xs = np.meshgrid(np.arange(6), np.arange(7), indexing="ij")
        vals, valid = bilinear_sample(img, xs.astype(float), ys.astype(float))
        assert valid.all()
        np.testing.assert_allclose(vals, img, atol=1e-15)

    def test_linear_ramp_is_exact(self):
        # A plane is reproduced exactly by bilinear interpolation.
        ys, xs = np.meshgrid(np.arange(8), np.arange(9), indexing="ij")
        img = 2.0 * xs + 3.0 * ys + 1.0
        rng = np.random.default_rng(16)
        x = rng.uniform(0, 8, size=40)
        y = rng.uniform(0, 7, size=40)
        vals, valid = bilinear_sample(img, x, y)
        assert valid.all()
        np.testing.assert_allclose(vals, 2.0 * x + 3.0 * y + 1.0, atol=1e-12)

    def test_out_of_bounds_invalid(self):
        img = np.ones((4, 4))
        vals, valid = bilinear_sample(
            img, np.array([-0.1, 3.1, 1.0]), np.array([1.0, 1.0, 3.0001])
        )
        np.testing.assert_array_equal(valid, [False, False, False])
        np.testing.assert_array_equal(vals[:2], [0.0, 0.0])

    def test_nonfinite_pixel_invalidates_sample(self):
        img = np.ones((4, 4))
        img[1, 2] = np.nan
        _, valid = bilinear_sample(img, np.array([1.5, 0.2]), np.array([1.0, 2.9]))
        np.testing.assert_array_equal(valid, [False, True])

    def test_gradient_matches_finite_differences_in_cell(self):
        rng = np.random.default_rng(17)
        img = rng.uniform(size=(10, 12))
        # Stay away from cell boundaries where the interpolant is not smooth.
        x = rng.uniform(0.3, 10.7, size=60)
        y = rng.uniform(0.3, 8.7, size=60)
        x = np.floor(x) + np.clip(x - np.floor(x), 0.25, 0.75)
        y = np.floor(y) + np.clip(y - np.floor(y), 0.25, 0.75)
        vals, dx, dy, valid = bilinear_sample_with_gradient(img, x, y)
        assert valid.all()
        h = 1e-6
        fd_x = (bilinear_sample(img, x + h, y)[0] - bilinear_sample(img, x - h, y)[0]) / (2 * h)
        fd_y = (bilinear_sample(img, x, y + h)[0] - bilinear_sample(img, x, y - h)[0]) / (2 * h)
        np.testing.assert_allclose(dx, fd_x, atol=1e-8)
        np.testing.assert_allclose(dy, fd_y, atol=1e-8)
        ref_vals, _ = bilinear_sample(img, x, y)
        np.testing.assert_array_equal(vals, ref_vals)

    def test_gradient_of_ramp(self):
        ys, xs = np.meshgrid(np.arange(5), np.arange(6), indexing="ij")
        img = 0.5 * xs - 1.5 * ys
        _, dx, dy, valid = bilinear_sample_with_gradient(
            img, np.array([2.3, 0.0, 4.9]), np.array([1.7, 0.0, 3.2])
        )
        assert valid.all()
        np.testing.assert_allclose(dx, 0.5, atol=1e-12)
        np.testing.assert_allclose(dy, -1.5, atol=1e-12)
