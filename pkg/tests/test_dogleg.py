import numpy as np
import pytest

from endorecon.dogleg import (
    DoglegStep,
    OptimizeResult,
    TrustRegionState,
    dogleg_step,
    gauss_newton_step,
    minimize_dogleg,
    trust_region_update,
)


class TestGaussNewtonStep:
    def test_solves_linear_least_squares(self):
        rng = np.random.default_rng(0)
        J = rng.normal(size=(20, 4))
        x_true = rng.normal(size=4)
        r = -(J @ x_true)  # residual at x=0 for target J x_true
        step = gauss_newton_step(J, r)
        np.testing.assert_allclose(step, x_true, rtol=1e-6)

    def test_one_dimensional_case(self):
        # J=2, r=-4: undamped optimum is exactly 2; damping shifts it by
        # a relative 1e-8 at most.
        step = gauss_newton_step(np.array([[2.0]]), np.array([-4.0]))
        assert step[0] == pytest.approx(2.0, rel=1e-6)

    def test_zero_jacobian_raises(self):
        with pytest.raises(np.linalg.LinAlgError):
            gauss_newton_step(np.zeros((3, 2)), np.ones(3))


class TestDoglegStep:
    def test_gauss_newton_returned_bit_for_bit_inside_radius(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            J = rng.normal(size=(15, 3))
            r = rng.normal(size=15)
            gn = gauss_newton_step(J, r)
            rho = np.linalg.norm(gn) * 1.5 + 1e-6
            step = dogleg_step(J, r, rho)
            assert step.kind == "gn"
            assert np.array_equal(step.dx, gn)

    def test_hand_case_clipped_cauchy(self):
        J = np.array([[2.0]])
        r = np.array([-4.0])
        step = dogleg_step(J, r, 0.5)
        assert step.kind == "cauchy-clipped"
        assert step.dx[0] == 0.5

    def test_hand_case_against_boundary_brute_force(self):
        # The model |r + J dx|^2 restricted to |dx| <= 0.5 bottoms out at
        # the boundary point the step returns.
        J = np.array([[2.0]])
        r = np.array([-4.0])
        step = dogleg_step(J, r, 0.5)
        grid = np.linspace(-0.5, 0.5, 100001)
        model = (r[0] + J[0, 0] * grid) ** 2
        best = grid[np.argmin(model)]
        assert step.dx[0] == pytest.approx(best, abs=1e-4)

    def test_interpolated_step_lands_on_boundary(self):
        rng = np.random.default_rng(2)
        seen = 0
        for _ in range(200):
            J = rng.normal(size=(12, 3))
            r = rng.normal(size=12)
            gn = gauss_newton_step(J, r)
            sd = -(J.T @ r)
            h = (sd @ sd) / ((J @ sd) @ (J @ sd))
            c_norm = np.linalg.norm(h * sd)
            g_norm = np.linalg.norm(gn)
            if not c_norm < g_norm:
                continue
            rho = 0.5 * (c_norm + g_norm)
            step = dogleg_step(J, r, rho)
            if step.kind != "interpolated":
                continue
            seen += 1
            assert abs(np.linalg.norm(step.dx) - rho) < 1e-12
        assert seen >= 50

    def test_step_norm_never_exceeds_radius(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            J = rng.normal(size=(10, 4))
            r = rng.normal(size=10) * rng.uniform(0.1, 10.0)
            rho = rng.uniform(1e-4, 2.0)
            step = dogleg_step(J, r, rho)
            assert np.linalg.norm(step.dx) <= rho + 1e-12

    def test_zero_jacobian_falls_back_to_zero_step(self):
        step = dogleg_step(np.zeros((5, 2)), np.ones(5), 1.0)
        assert step.kind == "cauchy-clipped"
        np.testing.assert_array_equal(step.dx, np.zeros(2))

    def test_zero_residual_gives_zero_gn_step(self):
        J = np.random.default_rng(4).normal(size=(8, 3))
        step = dogleg_step(J, np.zeros(8), 0.5)
        assert step.kind == "gn"
        np.testing.assert_allclose(step.dx, np.zeros(3), atol=1e-15)

    def test_nonpositive_radius_rejected(self):
        with pytest.raises(ValueError):
            dogleg_step(np.ones((3, 2)), np.ones(3), 0.0)

    def test_returns_named_step(self):
        step = dogleg_step(np.ones((3, 2)), np.ones(3), 0.5)
        assert isinstance(step, DoglegStep)
        assert step.kind in {"gn", "cauchy-clipped", "interpolated"}


class TestTrustRegionUpdate:
    def test_good_interior_step_keeps_radius(self):
        s = TrustRegionState(rho=0.3)
        s2, accepted = trust_region_update(s, 1.0, at_boundary=False)
        assert s2.rho == 0.3 and accepted

    def test_bad_step_shrinks_and_rejects(self):
        s = TrustRegionState(rho=0.4)
        s2, accepted = trust_region_update(s, -0.5, at_boundary=True)
        assert s2.rho == 0.2 and not accepted

    def test_marginal_positive_ratio_shrinks_but_accepts(self):
        s = TrustRegionState(rho=0.4)
        s2, accepted = trust_region_update(s, 0.1, at_boundary=False)
        assert s2.rho == 0.2 and accepted

    def test_excellent_boundary_step_grows_capped(self):
        s = TrustRegionState(rho=0.8, rho_max=1.0)
        s2, accepted = trust_region_update(s, 0.9, at_boundary=True)
        assert s2.rho == 1.0 and accepted

    def test_excellent_interior_step_does_not_grow(self):
        s = TrustRegionState(rho=0.3)
        s2, accepted = trust_region_update(s, 0.9, at_boundary=False)
        assert s2.rho == 0.3 and accepted

    def test_middling_ratio_keeps_radius(self):
        s = TrustRegionState(rho=0.3)
        s2, accepted = trust_region_update(s, 0.5, at_boundary=True)
        assert s2.rho == 0.3 and accepted

    def test_state_invariant_enforced(self):
        with pytest.raises(ValueError):
            TrustRegionState(rho=2.0, rho_max=1.0)
        with pytest.raises(ValueError):
            TrustRegionState(rho=0.0)

    def test_nonfinite_ratio_rejected(self):
        with pytest.raises(ValueError):
            trust_region_update(TrustRegionState(), float("nan"), False)


def rosenbrock_residual(x):
    return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


def rosenbrock_jacobian(x):
    return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])


class TestMinimizeDogleg:
    def test_linear_least_squares_exact(self):
        rng = np.random.default_rng(5)
        A = rng.normal(size=(12, 3))
        b = rng.normal(size=12)
        x_ref, *_ = np.linalg.lstsq(A, b, rcond=None)
        res = minimize_dogleg(
            lambda x: A @ x - b,
            lambda x: A,
            np.zeros(3),
            state=TrustRegionState(rho=1.0, rho_max=10.0),
            max_iters=100,
        )
        assert res.converged
        np.testing.assert_allclose(res.x, x_ref, atol=1e-7)

    def test_rosenbrock_from_standard_start(self):
        res = minimize_dogleg(
            rosenbrock_residual,
            rosenbrock_jacobian,
            np.array([-1.2, 1.0]),
            max_iters=500,
            step_tol=1e-10,
            cost_tol=1e-16,
        )
        assert res.converged
        assert res.iterations <= 500
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-6)

    def test_accepted_costs_never_increase(self):
        # Drive the loop by hand and watch the accepted-cost sequence.
        x = np.array([-1.2, 1.0])
        state = TrustRegionState()
        costs = [float(rosenbrock_residual(x) @ rosenbrock_residual(x))]
        for _ in range(200):
            r = rosenbrock_residual(x)
            J = rosenbrock_jacobian(x)
            step = dogleg_step(J, r, state.rho)
            if np.linalg.norm(step.dx) < 1e-12:
                break
            predicted = float(r @ r) - float(np.linalg.norm(r + J @ step.dx) ** 2)
            x_new = x + step.dx
            r_new = rosenbrock_residual(x_new)
            actual = float(r @ r) - float(r_new @ r_new)
            ratio = actual / predicted if predicted > 0 else -1.0
            at_boundary = np.linalg.norm(step.dx) >= state.rho * (1 - 1e-9)
            state, accepted = trust_region_update(state, ratio, at_boundary)
            if accepted:
                x = x_new
                costs.append(float(r_new @ r_new))
            if state.rho < 1e-10:
                break
        assert len(costs) > 5
        assert all(b <= a + 1e-15 for a, b in zip(costs, costs[1:]))

    def test_flat_gradient_detected(self):
        res = minimize_dogleg(
            lambda x: np.array([1.0, -2.0]),
            lambda x: np.zeros((2, 2)),
            np.array([3.0, 4.0]),
        )
        assert res.converged
        assert res.status == "flat_gradient"
        assert res.initial_gradient_norm == 0.0
        np.testing.assert_array_equal(res.x, [3.0, 4.0])

    def test_stalled_radius_terminates(self):
        # A residual that always worsens forces rejections until the
        # radius collapses.
        calls = {"n": 0}

        def residual(x):
            calls["n"] += 1
            if calls["n"] == 1:
                return np.array([1.0])
            return np.array([10.0])

        res = minimize_dogleg(
            lambda x: residual(x),
            lambda x: np.array([[1.0]]),
            np.array([0.0]),
            max_iters=500,
            step_tol=0.0,
        )
        assert res.converged
        assert res.status == "rho_min"
        np.testing.assert_array_equal(res.x, [0.0])

    def test_custom_retraction_is_used(self):
        # Optimize an angle through a unit-circle embedding; retraction
        # wraps into [-pi, pi) to prove it is applied.
        target = 2.0

        def residual(theta):
            return np.array([np.cos(theta[0]) - np.cos(target),
                             np.sin(theta[0]) - np.sin(target)])

        def jacobian(theta):
            return np.array([[-np.sin(theta[0])], [np.cos(theta[0])]])

        def retract(theta, dtheta):
            wrapped = (theta[0] + dtheta[0] + np.pi) % (2 * np.pi) - np.pi
            return np.array([wrapped])

        res = minimize_dogleg(
            residual, jacobian, np.array([0.5]), retract=retract,
            state=TrustRegionState(rho=0.5, rho_max=1.0), max_iters=200,
        )
        assert res.converged
        assert abs(res.x[0]) <= np.pi
        assert res.x[0] == pytest.approx(target, abs=1e-6)

    def test_result_type(self):
        res = minimize_dogleg(
            lambda x: np.array([x[0]]), lambda x: np.array([[1.0]]), np.array([1.0])
        )
        assert isinstance(res, OptimizeResult)
        assert res.cost == pytest.approx(0.0, abs=1e-12)
