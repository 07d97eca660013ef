import numpy as np
import pytest

from conftest import random_stable_model
from oracles import closed_loop_dc_gain, lifted_closed_loop, open_loop_by_recursion

from ivddpc import bench
from ivddpc.sslib import (ControllerModel, DareConvergenceError, StateSpaceModel, Trajectory,
                          WellPosednessError, dare_solve, excitation_reference, gaussian_noise,
                          kalman_gain, riccati_residual, simulate_closed_loop,
                          simulate_open_loop, spectral_radius, square_wave,
                          stabilizing_output_injection)


class TestStateSpaceModel:
    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            StateSpaceModel(A=np.eye(2), B=np.ones((3, 1)), C=np.ones((1, 2)), D=[[0.0]])
        with pytest.raises(ValueError):
            StateSpaceModel(A=np.eye(2), B=np.ones((2, 1)), C=np.ones((1, 3)), D=[[0.0]])

    def test_unstable_predictor_gain_rejected(self):
        # A - K C has spectral radius > 1 for this K
        with pytest.raises(ValueError, match="Schur"):
            StateSpaceModel(A=[[1.5]], B=[[1.0]], C=[[1.0]], D=[[0.0]], K=[[0.0]])

    def test_gain_roundtrip_preserves_invariant(self, plant):
        K = kalman_gain(plant, 0.01 * np.eye(2), 0.01 * np.eye(1))
        model = plant.with_gain(K)
        assert spectral_radius(model.a_k) < 1.0


class TestOpenLoopSimulation:
    def test_delay_chain(self):
        model = StateSpaceModel(A=[[0.5]], B=[[1.0]], C=[[1.0]], D=[[0.0]], K=[[0.0]])
        traj = simulate_open_loop(model, u=[1.0, 0.0], e=[0.0, 0.0])
        assert np.allclose(traj.y.ravel(), [0.0, 1.0])

    def test_benchmark_zero_input_zero_state(self, plant):
        traj = simulate_open_loop(plant, u=np.zeros(40))
        assert np.all(traj.y == 0.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_recursion_oracle(self, seed):
        rng = np.random.default_rng(seed)
        model = random_stable_model(rng, n=3, m=2, p=2, with_gain=True)
        u = rng.standard_normal((50, 2))
        e = rng.standard_normal((50, 2))
        traj = simulate_open_loop(model, u, e)
        expected = open_loop_by_recursion(model.A, model.B, model.C, model.D, model.K,
                                          u, e, np.zeros(3))
        assert np.abs(traj.y - expected).max() < 1e-12

    def test_absent_gain_equals_zero_gain(self):
        rng = np.random.default_rng(5)
        model = random_stable_model(rng, n=2)
        model0 = model.with_gain(np.zeros((2, 1)))
        u = rng.standard_normal(30)
        e = rng.standard_normal(30)
        ya = simulate_open_loop(model, u, e).y
        yb = simulate_open_loop(model0, u, e).y
        assert np.array_equal(ya, yb)

    def test_length_mismatch_rejected(self, plant):
        with pytest.raises(ValueError):
            simulate_open_loop(plant, u=np.zeros(10), e=np.zeros(9))


class TestClosedLoopSimulation:
    def test_zero_equilibrium(self):
        model = StateSpaceModel(A=[[0.5]], B=[[1.0]], C=[[1.0]], D=[[0.0]])
        ctrl = ControllerModel(A=[[0.2]], B=[[1.0]], C=[[0.3]], D=[[0.0]])
        traj = simulate_closed_loop(model, ctrl, r=np.zeros(20))
        assert np.all(traj.u == 0.0) and np.all(traj.y == 0.0)

    def test_step_reaches_dc_gain(self, plant, controller):
        traj = simulate_closed_loop(plant, controller, r=np.ones(3000))
        expected = closed_loop_dc_gain(plant.A, plant.B, plant.C, plant.D,
                                       controller.A, controller.B, controller.C, controller.D)
        assert np.allclose(traj.y[-1], expected, atol=1e-6)

    def test_matches_lifted_oracle_benchmark(self, plant, controller):
        rng = np.random.default_rng(7)
        r = rng.standard_normal((200, 1))
        e = rng.standard_normal((200, 1)) * 0.1
        K = kalman_gain(plant, 0.01 * np.eye(2), 0.01 * np.eye(1))
        model = plant.with_gain(K)
        traj = simulate_closed_loop(model, controller, r, e)
        u_ref, y_ref = lifted_closed_loop(model.A, model.B, model.C, model.D, model.K,
                                          controller.A, controller.B, controller.C,
                                          controller.D, r, e)
        assert np.abs(traj.y - y_ref).max() < 1e-10
        assert np.abs(traj.u - u_ref).max() < 1e-10

    @pytest.mark.parametrize("seed", [3, 4, 5])
    def test_matches_lifted_oracle_random(self, seed):
        from conftest import random_stable_controller
        rng = np.random.default_rng(seed)
        model = random_stable_model(rng, n=3, m=2, p=2, with_gain=True)
        ctrl = random_stable_controller(rng, nc=2, m=2, p=2)
        r = rng.standard_normal((500, 2))
        e = rng.standard_normal((500, 2)) * 0.2
        traj = simulate_closed_loop(model, ctrl, r, e)
        u_ref, y_ref = lifted_closed_loop(model.A, model.B, model.C, model.D, model.K,
                                          ctrl.A, ctrl.B, ctrl.C, ctrl.D, r, e)
        scale = max(1.0, np.abs(y_ref).max())
        assert np.abs(traj.y - y_ref).max() / scale < 1e-10

    def test_singular_loop_rejected(self):
        # D = 1, D_c = -1 makes I + D_c D singular
        model = StateSpaceModel(A=[[0.5]], B=[[1.0]], C=[[1.0]], D=[[1.0]])
        ctrl = ControllerModel(A=[[0.2]], B=[[1.0]], C=[[0.3]], D=[[-1.0]])
        with pytest.raises(WellPosednessError):
            simulate_closed_loop(model, ctrl, r=np.zeros(5))

    def test_io_mismatch_rejected(self, plant):
        ctrl = ControllerModel(A=np.eye(2) * 0.5, B=np.ones((2, 2)), C=np.ones((1, 2)),
                               D=np.zeros((1, 2)))
        with pytest.raises(ValueError):
            simulate_closed_loop(plant, ctrl, r=np.zeros((10, 1)))

    def test_quiescent_loop_stays_at_zero(self, plant, controller):
        traj = simulate_closed_loop(plant, controller, r=np.zeros(50))
        assert np.all(traj.u == 0.0) and np.all(traj.y == 0.0)


class TestSignals:
    def test_square_wave_example(self):
        assert np.array_equal(square_wave(4, 0.5, 1.0, 8), [1, 1, -1, -1, 1, 1, -1, -1])

    def test_duty_ratio_positive_count(self):
        sig = square_wave(600, 0.7, 2.5, 600)
        assert int(np.sum(sig > 0)) == 420

    @pytest.mark.parametrize("period,duty", [(7, 0.3), (12, 0.87), (5, 0.999)])
    def test_positive_samples_per_period_counting(self, period, duty):
        sig = square_wave(period, duty, 1.0, period * 5)
        expected = int(round(duty * period))
        for k in range(5):
            block = sig[k * period:(k + 1) * period]
            assert int(np.sum(block > 0)) == expected

    def test_phase_shift(self):
        base = square_wave(6, 0.5, 1.0, 12)
        shifted = square_wave(6, 0.5, 1.0, 12, phase=2)
        assert np.array_equal(shifted[:10], base[2:])

    def test_square_wave_errors(self):
        with pytest.raises(ValueError):
            square_wave(1, 0.5, 1.0, 4)
        with pytest.raises(ValueError):
            square_wave(4, 0.5, 1.0, 0)
        with pytest.raises(ValueError):
            square_wave(4, 1.0, 1.0, 4)

    def test_excitation_reference_ladder(self):
        sig = excitation_reference(600, 0.7, range(-3, 4))
        assert sig.shape[0] == 4200

    def test_excitation_reference_zero_block(self):
        assert np.all(excitation_reference(10, 0.5, [0.0]) == 0.0)

    def test_excitation_reference_two_amplitudes(self):
        sig = excitation_reference(4, 0.5, [1.0, 2.0])
        assert sig.shape[0] == 8
        assert np.abs(sig).max() == 2.0

    def test_excitation_reference_empty_rejected(self):
        with pytest.raises(ValueError):
            excitation_reference(10, 0.5, [])


class TestGaussianNoise:
    def test_zero_sigma(self):
        assert np.all(gaussian_noise(0, 0.0, 100, 2) == 0.0)

    def test_determinism(self):
        a = gaussian_noise(1234, 1.5, 50, 3)
        b = gaussian_noise(1234, 1.5, 50, 3)
        assert np.array_equal(a, b)

    def test_large_sample_std(self):
        x = gaussian_noise(7, 1.0, 100000, 1)
        assert 0.99 <= np.std(x) <= 1.01

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            gaussian_noise(0, -1.0, 10, 1)


class TestRiccati:
    def test_zero_dynamics_fixed_point(self):
        Qw = np.diag([2.0, 3.0])
        P = dare_solve(np.zeros((2, 2)), np.array([[1.0, 0.0]]), Qw, np.eye(1))
        assert np.allclose(P, Qw, atol=1e-12)

    def test_scalar_matches_fixed_point_oracle(self):
        # bisection on the scalar fixed point p = a^2 p + q - a^2 p^2 / (p + r)
        a, q, r = 0.5, 1.0, 1.0
        lo, hi = 0.0, 100.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            f = a * a * mid + q - (a * mid) ** 2 / (mid + r) - mid
            if f > 0:
                lo = mid
            else:
                hi = mid
        expected = 0.5 * (lo + hi)
        P = dare_solve(np.array([[a]]), np.array([[1.0]]), np.array([[q]]), np.array([[r]]),
                       tol=1e-14)
        assert abs(P[0, 0] - expected) < 1e-10

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_residual_below_tolerance(self, seed):
        rng = np.random.default_rng(seed)
        model = random_stable_model(rng, n=4, p=2)
        Qw = np.eye(4) * 0.5
        Rv = np.eye(2)
        P = dare_solve(model.A, model.C, Qw, Rv, tol=1e-13)
        assert riccati_residual(model.A, model.C, Qw, Rv, P) < 1e-10
        assert np.allclose(P, P.T)
        assert np.all(np.linalg.eigvalsh(P) > -1e-12)

    def test_nonconvergence_reports_residual(self):
        with pytest.raises(DareConvergenceError) as err:
            dare_solve(np.array([[0.99]]), np.array([[1.0]]), np.eye(1), np.eye(1),
                       tol=1e-16, max_iter=3)
        assert err.value.residual > 0.0


class TestGains:
    def test_zero_dynamics_gain(self):
        model = StateSpaceModel(A=np.zeros((2, 2)), B=np.ones((2, 1)), C=np.eye(2),
                                D=np.zeros((2, 1)))
        K = kalman_gain(model, np.eye(2), np.eye(2))
        assert np.allclose(K, 0.0, atol=1e-12)

    def test_benchmark_gain_stabilizes_predictor(self, plant):
        K = kalman_gain(plant, 0.01 * np.eye(2), 0.01 * np.eye(1))
        assert spectral_radius(plant.A - K @ plant.C) < 1.0

    def test_stable_controller_fast_path(self):
        L = stabilizing_output_injection(np.eye(2) * 0.5, np.array([[1.0, 0.0]]))
        assert np.all(L == 0.0)

    def test_benchmark_controller_injection(self, controller):
        L = stabilizing_output_injection(controller.A, controller.C)
        assert spectral_radius(controller.A + L @ controller.C) < 1.0

    def test_mimo_controller_injection(self, mimo_controller):
        L = stabilizing_output_injection(mimo_controller.A, mimo_controller.C)
        assert spectral_radius(mimo_controller.A + L @ mimo_controller.C) < 1.0


class TestTrajectory:
    def test_length_consistency(self):
        with pytest.raises(ValueError):
            Trajectory(u=np.zeros((10, 1)), y=np.zeros((9, 1)))

    def test_empty_optional_signals(self):
        traj = Trajectory(u=np.zeros((5, 1)), y=np.zeros((5, 1)))
        assert traj.r.shape[0] == 0 and traj.e.shape[0] == 0
        assert traj.length == 5
