import math

import numpy as np
import pytest

from core.barrier import (
    BarrierSpec,
    DeadlockMonitor,
    OrientationBarrier,
    SafeInputProblem,
    affine_barrier,
    ball_barrier,
    barrier_preset,
    build_problem,
    certified_interval,
    certified_margin,
    dcbf_residual,
    is_certified,
    is_feasible,
    lyapunov_value,
    margins_batch,
    sample_safe_input,
    solve_safe_control,
    successor_check,
    turn_inward_override,
    viable_safe_control,
)
from core.config import BarrierConfig
from core.envs import QuadrotorEnv
from core.errors import InfeasibleSafeSetError
from core.structmodel import ExactLearner


def _random_ball_instance(rng, rho1=0.0):
    spec = ball_barrier("ball", 1.0, eta=float(rng.uniform(0.01, 0.5)), rho1=rho1)
    x = rng.uniform(-1.2, 1.2, size=2)
    problem = SafeInputProblem(
        x=x,
        f_hat=rng.normal(scale=0.2, size=2),
        g_hat=rng.normal(scale=0.5, size=(2, 2)),
        barriers=(spec,),
        low=-np.ones(2),
        high=np.ones(2),
    )
    return spec, problem


def _random_2d_instance(rng):
    eta = float(rng.uniform(0.01, 0.5))
    x = rng.uniform(-0.7, 0.7, size=2)
    barriers = []
    for k in range(2):
        a = rng.normal(size=2)
        c = float(rng.uniform(0.1, 1.0) - a @ x)
        barriers.append(affine_barrier(f"a{k}", a, c, eta=eta, nu=float(rng.choice([0.0, 1.0]))))
    barriers.append(ball_barrier("ball", 2.0, eta=eta))
    problem = SafeInputProblem(
        x=x,
        f_hat=rng.normal(scale=0.1, size=2),
        g_hat=rng.normal(scale=1.0, size=(2, 2)),
        barriers=tuple(barriers),
        low=np.zeros(2),
        high=np.ones(2),
    )
    return problem, float(rng.normal()), rng.normal(size=2)


class TestResidualAndMargin:
    def test_residual_example(self, box_barriers):
        top = box_barriers[0]
        assert dcbf_residual(top, np.array([0.0, 0.0]), np.array([0.0, 0.0])) == pytest.approx(0.03)

    def test_boundary_fixed_point(self, box_barriers):
        x = np.array([3.0, 0.0])
        assert dcbf_residual(box_barriers[0], x, x) == 0.0

    def test_affine_margin(self, box_barriers):
        problem = SafeInputProblem(np.array([1.0, 0.0]), np.array([0.1, 0.0]), np.array([[2.0], [0.0]]), box_barriers[:1], [-1.0], [1.0])
        u = np.array([0.25])
        assert certified_margin(problem, box_barriers[0], problem.x, u) == pytest.approx(-(0.1 + 0.5) + 0.01 * 2.0)
        assert margins_batch(problem, u)[0, 0] == pytest.approx(-(0.1 + 0.5) + 0.01 * 2.0)


class TestCertificateSoundness:
    def test_certified_inputs_satisfy_the_dcbf(self):
        rng = np.random.default_rng(5)
        checked = 0
        while checked < 10_000:
            rho1 = float(rng.choice([0.0, 0.01]))
            spec, problem = _random_ball_instance(rng, rho1)
            U = rng.uniform(-1.0, 1.0, size=(100, 2))
            M = margins_batch(problem, U)[:, 0]
            for u in U[M >= 0.0][: 10_000 - checked]:
                x_next = problem.x + problem.f_hat + problem.g_hat @ u
                assert dcbf_residual(spec, problem.x, x_next) >= rho1 - 1e-9
                checked += 1
        assert checked == 10_000

    def test_certified_set_is_convex(self):
        rng = np.random.default_rng(6)
        combos = 0
        while combos < 10_000:
            _, problem = _random_ball_instance(rng)
            U = rng.uniform(-1.0, 1.0, size=(200, 2))
            ok = U[np.all(margins_batch(problem, U) >= 0.0, axis=1)]
            if ok.shape[0] < 2:
                continue
            for _ in range(200):
                i, j = rng.integers(0, ok.shape[0], size=2)
                t = rng.uniform()
                assert is_certified(problem, t * ok[i] + (1 - t) * ok[j])
                combos += 1


class TestSolveSafeControl:
    def test_box_vertex_without_barriers(self):
        problem = SafeInputProblem(np.zeros(2), np.zeros(2), np.eye(2), (), -np.ones(2), np.ones(2))
        result = solve_safe_control(problem, (0.0, np.array([1.0, -1.0])))
        np.testing.assert_allclose(result.u, [1.0, -1.0], atol=1e-6)

    def test_cut_vertex_lands_on_the_facet(self):
        # margin = 0.5 - u0 - u1 with nu = 0
        barrier = affine_barrier("cut", [-1.0, -1.0], 0.5, eta=1.0)
        problem = SafeInputProblem(np.zeros(2), np.zeros(2), np.eye(2), (barrier,), np.zeros(2), np.ones(2))
        result = solve_safe_control(problem, (1.0, np.array([1.0, 0.5])))
        np.testing.assert_allclose(result.u, [0.5, 0.0], atol=1e-6)
        assert result.objective == pytest.approx(1.5, abs=1e-6)

    def test_one_dimensional_endpoints_and_tie(self, box_barriers):
        q = QuadrotorEnv()
        learner = ExactLearner(q.true_affine, 1)
        problem = build_problem(np.array([2.9, 0.1]), learner.affine(np.array([2.9, 0.1])), box_barriers, q.u_low, q.u_high)
        lo, hi = certified_interval(problem)
        assert solve_safe_control(problem, (0.0, [1.0])).u[0] == pytest.approx(hi)
        assert solve_safe_control(problem, (0.0, [-1.0])).u[0] == pytest.approx(lo)
        tie = solve_safe_control(problem, (0.0, [0.0])).u[0]
        assert tie == pytest.approx(float(np.clip(0.0, lo, hi)))

    def test_infeasible_report(self):
        barrier = affine_barrier("far", [1.0, 0.0], 0.0, rho1=1e6)
        problem = SafeInputProblem(np.zeros(2), np.zeros(2), np.eye(2), (barrier,), -np.ones(2), np.ones(2))
        result = solve_safe_control(problem, (0.0, np.ones(2)))
        assert not result.feasible
        assert result.witness is not None and result.violation > 0
        with pytest.raises(InfeasibleSafeSetError) as info:
            result.require()
        assert info.value.violation == result.violation
        assert not is_feasible(problem)

    def test_one_dimensional_infeasible_witness(self):
        barrier = affine_barrier("far", [1.0], 0.0, rho1=10.0)
        problem = SafeInputProblem(np.zeros(1), np.zeros(1), np.ones((1, 1)), (barrier,), [-1.0], [1.0])
        result = solve_safe_control(problem, (0.0, [1.0]))
        assert not result.feasible
        assert result.witness[0] == pytest.approx(1.0, abs=1e-6)
        assert result.violation == pytest.approx(9.0, abs=1e-6)

    @pytest.mark.parametrize("count", [pytest.param(10), pytest.param(100, marks=pytest.mark.slow)])
    def test_matches_grid_oracle(self, count):
        rng = np.random.default_rng(8)
        axis = np.linspace(0.0, 1.0, 1001)
        G = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
        solved = 0
        while solved < count:
            problem, a, b = _random_2d_instance(rng)
            ok = np.all(margins_batch(problem, G) >= 0.0, axis=1)
            if not ok.any():
                continue
            best = float(a + (G[ok] @ b).max())
            result = solve_safe_control(problem, (a, b))
            assert result.feasible
            assert is_certified(problem, result.u)
            assert result.objective >= best - 1e-4
            solved += 1


class TestSampling:
    def test_no_barriers_samples_the_box(self, rng):
        problem = SafeInputProblem(np.zeros(1), np.zeros(1), np.ones((1, 2)), (), np.array([-1.0, 0.0]), np.array([1.0, 2.0]))
        U = np.array([sample_safe_input(problem, rng) for _ in range(2000)])
        assert np.all(U >= problem.low) and np.all(U <= problem.high)
        np.testing.assert_allclose(U.mean(axis=0), [0.0, 1.0], atol=0.06)

    def test_half_space_barrier(self, rng):
        # margin = u0, so half of the box is certified
        barrier = affine_barrier("half", [1.0], 0.0)
        problem = SafeInputProblem(np.zeros(1), np.zeros(1), np.array([[1.0, 0.0]]), (barrier,), -np.ones(2), np.ones(2))
        draws = rng.uniform(-1.0, 1.0, size=(10_000, 2))
        rate = float(np.mean(margins_batch(problem, draws)[:, 0] >= 0.0))
        assert abs(rate - 0.5) <= 0.02
        U = np.array([sample_safe_input(problem, rng) for _ in range(2000)])
        assert np.all(U[:, 0] >= 0.0)
        assert abs(U[:, 0].mean() - 0.5) <= 0.03

    def test_sliver_uses_the_fallback(self, rng):
        lower = affine_barrier("lower", [1.0], 0.0)
        upper = affine_barrier("upper", [-1.0], 0.0)
        problem = SafeInputProblem(np.zeros(1), np.array([-0.5]), np.ones((1, 1)), (lower, upper), [-1.0], [1.0])
        u = sample_safe_input(problem, rng, max_draws=1000)
        assert u[0] == pytest.approx(0.5)
        assert is_certified(problem, u)

    def test_rejecting_successor_still_certified(self, rng, box_barriers):
        q = QuadrotorEnv()
        x = np.array([2.5, 0.3])
        problem = build_problem(x, ExactLearner(q.true_affine, 1).affine(x), box_barriers, q.u_low, q.u_high)
        u = sample_safe_input(problem, rng, successor_ok=lambda u: False)
        assert is_certified(problem, u)

    def test_infeasible_problem_raises(self, rng):
        barrier = affine_barrier("far", [1.0], 0.0, rho1=10.0)
        problem = SafeInputProblem(np.zeros(1), np.zeros(1), np.ones((1, 1)), (barrier,), [-1.0], [1.0])
        with pytest.raises(InfeasibleSafeSetError):
            sample_safe_input(problem, rng, max_draws=100)


class TestViability:
    def _near_floor(self, box_barriers):
        q = QuadrotorEnv()
        learner = ExactLearner(q.true_affine, 1)

        def problem_at(x):
            return build_problem(x, learner.affine(x), box_barriers, q.u_low, q.u_high)

        return problem_at(np.array([-2.8, 0.0])), problem_at

    def test_no_barriers_means_no_check(self):
        problem = SafeInputProblem(np.zeros(2), np.zeros(2), np.eye(2), (), -np.ones(2), np.ones(2))
        assert successor_check(problem, lambda x: problem) is None
        const, linear, nu = problem.coefficients
        assert const.shape == (0,) and linear.shape == (0, 2) and nu.shape == (0,)

    def test_upper_endpoint_strands_the_successor(self, box_barriers):
        # 0.2 above the floor at rest: the largest certified input leaves no certified input next step
        problem, problem_at = self._near_floor(box_barriers)
        ok = successor_check(problem, problem_at)
        lo, hi = certified_interval(problem)
        assert hi == pytest.approx(0.00513, abs=1e-5)
        assert not ok(np.array([hi]))
        assert ok(np.array([lo]))

    def test_greedy_choice_backs_off_to_a_viable_input(self, box_barriers):
        problem, problem_at = self._near_floor(box_barriers)
        ok = successor_check(problem, problem_at)
        result = viable_safe_control(problem, (0.0, np.array([1.0])), ok)
        lo, hi = certified_interval(problem)
        assert result.status == "viable"
        assert result.u[0] == pytest.approx(lo + 31.0 / 32.0 * (hi - lo))
        assert is_certified(problem, result.u) and ok(result.u)

    def test_rejecting_everything_keeps_the_certified_maximizer(self):
        barrier = affine_barrier("half", [1.0], 0.0)
        problem = SafeInputProblem(np.zeros(1), np.zeros(1), np.ones((1, 1)), (barrier,), [-1.0], [1.0])
        result = viable_safe_control(problem, (0.0, np.array([1.0])), lambda u: False)
        assert result.status == "not_viable"
        assert result.u[0] == pytest.approx(1.0)

    def test_one_dimensional_grid_order(self):
        # certified set is [0, 1]
        barrier = affine_barrier("half", [1.0], 0.0)
        problem = SafeInputProblem(np.zeros(1), np.zeros(1), np.ones((1, 1)), (barrier,), [-1.0], [1.0])
        result = viable_safe_control(problem, (2.0, np.array([1.0])), lambda u: u[0] <= 0.4)
        assert result.u[0] == pytest.approx(0.375)
        assert result.objective == pytest.approx(2.375)

    def test_segment_toward_the_maximizer(self):
        barrier = affine_barrier("cut", [-1.0, -1.0], 0.5, eta=1.0)
        problem = SafeInputProblem(np.zeros(2), np.zeros(2), np.eye(2), (barrier,), np.zeros(2), np.ones(2))
        result = viable_safe_control(problem, (0.0, np.array([1.0, 0.5])), lambda u: u[0] <= 0.2)
        np.testing.assert_allclose(result.u, [0.1875, 0.0], atol=1e-5)


def _certified_exploration(x0, steps, seed):
    env = QuadrotorEnv(state=np.asarray(x0, dtype=np.float64))
    barriers = barrier_preset(BarrierConfig(preset="quadrotor_box", eta=0.01))
    learner = ExactLearner(env.true_affine, 1)
    rng = np.random.default_rng(seed)

    def problem_at(x):
        return build_problem(x, learner.affine(x), barriers, env.u_low, env.u_high)

    x = env.state.copy()
    trace = [x]
    for _ in range(steps):
        problem = problem_at(x)
        x = env.step(sample_safe_input(problem, rng, successor_check(problem, problem_at))).copy()
        trace.append(x)
    return np.array(trace), barriers


class TestForwardInvariance:
    @pytest.mark.parametrize("steps", [pytest.param(2000), pytest.param(100_000, marks=pytest.mark.slow)])
    def test_stays_inside(self, steps):
        trace, barriers = _certified_exploration([0.0, 0.0], steps, seed=1)
        b_min = np.min([[b.value(x) for b in barriers] for x in trace])
        assert b_min >= -1e-9

    def test_recovers_geometrically(self):
        trace, barriers = _certified_exploration([4.0, -1.0], 3000, seed=2)
        top = barriers[0]
        b0 = top.value(trace[0])
        assert b0 == pytest.approx(-1.0)
        bound = (1 - top.eta) ** np.arange(len(trace)) * b0
        values = np.array([top.value(x) for x in trace])
        assert np.all(values >= bound - 1e-9)
        assert values[-1] >= -1e-9


class TestLyapunov:
    def test_zero_inside(self, box_barriers):
        assert lyapunov_value(np.zeros(2), np.ones(3), lambda h: 0.0, 1.0, box_barriers) == 0.0

    def test_barrier_violation(self, box_barriers):
        assert lyapunov_value(np.array([3.5, 0.0]), None, None, 1.0, box_barriers) == pytest.approx(0.5)

    def test_parameter_distance(self, box_barriers):
        assert lyapunov_value(np.zeros(2), np.ones(3), lambda h: 2.0, 0.5, box_barriers) == pytest.approx(1.0)

    def test_weight_must_be_positive(self, box_barriers):
        with pytest.raises(ValueError):
            lyapunov_value(np.zeros(2), None, None, 0.0, box_barriers)


class TestOrientationBarrier:
    def _disk_base(self):
        return BarrierSpec(
            "disk",
            B=lambda x: float(4.0 - x[0] ** 2 - x[1] ** 2),
            gradB=lambda x: np.array([-2.0 * x[0], -2.0 * x[1], 0.0]),
            hessian=lambda x: np.diag([-2.0, -2.0, 0.0]),
        )

    @pytest.mark.parametrize("base_kind", ["affine", "disk"])
    def test_gradient_matches_finite_differences(self, base_kind):
        base = affine_barrier("wall", [-1.0, 0.0, 0.0], 1.2) if base_kind == "affine" else self._disk_base()
        ob = OrientationBarrier(base, upsilon=0.1)
        x = np.array([0.3, -0.2, 1.0])
        h = 1e-6
        numeric = np.array([(ob.value(x + h * e) - ob.value(x - h * e)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(ob.gradient(x), numeric, atol=1e-6)

    def test_facing_inward_costs_nothing(self):
        ob = OrientationBarrier(affine_barrier("wall", [-1.0, 0.0, 0.0], 1.2), upsilon=0.1)
        x = np.array([0.5, 0.0, -math.pi])
        assert ob.value(x) == pytest.approx(0.7)

    def test_preset_names(self):
        names = [b.name for b in barrier_preset(BarrierConfig(preset="unicycle_oriented_box", eta=0.1))]
        assert names == ["B1", "B2", "B3", "B4"]
        assert [b.name for b in barrier_preset(BarrierConfig(preset="quadratic_ball"))] == ["B_ball"]


class TestDeadlock:
    def test_fires_on_a_stalled_window(self):
        monitor = DeadlockMonitor(window=5, threshold=1e-3)
        fired = [monitor.observe(np.array([0.5, 0.5, float(k)])) for k in range(5)]
        assert fired == [False, False, False, False, True]
        assert len(monitor.history) == 0

    def test_quiet_while_moving(self):
        monitor = DeadlockMonitor(window=5, threshold=1e-3)
        assert not any(monitor.observe(np.array([0.01 * k, 0.0, 0.0])) for k in range(20))

    def test_override_turns_toward_the_inside(self):
        barriers = barrier_preset(BarrierConfig(preset="unicycle_oriented_box", eta=0.1))
        x = np.array([1.15, 0.0, 0.0])
        u = turn_inward_override(x, barriers, np.zeros(2), np.full(2, 0.623))
        np.testing.assert_allclose(u, [0.623, 0.0])
