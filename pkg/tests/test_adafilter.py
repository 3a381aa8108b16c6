import numpy as np
import pytest

from core.adafilter import (
    AdaptiveFilter,
    Dictionary,
    FilterState,
    TransitionWindow,
    admit_or_skip,
    apfbs_update,
    averaged_projection,
    empty_state,
    filter_from_json,
    filter_to_json,
    predict,
    project_hyperslab,
    prune_zero_atoms,
    soft_threshold,
)
from core.config import ApfbsConfig
from core.errors import DimensionMismatchError
from core.kernels import Gaussian, Linear


def _fixed_dictionary(rng, n_atoms=20, dim=2):
    centers = rng.uniform(-2.0, 2.0, size=(n_atoms, dim))
    return Dictionary((Gaussian(1.0, dim),), dim, n_atoms, centers, np.zeros(n_atoms, dtype=np.int64))


class TestSoftThreshold:
    def test_matches_grid_minimizer(self):
        t = 0.3
        grid = np.linspace(-3.0, 3.0, 600_001)
        values = np.linspace(-2.0, 2.0, 41)
        got = soft_threshold(values, t)
        for v, g in zip(values, got):
            objective = 0.5 * (grid - v) ** 2 + t * np.abs(grid)
            assert abs(grid[np.argmin(objective)] - g) <= 1e-4

    def test_zero_threshold_is_identity(self):
        h = np.array([0.5, -0.2, 0.0])
        np.testing.assert_array_equal(soft_threshold(h, 0.0), h)


class TestHyperslabProjection:
    def test_idempotent_and_feasible(self, rng):
        for _ in range(200):
            h = rng.normal(size=6)
            k = rng.normal(size=6)
            delta = float(rng.normal())
            eps1 = float(rng.uniform(0.0, 0.5))
            p = project_hyperslab(h, k, delta, eps1)
            assert abs(p @ k - delta) <= eps1 + 1e-12
            np.testing.assert_allclose(project_hyperslab(p, k, delta, eps1), p, atol=1e-12)

    def test_moves_along_the_normal(self, rng):
        h, k = rng.normal(size=(2, 4))
        p = project_hyperslab(h, k, 10.0, 0.1)
        step = p - h
        np.testing.assert_allclose(step, (step @ k) / (k @ k) * k, atol=1e-12)

    def test_inside_the_slab_is_unchanged(self):
        h = np.array([1.0, 0.0])
        np.testing.assert_array_equal(project_hyperslab(h, np.array([1.0, 0.0]), 1.05, 0.1), h)

    def test_averaged_projection_is_the_mean(self, rng):
        h = rng.normal(size=5)
        K = rng.normal(size=(4, 5))
        deltas = rng.normal(size=4)
        expected = np.mean([project_hyperslab(h, K[i], deltas[i], 0.05) for i in range(4)], axis=0)
        np.testing.assert_allclose(averaged_projection(h, K, deltas, 0.05), expected, atol=1e-12)


class TestApfbs:
    def test_monotone_approximation(self):
        """With mu = 0 and data consistent with h_true, the distance to it never grows."""
        rng = np.random.default_rng(3)
        d = _fixed_dictionary(rng)
        h_true = np.zeros(d.size)
        h_true[[1, 5, 11, 17]] = rng.normal(scale=2.0, size=4)
        state = FilterState(d, np.zeros(d.size))
        config = ApfbsConfig(lam=0.5, s=5, mu=0.0, eps1=0.01, eps2=0.1, r_max=d.size)
        window = TransitionWindow(config.s)
        dist = np.linalg.norm(state.h - h_true)
        violations = 0
        for _ in range(10_000):
            z = rng.uniform(-2.0, 2.0, size=2)
            window.push(z, float(d.features(z) @ h_true))
            state = apfbs_update(state, window, config)
            new = np.linalg.norm(state.h - h_true)
            if new > dist + 1e-12:
                violations += 1
            dist = new
        assert violations == 0
        assert dist < np.linalg.norm(h_true)

    def test_sparse_step_is_quasi_nonexpansive(self):
        """With mu > 0 the step never moves a point away from a fixed point of the frozen-window map."""
        rng = np.random.default_rng(9)
        d = _fixed_dictionary(rng)
        config = ApfbsConfig(lam=0.7, s=5, mu=0.05, eps1=0.01, eps2=0.1, r_max=d.size)
        window = TransitionWindow(config.s)
        for z in rng.uniform(-2.0, 2.0, size=(5, 2)):
            window.push(z, float(rng.normal()))

        def step(h):
            return apfbs_update(FilterState(d, h), window, config).h

        fixed = np.zeros(d.size)
        for _ in range(5000):
            fixed = step(fixed)
        residual = np.linalg.norm(step(fixed) - fixed)
        for _ in range(200):
            h = rng.normal(scale=3.0, size=d.size)
            assert np.linalg.norm(step(h) - fixed) <= np.linalg.norm(h - fixed) + residual + 1e-12
            g = rng.normal(scale=3.0, size=d.size)
            assert np.linalg.norm(step(h) - step(g)) <= np.linalg.norm(h - g) + 1e-12

    def test_soft_threshold_applied(self, rng):
        d = _fixed_dictionary(rng, n_atoms=3)
        state = FilterState(d, np.array([1.0, -1.0, 0.001]))
        window = TransitionWindow(1).push(np.zeros(2), float(d.features(np.zeros(2)) @ state.h))
        config = ApfbsConfig(lam=0.5, s=1, mu=0.01, eps1=0.1, eps2=0.1, r_max=3)
        out = apfbs_update(state, window, config)
        np.testing.assert_allclose(out.h, [0.995, -0.995, 0.0])

    def test_empty_window_is_noop(self, rng):
        state = FilterState(_fixed_dictionary(rng, 3), np.ones(3))
        assert apfbs_update(state, TransitionWindow(5), ApfbsConfig()) is state


class TestDictionaryGrowth:
    config = ApfbsConfig(lam=0.5, s=5, mu=0.0, eps1=0.01, eps2=0.1, r_max=4)

    def test_admits_one_atom_per_kernel(self):
        state = empty_state([Gaussian(1.0, 1), Linear()], 1, 4)
        state = admit_or_skip(state, [0.5], 1.0, self.config)
        assert state.dictionary.size == 2
        assert state.dictionary.sizes == [1, 1]
        np.testing.assert_array_equal(state.h, np.zeros(2))

    def test_skips_zero_target_on_empty_model(self):
        state = empty_state([Gaussian(1.0, 1)], 1, 4)
        assert admit_or_skip(state, [0.5], 0.0, self.config).dictionary.size == 0

    def test_respects_capacity(self):
        state = empty_state([Gaussian(1.0, 1), Linear()], 1, 3)
        state = admit_or_skip(state, [0.5], 1.0, self.config)
        state = admit_or_skip(state, [1.5], 1.0, self.config)
        assert state.dictionary.size == 2

    def test_skips_well_predicted_target(self):
        state = empty_state([Gaussian(1.0, 1)], 1, 4)
        state = admit_or_skip(state, [0.0], 1.0, self.config)
        state = FilterState(state.dictionary, np.array([2.0]))
        psi = predict(state, [0.1])
        assert admit_or_skip(state, [0.1], psi * 1.01, self.config).dictionary.size == 1

    def test_prune_keeps_predictions(self, rng):
        d = _fixed_dictionary(rng, 5)
        state = FilterState(d, np.array([0.0, 1.0, 0.0, -2.0, 0.0]))
        pruned = prune_zero_atoms(state)
        assert pruned.dictionary.size == 2
        z = rng.normal(size=2)
        assert predict(pruned, z) == pytest.approx(predict(state, z))

    def test_wrong_input_dimension(self):
        state = empty_state([Gaussian(1.0, 2)], 2, 4)
        with pytest.raises(DimensionMismatchError):
            predict(state, [1.0, 2.0, 3.0])


class TestAdaptiveFilter:
    def test_learns_a_smooth_function(self):
        rng = np.random.default_rng(11)
        config = ApfbsConfig(lam=0.5, s=5, mu=0.0, eps1=0.01, eps2=0.1, r_max=60)
        f = AdaptiveFilter(empty_state([Gaussian(0.5, 1)], 1, config.r_max), config)
        for _ in range(3000):
            x = rng.uniform(-3.0, 3.0)
            f.learn([x], float(np.sin(x)))
        grid = np.linspace(-2.5, 2.5, 101)
        err = np.array([f.predict([x]) - np.sin(x) for x in grid])
        assert float(np.mean(err**2)) < 0.05
        assert f.state.dictionary.size <= 60

    def test_learn_returns_a_priori_prediction(self):
        config = ApfbsConfig(lam=1.0, s=1, mu=0.0, eps1=0.0, eps2=0.0, r_max=10)
        f = AdaptiveFilter(empty_state([Gaussian(1.0, 1)], 1, 10), config)
        assert f.learn([0.0], 2.0) == 0.0
        assert f.predict([0.0]) == pytest.approx(2.0)

    def test_json_round_trip_predicts_identically(self, rng):
        config = ApfbsConfig(lam=0.5, s=3, mu=0.001, eps1=0.01, eps2=0.1, r_max=30)
        f = AdaptiveFilter(empty_state([Gaussian(1.0, 2), Linear()], 2, 30), config)
        for _ in range(50):
            z = rng.normal(size=2)
            f.learn(z, float(z[0] - z[1] ** 2))
        restored = filter_from_json(filter_to_json(f.state))
        for z in rng.normal(size=(5, 2)):
            assert predict(restored, z) == predict(f.state, z)
