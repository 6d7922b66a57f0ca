import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mclq.processes import (
    AR5_DEFAULT,
    ARWindowSampler,
    BridgeWindowSampler,
    BrownianWindowSampler,
    ProcessSpec,
    Trajectory,
    WindowPair,
    continuation_array,
    make_windows,
    read_trajectory_csv,
    sample_ar,
    sample_ar_continuations,
    sample_bridge,
    sample_brownian,
    write_trajectory_csv,
)


def yule_walker_variance(phi, sigma):
    """Lag-0 autocovariance from the Yule-Walker system (independent linear solve)."""
    p = len(phi)
    # unknowns gamma_0..gamma_p; gamma_k = sum_i phi_i gamma_|k-i| (+ sigma^2 for k=0)
    A = np.zeros((p + 1, p + 1))
    rhs = np.zeros(p + 1)
    for k in range(p + 1):
        A[k, k] += 1.0
        for i, ph in enumerate(phi, start=1):
            A[k, abs(k - i)] -= ph
    rhs[0] = sigma**2
    return np.linalg.solve(A, rhs)[0]


class TestBrownian:
    def test_single_sample_is_origin(self):
        (path,) = sample_brownian(1, 1, 0.1, rng_seed=3)
        assert path.values.shape == (1, 1)
        assert path.values[0, 0] == 0.0

    def test_unit_interval_grid(self):
        path = sample_brownian(500, 1, 1 / 500, rng_seed=0)[0]
        assert path.length == 500
        assert path.times[0] == 0.0
        assert path.times[-1] == pytest.approx(499 / 500)

    def test_final_variance(self):
        n_steps, dt, n = 100, 0.01, 10_000
        final = np.array([p.values[0, -1] for p in sample_brownian(n_steps, n, dt, rng_seed=11)])
        expected = (n_steps - 1) * dt  # value at the last of n_steps grid points
        se = expected * np.sqrt(2.0 / (n - 1))
        assert abs(final.var(ddof=1) - expected) < 3 * se

    def test_disjoint_increments_uncorrelated(self):
        paths = np.stack([p.values[0] for p in sample_brownian(41, 10_000, 0.025, rng_seed=5)])
        a = paths[:, 20] - paths[:, 0]
        b = paths[:, 40] - paths[:, 20]
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.05

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            sample_brownian(0, 1, 0.1, 0)

    def test_path_independent_of_n_paths(self):
        few = sample_brownian(50, 2, 0.1, rng_seed=9)
        many = sample_brownian(50, 7, 0.1, rng_seed=9)
        np.testing.assert_array_equal(few[1].values, many[1].values)

    def test_repeat_calls_bit_identical(self):
        a = sample_brownian(30, 3, 0.1, rng_seed=2)
        b = sample_brownian(30, 3, 0.1, rng_seed=2)
        for x, y in zip(a, b):
            assert x.values.tobytes() == y.values.tobytes()


class TestBridge:
    @pytest.mark.parametrize("endpoint", [0.0, 1.0, -2.5])
    def test_pinned_exactly(self, endpoint):
        for path in sample_bridge(101, 20, endpoint, rng_seed=1):
            assert path.values[0, 0] == endpoint
            assert path.values[0, -1] == endpoint
            assert path.times[-1] == pytest.approx(1.0)

    def test_midpoint_variance(self):
        n = 10_000
        mid = np.array([p.values[0, 50] for p in sample_bridge(101, n, 0.0, rng_seed=4)])
        se = 0.25 * np.sqrt(2.0 / (n - 1))
        assert abs(mid.var(ddof=1) - 0.25) < 3 * se

    def test_rejects_short_grid(self):
        with pytest.raises(ValueError):
            sample_bridge(1, 1, 1.0, 0)


class TestAR:
    def test_noiseless_unit_root_is_constant(self):
        spec = ProcessSpec(kind="ar", phi=(1.0,), sigma=0.0, warmup=3)
        (path,) = sample_ar(spec, 20, 1, rng_seed=0, init=[2.5])
        np.testing.assert_array_equal(path.values, 2.5)

    def test_zero_state_zero_noise_is_zero(self):
        spec = ProcessSpec(kind="ar", phi=(0.5, 0.3), sigma=0.0, warmup=10)
        (path,) = sample_ar(spec, 15, 1, rng_seed=0)
        np.testing.assert_array_equal(path.values, 0.0)

    def test_default_configuration(self):
        assert AR5_DEFAULT.phi == (0.4, 0.2, 0.2, 0.1, 0.1)
        assert AR5_DEFAULT.sigma == 0.06
        assert AR5_DEFAULT.warmup == 100
        (path,) = sample_ar(AR5_DEFAULT, 500, 1, rng_seed=0)
        assert path.length == 500
        assert path.dt == pytest.approx(1 / 500)

    def test_stationary_variance_matches_yule_walker(self):
        # the default coefficients sum to one (unit root) so use a stationary set
        phi, sigma = (0.4, 0.2, 0.1, 0.05, 0.05), 0.06
        target = yule_walker_variance(phi, sigma)
        spec = ProcessSpec(kind="ar", phi=phi, sigma=sigma, warmup=300)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((100_000, 5)) * sigma
        noise = rng.standard_normal((100_000, 300))
        from mclq.processes import _ar_recursion

        last = _ar_recursion(spec.phi, sigma, x0, noise)[:, -1]
        assert abs(last.var() / target - 1) < 0.05

    def test_generator_matches_vectorized_recursion_variance(self):
        phi, sigma = (0.5, 0.2), 1.0
        target = yule_walker_variance(phi, sigma)
        spec = ProcessSpec(kind="ar", phi=phi, sigma=sigma, warmup=200)
        vals = np.array([p.values[0, -1] for p in sample_ar(spec, 1, 20_000, rng_seed=3)])
        assert abs(vals.var() / target - 1) < 0.05

    def test_continuation_hand_evaluated(self):
        spec = ProcessSpec(kind="ar", phi=(0.5,), sigma=0.0, warmup=1)
        ctx = Trajectory([[3.0, 2.0]], dt=0.1)
        conts = sample_ar_continuations(ctx, spec, horizon=3, n_paths=2, rng_seed=0)
        for c in conts:
            np.testing.assert_allclose(c.values[0], [1.0, 0.5, 0.25])
            assert c.t_start == pytest.approx(0.2)

    def test_zero_noise_collapses_ensemble(self):
        spec = ProcessSpec(kind="ar", phi=AR5_DEFAULT.phi, sigma=0.0, warmup=5)
        ctx = Trajectory(np.linspace(0, 1, 10)[None])
        arr = continuation_array(ctx, spec, 7, 5, rng_seed=1)
        assert np.all(arr == arr[0])

    def test_continuation_rejects_short_context(self):
        ctx = Trajectory([[1.0, 2.0]])
        with pytest.raises(ValueError):
            sample_ar_continuations(ctx, AR5_DEFAULT, 3, 1, 0)

    def test_rejects_nonpositive_length(self):
        with pytest.raises(ValueError):
            sample_ar(AR5_DEFAULT, 0, 1, 0)


class TestWindows:
    def test_single_admissible_window(self):
        paths = sample_brownian(10, 3, 0.1, rng_seed=0)
        a = make_windows(paths, 4, 6, "random", seed=1)
        b = make_windows(paths, 4, 6, "last")
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.context.values, y.context.values)
            np.testing.assert_array_equal(x.target.values, y.target.values)

    def test_toy_shapes(self):
        paths = sample_brownian(500, 4, 1 / 500, rng_seed=0)
        for w in make_windows(paths, 250, 250, "random", seed=0):
            assert w.context.length == 250 and w.target.length == 250
            assert w.target.t_start == pytest.approx(w.context.t_start + 250 / 500)

    def test_random_is_deterministic(self):
        paths = sample_brownian(100, 5, 0.01, rng_seed=0)
        a = make_windows(paths, 10, 20, "random", seed=7)
        b = make_windows(paths, 10, 20, "random", seed=7)
        for x, y in zip(a, b):
            assert x.context.t_start == y.context.t_start

    def test_last_window_is_the_end(self):
        (path,) = sample_brownian(30, 1, 0.1, rng_seed=0)
        (w,) = make_windows([path], 5, 5, "last")
        np.testing.assert_array_equal(w.target.values, path.values[:, -5:])

    def test_rejects_short_paths(self):
        paths = sample_brownian(8, 1, 0.1, rng_seed=0)
        with pytest.raises(ValueError):
            make_windows(paths, 4, 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(10, 60), st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
    def test_contiguity_property(self, length, lc, lp, seed):
        paths = sample_brownian(length, 2, 0.05, rng_seed=seed)
        for path, w in zip(paths, make_windows(paths, lc, lp, "random", seed=seed)):
            full = np.concatenate([w.context.values, w.target.values], axis=1)
            start = int(round((w.context.t_start - path.t_start) / 0.05))
            np.testing.assert_array_equal(full, path.values[:, start : start + lc + lp])
            assert w.target.t_start == pytest.approx(w.context.t_start + lc * 0.05)

    def test_window_pair_validates(self):
        c = Trajectory([[1.0, 2.0]], dt=0.1, t_start=0.0)
        with pytest.raises(ValueError):
            WindowPair(c, Trajectory([[3.0]], dt=0.1, t_start=0.5))


class TestSamplers:
    def test_brownian_window_shapes(self):
        X, Y = BrownianWindowSampler()(np.random.default_rng(0), 16)
        assert X.shape == (16, 1, 1) and Y.shape == (16, 1, 249)

    def test_bridge_window_covariate(self):
        X, Y, C = BridgeWindowSampler(ctx_len=3, pred_len=10, n_steps=50)(np.random.default_rng(0), 8)
        assert C.shape == (8, 1)
        assert np.all((C >= 2 / 49 - 1e-12) & (C <= 1.0))

    def test_ar_window_shapes(self):
        X, Y = ARWindowSampler()(np.random.default_rng(0), 4)
        assert X.shape == (4, 1, 100) and Y.shape == (4, 1, 250)


class TestCSV:
    def test_round_trip_exact(self, tmp_path):
        traj = Trajectory(np.random.default_rng(0).normal(size=(3, 7)), dt=0.125, t_start=0.5)
        write_trajectory_csv(traj, tmp_path / "x.csv")
        back = read_trajectory_csv(tmp_path / "x.csv")
        np.testing.assert_array_equal(back.values, traj.values)
        assert back.dt == traj.dt and back.t_start == traj.t_start

    def test_header(self, tmp_path):
        write_trajectory_csv(Trajectory(np.zeros((2, 2))), tmp_path / "x.csv")
        assert (tmp_path / "x.csv").read_text(encoding="utf-8").splitlines()[0] == "t,d0,d1"
