import numpy as np
import pytest

from cro import data as D
from cro.data import Dataset, GmmSpec, load_csv, sample_gmm, save_csv, split, synth_battery_data
from cro.reform import ConicProgram, reform_box
from cro.solver import SolverOptions, solve
from cro.tasks import BatteryParams, TaskSpec, battery_taskspec, portfolio_taskspec

EVAL = SolverOptions.for_eval()


def plain_qp(task: TaskSpec, y) -> ConicProgram:
    """Non-robust decision program: min y'Fz + f(z) over the task constraints."""
    return ConicProgram(P=task.P, c_lin=task.p_lin + task.F.T @ np.asarray(y),
                        c0=task.c0, A_eq=task.A_eq, b_eq=task.b_eq,
                        A_in=task.A_ub, b_in=task.b_ub, z_dim=task.p)


class TestBatteryTask:
    def test_zero_prices_idle_battery(self):
        # the idle optimum is degenerate (zero multiplier on an active bound),
        # so primal accuracy scales like sqrt(mu); solve tight
        task = battery_taskspec()
        res = solve(plain_qp(task, np.zeros(24)), SolverOptions.for_eval(tol=1e-12))
        assert res.status == "optimal"
        T = 24
        np.testing.assert_allclose(res.z[:2 * T], 0.0, atol=1e-5)
        np.testing.assert_allclose(res.z[2 * T:], 0.5, atol=1e-5)
        assert res.objective == pytest.approx(0.0, abs=1e-9)

    def test_recursion_encoded_exactly(self):
        task = battery_taskspec()
        pr = BatteryParams()
        rng = np.random.default_rng(0)
        T = pr.horizon
        for _ in range(10_000 // 100):
            z_in = rng.uniform(0, pr.c_in, size=(100, T)) * 0.2
            z_out = rng.uniform(0, pr.c_out, size=(100, T)) * 0.2
            state = np.empty((100, T))
            prev = np.full(100, pr.capacity / 2)
            for t in range(T):
                prev = prev - z_out[:, t] + pr.efficiency * z_in[:, t]
                state[:, t] = prev
            Z = np.hstack([z_in, z_out, state])
            resid = Z @ task.A_eq.T - task.b_eq
            assert np.abs(resid).max() < 1e-10

    def test_toy_horizon_against_grid(self):
        pr = BatteryParams(horizon=2)
        task = battery_taskspec(pr)
        y = np.array([10.0, 60.0])  # buy cheap, sell dear
        res = solve(plain_qp(task, y), EVAL)
        assert res.status == "optimal"
        # exhaustive grid over (z_in, z_out) with the state given by recursion
        g_in = np.linspace(0, pr.c_in, 41)
        g_out = np.linspace(0, pr.c_out, 41)
        best = np.inf
        mesh = np.stack(np.meshgrid(g_in, g_in, g_out, g_out, indexing="ij"),
                        axis=-1).reshape(-1, 4)
        zi, zo = mesh[:, :2], mesh[:, 2:]
        s1 = 0.5 - zo[:, 0] + pr.efficiency * zi[:, 0]
        s2 = s1 - zo[:, 1] + pr.efficiency * zi[:, 1]
        ok = (s1 >= 0) & (s1 <= 1) & (s2 >= 0) & (s2 <= 1)
        vals = (y[0] * (zi[:, 0] - zo[:, 0]) + y[1] * (zi[:, 1] - zo[:, 1])
                + pr.lam * ((s1 - 0.5) ** 2 + (s2 - 0.5) ** 2)
                + pr.eps * (zi ** 2).sum(axis=1) + pr.eps * (zo ** 2).sum(axis=1))
        best = vals[ok].min()
        # the grid is a restriction, so its best is >= the continuous optimum
        assert res.objective <= best + 1e-6
        assert abs(res.objective - best) < 1e-3

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            BatteryParams(efficiency=0.0)
        with pytest.raises(ValueError):
            BatteryParams(c_in=-1.0)


class TestPortfolioTask:
    def test_point_uncertainty_picks_best_asset(self):
        task = portfolio_taskspec(3)
        y0 = np.array([0.1, 0.5, 0.2])
        prog = reform_box(y0, y0.copy(), 0.0, task)
        res = solve(prog, EVAL)
        np.testing.assert_allclose(res.z, [0.0, 1.0, 0.0], atol=1e-6)

    def test_box_value_is_worst_lower_bound(self):
        rng = np.random.default_rng(1)
        task = portfolio_taskspec(3)
        for _ in range(5):
            lo = rng.normal(size=3)
            hi = lo + rng.uniform(0.1, 1.0, size=3)
            res = solve(reform_box(lo, hi, 0.0, task), EVAL)
            assert res.objective == pytest.approx(-lo.max(), abs=1e-7)

    def test_single_asset(self):
        task = portfolio_taskspec(1)
        res = solve(reform_box(np.array([0.3]), np.array([0.6]), 0.0, task), EVAL)
        np.testing.assert_allclose(res.z, [1.0], atol=1e-8)


class TestGmm:
    def test_weight_formulas(self):
        spec = GmmSpec(phi=0.7, alpha=0.9)
        np.testing.assert_allclose(spec.weights, [0.7, 0.3 / 1.9, 0.27 / 1.9],
                                   rtol=1e-12)
        assert spec.weights.sum() == pytest.approx(1.0)

    def test_base_covariance_positive_definite(self):
        spec = GmmSpec()
        assert np.linalg.eigvalsh(spec.sigma_a).min() > 0

    def test_non_pd_covariance_rejected(self):
        bad = -np.eye(4)
        with pytest.raises(np.linalg.LinAlgError):
            GmmSpec(sigma_a=bad)

    def test_component_frequencies(self):
        # separate the means so component membership is identifiable
        spec = GmmSpec(mu_a=np.zeros(4), mu_b=np.full(4, 60.0),
                       mu_c=np.full(4, -60.0))
        n = 100_000
        ds = sample_gmm(spec, n, seed=0)
        joint = np.hstack([ds.X, ds.Y])
        dists = np.stack([np.linalg.norm(joint - m, axis=1) for m in spec.means])
        comp = np.argmin(dists, axis=0)
        freqs = np.bincount(comp, minlength=3) / n
        for k, p in enumerate(spec.weights):
            sigma = np.sqrt(p * (1 - p) / n)
            assert abs(freqs[k] - p) < 3 * sigma + 1e-12

    def test_component_moments_converge(self):
        spec = GmmSpec(mu_a=np.zeros(4), mu_b=np.full(4, 60.0),
                       mu_c=np.full(4, -60.0))
        ds = sample_gmm(spec, 100_000, seed=1)
        joint = np.hstack([ds.X, ds.Y])
        dists = np.stack([np.linalg.norm(joint - m, axis=1) for m in spec.means])
        comp = np.argmin(dists, axis=0)
        for k in range(3):
            sub = joint[comp == k]
            mean_err = np.linalg.norm(sub.mean(axis=0) - spec.means[k])
            cov_err = (np.linalg.norm(np.cov(sub.T) - spec.covariances[k])
                       / np.linalg.norm(spec.covariances[k]))
            assert mean_err < 0.05 * max(1.0, np.linalg.norm(spec.means[k]))
            assert cov_err < 0.05

    def test_seed_determinism(self):
        a = sample_gmm(GmmSpec(), 500, seed=7)
        b = sample_gmm(GmmSpec(), 500, seed=7)
        assert a.content_hash() == b.content_hash()


class TestBatterySurrogate:
    def test_feature_dimension(self):
        ds = synth_battery_data(50, seed=0)
        assert ds.X.shape == (50, 101)
        assert ds.Y.shape == (50, 24)

    def test_prices_mostly_positive(self):
        ds = synth_battery_data(400, seed=1)
        assert np.mean(ds.Y > 0) > 0.99

    def test_spike_days_present(self):
        ds = synth_battery_data(800, seed=2, spike_prob=0.05)
        spike_days = np.mean(ds.Y.max(axis=1) > 500.0)
        assert 0.01 < spike_days < 0.12

    def test_seed_determinism(self):
        assert (synth_battery_data(60, seed=3).content_hash()
                == synth_battery_data(60, seed=3).content_hash())
        assert (synth_battery_data(60, seed=3).content_hash()
                != synth_battery_data(60, seed=4).content_hash())


class TestCsv:
    def test_portfolio_roundtrip(self, tmp_path):
        ds = sample_gmm(GmmSpec(), 200, seed=5)
        path = tmp_path / "p.csv"
        save_csv(ds, path, "portfolio")
        back = load_csv(path, "portfolio")
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.Y, ds.Y)

    def test_battery_roundtrip(self, tmp_path):
        ds = synth_battery_data(40, seed=6)
        path = tmp_path / "b.csv"
        save_csv(ds, path, "battery")
        back = load_csv(path, "battery")
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.Y, ds.Y)

    def test_missing_column_named(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,x2,y1\n0,0,0\n")
        with pytest.raises(D.CsvSchemaError, match="y2"):
            load_csv(path, "portfolio")

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x1,x2,y1,y2\n0,0,0,0\n0,zzz,0,0\n")
        with pytest.raises(D.CsvSchemaError, match=":3"):
            load_csv(path, "portfolio")

    def test_nan_rows_dropped_with_count(self, tmp_path, caplog):
        path = tmp_path / "nan.csv"
        path.write_text("x1,x2,y1,y2\n0,0,0,0\nnan,0,0,0\n1,1,1,1\n")
        with caplog.at_level("WARNING"):
            ds = load_csv(path, "portfolio")
        assert len(ds) == 2
        assert any("dropped 1" in r.message for r in caplog.records)

    def test_large_file_parses_quickly(self, tmp_path):
        import time

        ds = sample_gmm(GmmSpec(), 100_000, seed=8)
        path = tmp_path / "big.csv"
        save_csv(ds, path, "portfolio")
        t0 = time.perf_counter()
        back = load_csv(path, "portfolio")
        assert time.perf_counter() - t0 < 2.0
        assert len(back) == 100_000


class TestSplit:
    def test_random_sizes(self):
        ds = sample_gmm(GmmSpec(), 1000, seed=9)
        out = split(ds, "random", (0.64, 0.16, 0.2), seed=0)
        assert len(out.train) == 640
        assert len(out.cal) == 160
        assert len(out.test) == 200

    def test_partition(self):
        ds = sample_gmm(GmmSpec(), 503, seed=10)
        out = split(ds, "random", (0.5, 0.25, 0.25), seed=1)
        counts = np.bincount(out.assignment, minlength=3)
        assert counts.sum() == 503

    def test_portfolio_benchmark_split(self):
        ds = sample_gmm(GmmSpec(), 2000, seed=11)
        out = split(ds, "random", (0.3, 0.2, 0.5), seed=2)
        assert (len(out.train), len(out.cal), len(out.test)) == (600, 400, 1000)

    def test_temporal_ordering(self):
        ds = synth_battery_data(100, seed=12)
        out = split(ds, "temporal", (0.64, 0.16, 0.2), seed=3)
        assert out.train.timestamps.max() < out.test.timestamps.min()
        assert out.cal.timestamps.max() < out.test.timestamps.min()

    def test_temporal_requires_timestamps(self):
        ds = sample_gmm(GmmSpec(), 100, seed=13)
        with pytest.raises(ValueError, match="timestamps"):
            split(ds, "temporal", (0.6, 0.2, 0.2), seed=0)

    def test_bad_fractions_rejected(self):
        ds = sample_gmm(GmmSpec(), 10, seed=14)
        with pytest.raises(ValueError):
            split(ds, "random", (0.5, 0.2, 0.2), seed=0)
