import math

import numpy as np
import pytest

from cro import autodiff as ad
from cro import conformal
from cro.autodiff import Parameter, Tape
from cro.models import PicnnModel
from tests.test_models import make_constant_picnn


class TestQuantile:
    def test_rank_four_of_five(self):
        q, idx = conformal.quantile([1.0, 3.0, 2.0, 4.0], 0.8)
        assert q == 4.0 and idx == 3

    def test_sentinel_when_rank_exceeds_m(self):
        q, idx = conformal.quantile([1.0, 3.0, 2.0, 4.0], 0.9)
        assert math.isinf(q) and idx is None

    def test_single_score(self):
        q, idx = conformal.quantile([3.0], 0.5)
        assert q == 3.0 and idx == 0

    def test_monotone_in_beta(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=40)
        betas = np.linspace(0.05, 0.95, 30)
        qs = [conformal.quantile(scores, b)[0] for b in betas]
        assert all(q2 >= q1 for q1, q2 in zip(qs, qs[1:]))

    def test_float_rank_guard(self):
        # 10 * 0.9 rounds up in float; the rank must still be 9, not 10
        q, idx = conformal.quantile(list(range(1, 10)), 0.9)
        assert q == 9.0

    def test_empty_scores_error(self):
        with pytest.raises(ValueError, match="nonempty"):
            conformal.quantile([], 0.5)

    def test_stable_tie_break(self):
        q, idx = conformal.quantile([2.0, 2.0, 2.0], 0.5)  # k = 2
        assert q == 2.0 and idx == 1


class TestQuantileGradient:
    def test_zero_branch_below_finite_threshold(self):
        # alpha < 1/(M+1): the sentinel is selected and q is constant
        record = conformal.CalibrationRecord(
            scores=np.arange(4.0), alpha=0.1, rank=5, q=math.inf, grad_index=None
        )
        g = conformal.quantile_gradient(record, [np.ones(3)] * 4)
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_selected_score_gradient_matches_finite_differences(self):
        # scores s_i(theta) = theta * i for i = 1..4; alpha = 0.2 selects rank 4
        def scores_of(theta):
            return np.array([theta * i for i in range(1, 5)])

        theta0 = 1.3
        q0, idx = conformal.quantile(scores_of(theta0), 0.8)
        assert idx == 3
        record = conformal.CalibrationRecord(
            scores=scores_of(theta0), alpha=0.2, rank=4, q=q0, grad_index=idx
        )
        grads = [np.array(float(i)) for i in range(1, 5)]
        g = conformal.quantile_gradient(record, grads)
        h = 1e-6
        fd = (conformal.quantile(scores_of(theta0 + h), 0.8)[0]
              - conformal.quantile(scores_of(theta0 - h), 0.8)[0]) / (2 * h)
        assert g == pytest.approx(fd, rel=1e-9)
        assert g == pytest.approx(4.0)

    def test_non_selected_scores_do_not_move_q(self):
        scores = np.array([1.0, 3.0, 2.0, 4.0])
        q0, idx = conformal.quantile(scores, 0.8)
        for i in range(4):
            bumped = scores.copy()
            bumped[i] += 1e-4
            q1, _ = conformal.quantile(bumped, 0.8)
            if i == idx:
                assert q1 == pytest.approx(q0 + 1e-4)
            else:
                assert q1 == q0

    def test_gradient_exactness_random_parametrizations(self):
        # random affine score parametrizations with unique, well-separated ranks
        rng = np.random.default_rng(1)
        for _ in range(100):
            M = int(rng.integers(5, 40))
            a = rng.normal(size=M)
            b = np.sort(rng.normal(size=M) * 10)  # separated intercepts
            theta = rng.normal()
            alpha = float(rng.uniform(1.5 / (M + 1), 0.5))
            scores = a * theta + b
            q0, idx = conformal.quantile(scores, 1 - alpha)
            record = conformal.CalibrationRecord(
                scores=scores, alpha=alpha, rank=0, q=q0, grad_index=idx
            )
            g = conformal.quantile_gradient(record, list(a))
            h = 1e-7
            qp, ip = conformal.quantile(a * (theta + h) + b, 1 - alpha)
            qm, im = conformal.quantile(a * (theta - h) + b, 1 - alpha)
            if ip != idx or im != idx:
                continue  # rank flipped inside the stencil; theorem out of scope
            fd = (qp - qm) / (2 * h)
            assert abs(g - fd) / (abs(fd) + 1e-12) < 1e-6

    def test_quantile_on_tape_routes_gradient(self):
        theta = Parameter(np.array([0.5, 2.0, 1.0]), "theta")
        tape = Tape()
        scores = ad.square(tape.leaf(theta))  # s_i = theta_i^2
        q, record = conformal.quantile_on_tape(scores, 0.5)  # k = 2: middle score
        tape.backward(q)
        g = tape.grad(theta)
        assert record.grad_index == 2  # value 1.0 ranks second
        np.testing.assert_allclose(g, [0.0, 0.0, 2.0])

    def test_quantile_on_tape_infinite(self):
        tape = Tape()
        scores = tape.watch(np.array([1.0, 2.0]))
        q, record = conformal.quantile_on_tape(scores, 0.99)
        assert math.isinf(q) and not record.is_finite


class _StubModel:
    """Score model returning precomputed scores, for calibration tests."""

    kind = "box"

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=float)

    def score_batch(self, X, Y, tape=None):
        return self.scores[: np.atleast_2d(X).shape[0]]


class TestCalibrate:
    def test_uniform_scores_match_order_statistic(self):
        rng = np.random.default_rng(2)
        qs = []
        for _ in range(50):
            scores = rng.uniform(size=999)
            rec = conformal.calibrate(_StubModel(scores), np.zeros((999, 1)),
                                      np.zeros((999, 1)), alpha=0.1)
            qs.append(rec.q)
        assert abs(np.mean(qs) - 0.9) < 0.03

    def test_single_sample(self):
        rec = conformal.calibrate(_StubModel([3.0]), np.zeros((1, 1)),
                                  np.zeros((1, 1)), alpha=0.5)
        assert rec.q == 3.0

    def test_coverage_band_over_exchangeable_splits(self):
        # fixed score function, resampled calibration/test splits: the mean
        # empirical coverage must sit in the split-conformal band
        rng = np.random.default_rng(3)
        alpha, M, n_test = 0.2, 120, 240
        coverages = []
        for _ in range(200):
            x = rng.normal(size=M + n_test)
            y = x + rng.normal(size=M + n_test)
            s = np.abs(y - x)  # fixed nonconformity score
            q, _ = conformal.quantile(s[:M], 1 - alpha)
            coverages.append(np.mean(s[M:] <= q))
        mean_cov = np.mean(coverages)
        se = np.std(coverages) / np.sqrt(len(coverages))
        assert 1 - alpha - 3 * se <= mean_cov <= 1 - alpha + 1 / (M + 1) + 3 * se


class TestEnsureNonempty:
    def test_constant_picnn_threshold_raised(self):
        model = make_constant_picnn(2.0)
        q = conformal.ensure_nonempty(model, np.zeros(3), q=1.0)
        assert q == pytest.approx(2.0 + 1e-9, abs=1e-12)

    def test_noop_when_q_large_enough(self):
        model = make_constant_picnn(2.0)
        assert conformal.ensure_nonempty(model, np.zeros(3), q=5.0) == 5.0

    def test_never_decreases(self):
        rng = np.random.default_rng(4)
        model = PicnnModel(in_dim=3, target_dim=2, width=4, depth=2, seed=5)
        for q in rng.normal(size=10):
            assert conformal.ensure_nonempty(model, rng.normal(size=3), q) >= q

    def test_box_asserts_nonnegative_q(self):
        class Box:
            kind = "box"

        assert conformal.ensure_nonempty(Box(), None, 0.5) == 0.5
        with pytest.raises(ValueError, match="nonempty"):
            conformal.ensure_nonempty(Box(), None, -0.1)

    def test_against_grid_minimum(self):
        # the estimate never undershoots the true minimum, and lands close
        rng = np.random.default_rng(6)
        for seed in range(5):
            model = PicnnModel(in_dim=2, target_dim=2, width=4, depth=2,
                               modified_output=True, eps_inf=0.3, seed=seed)
            x = rng.normal(size=2)
            grid = np.linspace(-5, 5, 201)
            Yg = np.stack(np.meshgrid(grid, grid), axis=-1).reshape(-1, 2)
            svals = model.score_batch(np.tile(x, (Yg.shape[0], 1)), Yg)
            grid_min = svals.min()
            q = conformal.ensure_nonempty(model, x, q=-1e9, seed=seed)
            assert q >= grid_min - 1e-3
            assert q <= grid_min + 0.35  # subgradient estimate stays near
