import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conformal_ssl.conformal import (
    ConformalCalibrator,
    ConformalConfig,
    calibrate,
    conformal_quantile,
    conformal_score,
    draw_u,
    empirical_coverage,
    predict_set,
    predict_sets,
    rank,
    uniform_draws,
)
from conformal_ssl import _rng
from conformal_ssl.errors import CalibrationError, InvalidArgumentError

from oracles import brute_quantile, brute_score


def cal_at(tau, lam=0.0, k_reg=1, randomized=False):
    return ConformalCalibrator(ConformalConfig(0.1, lam, k_reg, randomized), tau, 1.0, 100)


def random_rows(rng, n, c_max=10):
    for _ in range(n):
        c = int(rng.integers(2, c_max + 1))
        yield rng.dirichlet(np.full(c, 0.5))


class TestRank:
    def test_basic(self):
        r = rank([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(r.order, [1, 2, 0])
        np.testing.assert_allclose(r.cum_mass, [0.5, 0.8, 1.0])

    def test_ties_by_index(self):
        np.testing.assert_array_equal(rank([1 / 3] * 3).order, [0, 1, 2])

    def test_one_hot(self):
        r = rank([0, 1, 0])
        np.testing.assert_array_equal(r.order, [1, 0, 2])
        np.testing.assert_array_equal(r.cum_mass, [1, 1, 1])

    def test_rank_of(self):
        assert rank([0.2, 0.5, 0.3]).rank_of(0) == 3

    def test_invariants(self):
        rng = np.random.default_rng(0)
        for p in random_rows(rng, 200):
            r = rank(p)
            assert sorted(r.order.tolist()) == list(range(len(p)))
            assert np.all(np.diff(r.cum_mass) >= 0)
            assert abs(r.cum_mass[-1] - 1) < 1e-9


class TestScore:
    def test_top_rank_unpenalized(self):
        cfg = ConformalConfig(lam=0.1, k_reg=1)
        assert conformal_score([0.5, 0.3, 0.2], 0, cfg) == 0.5

    def test_second_rank(self):
        cfg = ConformalConfig(lam=0.1, k_reg=1)
        assert conformal_score([0.5, 0.3, 0.2], 1, cfg) == pytest.approx(0.9, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for p in random_rows(rng, 300):
            lam = float(rng.uniform(0, 1))
            k = int(rng.integers(1, len(p) + 1))
            y = int(rng.integers(len(p)))
            u = float(rng.random())
            cfg = ConformalConfig(lam=lam, k_reg=k)
            assert conformal_score(p, y, cfg) == pytest.approx(brute_score(p, y, lam, k), abs=1e-12)
            assert conformal_score(p, y, cfg, u) == pytest.approx(brute_score(p, y, lam, k, u), abs=1e-12)

    @given(st.integers(0, 10_000))
    def test_u_one_equals_deterministic(self, seed):
        rng = np.random.default_rng(seed)
        p = next(random_rows(rng, 1))
        y = int(rng.integers(len(p)))
        cfg = ConformalConfig(lam=float(rng.uniform(0, 2)), k_reg=1)
        assert conformal_score(p, y, cfg, 1.0) == pytest.approx(conformal_score(p, y, cfg), abs=1e-12)

    @pytest.mark.parametrize("u", [-0.1, 1.5])
    def test_u_out_of_range(self, u):
        with pytest.raises(InvalidArgumentError):
            conformal_score([0.5, 0.5], 0, ConformalConfig(), u)


class TestCalibrate:
    def test_order_statistic(self):
        assert conformal_quantile([0.1, 0.2, 0.3, 0.4], 0.5) == 0.3

    def test_clip_to_max(self):
        assert conformal_quantile([0.7], 0.1) == 0.7

    @pytest.mark.parametrize("alpha", [0.05, 0.1, 0.5, 0.9])
    def test_constant_scores(self, alpha):
        assert conformal_quantile([0.42] * 17, alpha) == 0.42

    def test_float_noise_in_index(self):
        # (9 + 1) * 0.9 must be 9, not 9.000000000000002 -> 10
        assert conformal_quantile(np.arange(9.0), 0.1) == 8.0
        assert conformal_quantile(np.arange(19.0), 0.1) == 17.0

    def test_end_to_end_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for trial in range(40):
            n, c = int(rng.integers(10, 60)), int(rng.integers(2, 8))
            P = rng.dirichlet(np.ones(c), size=n)
            y = rng.integers(0, c, n)
            alpha = float(rng.choice([0.05, 0.1, 0.2, 0.3]))
            cfg = ConformalConfig(alpha=alpha, lam=0.05, k_reg=1, randomized=bool(trial % 2), seed=trial)
            cal = calibrate(P, y, cfg)
            u = uniform_draws(cfg.seed, _rng.CALIB_U, n) if cfg.randomized else [None] * n
            scores = [brute_score(list(P[i]), int(y[i]), 0.05, 1, u[i]) for i in range(n)]
            assert cal.tau_hat == brute_quantile(scores, alpha)
            assert cal.n_calib == n

    def test_too_small(self):
        with pytest.raises(CalibrationError, match="calibration fold too small"):
            calibrate(np.full((5, 2), 0.5), np.zeros(5, dtype=int), ConformalConfig())

    def test_label_range(self):
        with pytest.raises(InvalidArgumentError):
            calibrate(np.full((10, 2), 0.5), np.full(10, 2), ConformalConfig())

    def test_k_reg_above_classes(self):
        with pytest.raises(InvalidArgumentError):
            calibrate(np.full((10, 2), 0.5), np.zeros(10, dtype=int), ConformalConfig(k_reg=3))

    @pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"alpha": 1.0}, {"lam": -1}, {"k_reg": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidArgumentError):
            ConformalConfig(**kw)


class TestPredictSet:
    def test_no_regularization(self):
        s = predict_set([0.6, 0.3, 0.1], cal_at(0.95))
        assert sorted(s.tolist()) == [0, 1, 2]

    def test_regularization_shrinks(self):
        s = predict_set([0.6, 0.3, 0.1], cal_at(0.95, lam=1.0, k_reg=1))
        assert sorted(s.tolist()) == [0, 1]

    def test_large_tau_gives_full_set(self):
        rng = np.random.default_rng(3)
        for p in random_rows(rng, 200):
            c = len(p)
            for randomized in (False, True):
                cal = cal_at(1 + 0.3 * (c - 1), lam=0.3, k_reg=1, randomized=randomized)
                assert len(predict_set(p, cal, 0.999 if randomized else None)) == c

    def test_randomized_requires_u_in_batch(self):
        with pytest.raises(InvalidArgumentError):
            predict_sets([[0.5, 0.5]], cal_at(0.5, randomized=True))

    def test_empty_randomized_clamps_to_top1(self):
        s = predict_set([0.9, 0.1], cal_at(0.05, randomized=True), u=0.5)
        assert s.tolist() == [0]

    def test_deterministic_contains_top1(self):
        rng = np.random.default_rng(4)
        for p in random_rows(rng, 500):
            tau = float(rng.uniform(1e-6, 2))
            s = predict_set(p, cal_at(tau, lam=0.2, k_reg=1))
            assert int(np.argmax(p)) in s.tolist()

    def test_randomized_consistency_with_score(self):
        # label in its own set (same u) iff its score <= tau, barring top-1 clamps
        rng = np.random.default_rng(5)
        for p in random_rows(rng, 2000, c_max=5):
            c = len(p)
            lam, k = float(rng.uniform(0, 0.5)), int(rng.integers(1, c + 1))
            tau, u = float(rng.uniform(0, 1.5)), float(rng.random())
            cal = cal_at(tau, lam, k, randomized=True)
            members = set(predict_set(p, cal, u).tolist())
            cfg = cal.config
            inside = [y for y in range(c) if conformal_score(p, y, cfg, u) <= tau]
            if inside:
                assert members == set(inside)
            else:
                assert members == {int(np.argmax(p))}

    def test_deterministic_one_sided_consistency(self):
        rng = np.random.default_rng(6)
        for p in random_rows(rng, 2000, c_max=5):
            c = len(p)
            lam, k = float(rng.uniform(0, 0.5)), int(rng.integers(1, c + 1))
            tau = float(rng.uniform(0, 1.5))
            cfg = ConformalConfig(lam=lam, k_reg=k)
            members = set(predict_set(p, cal_at(tau, lam, k)).tolist())
            r = rank(p)
            for y in range(c):
                if conformal_score(p, y, cfg) < tau:
                    assert y in members
                pos = r.rank_of(y)
                if y in members and pos > 1:
                    prev = r.cum_mass[pos - 2] + lam * max(pos - 1 - k, 0)
                    assert prev < tau


class TestCoverage:
    def test_full_sets(self):
        assert empirical_coverage([np.arange(3)] * 4, [0, 1, 2, 1]) == 1.0

    def test_wrong_singletons(self):
        assert empirical_coverage([np.array([0])] * 3, [1, 2, 1]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            empirical_coverage([np.array([0])], [0, 1])

    def test_marginal_coverage_over_seeds(self):
        """Perfectly exchangeable data: labels drawn from the rows themselves."""
        alpha, n = 0.1, 1000
        bound = 1 - alpha - 3 * math.sqrt(alpha * (1 - alpha) / n)
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            P = rng.dirichlet(np.full(6, 0.3), size=2 * n)
            y = (rng.random((2 * n, 1)) > np.cumsum(P, axis=1)).sum(axis=1)
            y = np.minimum(y, 5)
            cfg = ConformalConfig(alpha=alpha, lam=0.05, k_reg=2, randomized=True, seed=seed)
            cal = calibrate(P[:n], y[:n], cfg)
            sets = predict_sets(P[n:], cal, draw_u(cal, n))
            hits += empirical_coverage(sets, y[n:]) >= bound
        assert hits >= 19

    def test_deterministic_mode_coverage(self):
        alpha, n = 0.1, 1000
        rng = np.random.default_rng(7)
        P = rng.dirichlet(np.full(6, 0.3), size=2 * n)
        y = np.minimum((rng.random((2 * n, 1)) > np.cumsum(P, axis=1)).sum(axis=1), 5)
        cal = calibrate(P[:n], y[:n], ConformalConfig(alpha=alpha))
        cov = empirical_coverage(predict_sets(P[n:], cal), y[n:])
        assert cov >= 1 - alpha - 3 * math.sqrt(alpha * (1 - alpha) / n)

    def test_draw_u_is_keyed_per_sample(self):
        cal = cal_at(0.5, randomized=True)
        u = draw_u(cal, 10)
        np.testing.assert_array_equal(draw_u(cal, 4, offset=6), u[6:])
        assert draw_u(cal_at(0.5), 3) is None
