import numpy as np
import pytest

from fusebo.capacity import compute_information_budget
from fusebo.ensemble import (
    EnsembleAbortError,
    compute_bootstrap_weights,
    compute_reliability_weights,
    draw_target_biased_bootstrap,
    fit_ensemble,
    gaussian_elpd,
    clusterwise_trend,
    member_stability,
    oob_r2,
    predict_family_moments,
    score_oob,
    sigma_floor_for,
    tune_family_hyperparameters,
    OOBScores,
)
from fusebo.families import FAMILY_IDS, get_family


def small_budget(n_obs=50):
    return compute_information_budget(5.0, n_obs, 100)


def linear_data(n=200, d=5, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    coef = rng.normal(size=d)
    y = X @ coef + noise * rng.normal(size=n)
    return X, y


class TestBootstrapWeights:
    def test_constant_scores_give_uniform_weights(self):
        w = compute_bootstrap_weights(np.ones(6), np.zeros(6))
        assert np.allclose(w, 1.0)

    def test_two_point_cluster_ratio(self):
        w = compute_bootstrap_weights(np.array([0.0, 5.0]), np.zeros(2))
        assert np.allclose(w / w.min(), [1.0, 2.0])
        assert w.sum() == pytest.approx(2.0)

    def test_clusters_are_independent(self):
        y = np.array([0.0, 5.0, 0.0, 5.0])
        labels = np.array([0, 0, 1, 1])
        w = compute_bootstrap_weights(y, labels)
        assert np.allclose(w[:2], w[2:])

    def test_sum_equals_n(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=37)
        labels = rng.integers(0, 3, size=37)
        assert compute_bootstrap_weights(y, labels).sum() == pytest.approx(37.0)


class TestBootstrapDraws:
    def test_single_row_has_no_oob(self):
        idx, oob = draw_target_biased_bootstrap(np.ones(1), 1, np.random.default_rng(0))
        assert idx.tolist() == [0]
        assert oob.size == 0

    def test_oob_fraction_near_inverse_e(self):
        # expected OOB share of a uniform n-of-n bootstrap is (1 - 1/n)^n -> 1/e
        rng = np.random.default_rng(42)
        n = 100
        fractions = []
        for _ in range(1000):
            _, oob = draw_target_biased_bootstrap(np.ones(n), n, rng)
            fractions.append(oob.size / n)
        assert np.mean(fractions) == pytest.approx(np.exp(-1.0), abs=0.03)

    def test_degenerate_weight_vector(self):
        w = np.zeros(5)
        w[0] = 1.0
        idx, oob = draw_target_biased_bootstrap(w, 5, np.random.default_rng(1))
        assert np.all(idx == 0)
        assert set(oob.tolist()) == {1, 2, 3, 4}

    def test_holdout_when_all_drawn(self):
        # force the everything-drawn path with a tiny population
        rng = np.random.default_rng(3)
        for _ in range(50):
            idx, oob = draw_target_biased_bootstrap(np.ones(10), 200, rng)
            if oob.size:
                assert not np.any(np.isin(idx, oob))

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            draw_target_biased_bootstrap(np.zeros(4), 4, np.random.default_rng(0))


class TestTuning:
    def test_exact_trial_count(self):
        X, y = linear_data(60, 4, seed=2)
        budget = compute_information_budget(10.0, 20, 100)
        assert budget.n_budget == 8
        result = tune_family_hyperparameters("linear-L2", X, y, budget, np.random.default_rng(0))
        assert result.n_trials == 8
        assert result.scores.size == 8

    @pytest.mark.parametrize("family_id", ["random-forest", "gradient-boosted-trees"])
    def test_depth_respects_cap(self, family_id):
        budget = compute_information_budget(10.0, 20, 100)
        family = get_family(family_id)
        rng = np.random.default_rng(0)
        for _ in range(40):
            config = family.sample_config(rng, budget)
            assert config["max_depth"] <= budget.caps.max_depth
            assert config["n_estimators"] <= max(budget.caps.max_rounds, 32)

    def test_deterministic_selection(self):
        X, y = linear_data(60, 4, seed=5)
        budget = small_budget()
        a = tune_family_hyperparameters("k-nearest-neighbors", X, y, budget, np.random.default_rng(9))
        b = tune_family_hyperparameters("k-nearest-neighbors", X, y, budget, np.random.default_rng(9))
        assert a.config == b.config


class TestFitEnsemble:
    def test_member_counting(self):
        X, y = linear_data(80, 3, seed=1)
        Y = np.column_stack([y, -y])
        budget = small_budget(80)
        model = fit_ensemble(
            X, Y, budget, np.zeros(80, dtype=int), root_seed=0, iteration=0,
            family_ids=FAMILY_IDS, b_boot=4,
        )
        total = sum(
            model.families[t][f].members.n_members
            for t in range(2)
            for f in model.family_ids(t)
        )
        assert total <= 7 * 2 * 4

    def test_linear_families_nail_linear_data(self):
        X, y = linear_data(200, 5, seed=0, noise=0.0)
        budget = small_budget(200)
        model = fit_ensemble(
            X, y[:, None], budget, np.zeros(200, dtype=int), root_seed=1, iteration=0,
            family_ids=("linear-L2", "linear-L1", "linear-elastic"),
        )
        best_r2 = max(model.oob.raw[(f, 0)].r2 for f in model.family_ids(0))
        assert best_r2 >= 0.99

    def test_same_seed_same_oob_table(self):
        X, y = linear_data(60, 4, seed=4)
        budget = small_budget(60)
        kwargs = dict(
            cluster_labels=np.zeros(60, dtype=int), root_seed=3, iteration=2,
            family_ids=("linear-L2", "k-nearest-neighbors", "random-forest"), b_boot=6,
        )
        a = fit_ensemble(X, y[:, None], budget, **kwargs)
        b = fit_ensemble(X, y[:, None], budget, **kwargs)
        for key, scores in a.oob.raw.items():
            assert scores.as_tuple() == b.oob.raw[key].as_tuple()

    def test_abort_when_too_few_families(self):
        X = np.zeros((20, 2))  # degenerate inputs break most fits
        y = np.full(20, np.nan)
        budget = small_budget(20)
        with pytest.raises(EnsembleAbortError):
            fit_ensemble(X, y[:, None], budget, np.zeros(20, dtype=int), root_seed=0,
                         iteration=0, family_ids=("linear-L2", "linear-L1", "linear-elastic"))


class TestMoments:
    def _model(self):
        X, y = linear_data(100, 3, seed=8)
        budget = small_budget(100)
        return fit_ensemble(
            X, y[:, None], budget, np.zeros(100, dtype=int), root_seed=0, iteration=0,
            family_ids=("linear-L2", "k-nearest-neighbors", "random-forest"), b_boot=6,
        ), X, y

    def test_sigma_floor_applied(self):
        model, X, y = self._model()
        mu, sigma = predict_family_moments(model, "linear-L2", 0, X[:5])
        assert np.all(sigma >= model.sigma_floor[0])

    def test_unfitted_family_raises(self):
        model, X, y = self._model()
        with pytest.raises(KeyError):
            predict_family_moments(model, "feed-forward-net", 0, X[:2])

    def test_two_member_arithmetic(self):
        floor = sigma_floor_for(np.array([0.0, 2.0]))
        preds = np.array([0.0, 2.0])
        assert preds.mean() == 1.0
        assert preds.std(ddof=0) + floor == pytest.approx(1.0 + floor)

    def test_interpolation_vs_extrapolation_spread(self):
        # spread should grow away from the training data on 1-D inputs
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(60, 1))
        y = np.sin(3 * X[:, 0])
        budget = small_budget(60)
        model = fit_ensemble(
            X, y[:, None], budget, np.zeros(60, dtype=int), root_seed=5, iteration=0,
            family_ids=("linear-L2", "random-forest", "feed-forward-net"),
        )
        _, sigma_in = predict_family_moments(model, "feed-forward-net", 0, np.array([[0.0]]))
        _, sigma_out = predict_family_moments(model, "feed-forward-net", 0, np.array([[4.0]]))
        assert sigma_out[0] > sigma_in[0]


class TestOOBScoring:
    def test_perfect_predictions_r2_one(self):
        y = np.random.default_rng(0).normal(size=30)
        assert oob_r2(y, y) == 1.0

    def test_elpd_constant_for_unit_sigma(self):
        y = np.random.default_rng(0).normal(size=50)
        assert gaussian_elpd(y, y, np.ones(50)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_scrambled_cluster_contributes_minus_one(self):
        y = np.arange(10.0)
        labels = np.array([0] * 5 + [1] * 5)
        mu = y.copy()
        mu[5:] = y[5:][::-1]  # reverse ranks in cluster 1
        trend = clusterwise_trend(mu, y, labels)
        assert trend == pytest.approx((1.0 + -1.0) / 2)

    def test_stability_definition(self):
        assert member_stability([0.5, 0.5, 0.5]) == pytest.approx(1.0)
        assert member_stability([1.0]) == 1.0
        mixed = member_stability([0.2, 0.8])
        cv = np.std([0.2, 0.8]) / 0.5
        assert mixed == pytest.approx(1.0 / (1.0 + cv))

    def test_elpd_decreases_with_inflated_sigma(self):
        y = np.random.default_rng(1).normal(size=40)
        mu = y + 0.1
        tight = gaussian_elpd(y, mu, np.full(40, 0.5))
        inflated = gaussian_elpd(y, mu, np.full(40, 5.0))
        assert inflated < tight

    def test_low_coverage_family_floored(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=20)
        good = np.tile(y, (4, 1)) + 0.01 * rng.normal(size=(4, 20))
        sparse = np.full((4, 20), np.nan)
        sparse[0, :5] = y[:5]  # 25% coverage
        raw, norm, agg = score_oob({"good": good, "sparse": sparse}, y, np.zeros(20, dtype=int), 1e-6)
        assert raw["sparse"].r2 <= raw["good"].r2
        assert raw["sparse"].elpd <= raw["good"].elpd


class TestReliability:
    def _scores(self, vals):
        return {
            fam: OOBScores(r2=v, elpd=v, stability=v, trend=v) for fam, v in vals.items()
        }

    def test_identical_scores_equal_weights(self):
        w = compute_reliability_weights(self._scores({"a": 0.6, "b": 0.6}))
        assert w["a"] == pytest.approx(0.5)
        assert w["b"] == pytest.approx(0.5)

    def test_simplex(self):
        w = compute_reliability_weights(self._scores({"a": 0.1, "b": 0.9, "c": 0.4}))
        assert sum(w.values()) == pytest.approx(1.0)

    def test_floor_keeps_everyone_positive(self):
        w = compute_reliability_weights(self._scores({"a": 0.0, "b": 1.0}), w_min=0.02)
        assert w["b"] < 1.0
        assert w["a"] >= 0.02 / (1 + 2 * 0.02)
