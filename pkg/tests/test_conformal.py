"""Tests for split conformal calibration and Mondrian calibration."""

import math

import numpy as np
import pytest

from src.core.conformal import (
    calibrate,
    mondrian_calibrate,
    mondrian_predict,
    mondrian_predict_sets,
    predict_set,
    predict_sets,
)
from src.core.datagen import gmm_posterior
from src.core.metrics import coverage, split
from src.core.scores import label_scores
from src.models.calibration import Calibration, GroupCalibration
from src.models.errors import InfeasibleRankError, conformal_rank, min_calibration_size
from src.models.score_spec import ScoreKind, ScoreSpec


class TestRank:

    def test_rank_without_float_drift(self):
        assert conformal_rank(9, 0.1) == 9
        assert conformal_rank(10, 0.1) == 10
        assert conformal_rank(10, 0.2) == 9

    @pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1, 0.2, 0.3])
    def test_min_calibration_size(self, alpha):
        n = min_calibration_size(alpha)
        assert conformal_rank(n, alpha) <= n
        assert n == 1 or conformal_rank(n - 1, alpha) > n - 1

    def test_infeasible_rank_message(self):
        err = InfeasibleRankError(5, 0.1)
        assert err.rank == 6
        assert "at least 9" in str(err)


class TestCalibrate:

    def test_order_statistic(self):
        scores = np.arange(1.0, 11.0)[::-1]
        assert calibrate(scores, 0.1).q_hat == 10.0
        assert calibrate(scores, 0.2).q_hat == 9.0

    def test_small_sample_gives_infinite_threshold(self):
        cal = calibrate(np.arange(5.0), 0.1)
        assert math.isinf(cal.q_hat)
        assert cal.is_trivial
        sets = predict_sets(cal, ScoreSpec(), np.full((2, 3), 1 / 3))
        assert sets.all()

    def test_empty_calibration(self):
        cal = calibrate([], 0.1)
        assert cal.n == 0 and math.isinf(cal.q_hat)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            calibrate([1.0, 2.0], 0.0)
        with pytest.raises(ValueError):
            calibrate([1.0, np.inf], 0.1)

    def test_alpha_n(self):
        cal = Calibration(q_hat=0.4, n=99, alpha=0.1)
        assert cal.alpha_n == pytest.approx(0.09)

    def test_calibration_round_trips_infinity(self):
        cal = Calibration(q_hat=math.inf, n=3, alpha=0.1)
        assert cal.to_dict()["q_hat"] == "inf"
        assert Calibration.from_dict(cal.to_dict()) == cal


class TestPrediction:

    def test_membership_is_score_at_most_threshold(self):
        cal = Calibration(q_hat=0.6, n=10, alpha=0.1)
        ps = predict_set(cal, ScoreSpec(ScoreKind.THR_PROB), [0.5, 0.4, 0.1])
        assert ps.labels() == [0, 1]
        assert 2 not in ps

    def test_sets_are_nested_in_alpha(self, rng):
        probs = rng.dirichlet(np.ones(5), size=200)
        labels = np.array([rng.choice(5, p=p) for p in probs])
        spec = ScoreSpec(ScoreKind.APS)
        scores = label_scores(spec, probs, labels)
        small = predict_sets(calibrate(scores, 0.2), spec, probs)
        large = predict_sets(calibrate(scores, 0.05), spec, probs)
        assert np.all(large | ~small)


class TestCoverageGuarantee:

    def test_mean_coverage_over_splits(self, mixture_spec, mixture_ds):
        alpha = 0.1
        spec = ScoreSpec(ScoreKind.THR_PROB)
        covs = []
        for seed in range(200):
            cal_ds, test_ds = split(mixture_ds, 0.5, seed)
            cal = calibrate(label_scores(spec, gmm_posterior(mixture_spec, cal_ds.features), cal_ds.labels), alpha)
            sets = predict_sets(cal, spec, gmm_posterior(mixture_spec, test_ds.features))
            covs.append(coverage(sets, test_ds.labels))
        mean = float(np.mean(covs))
        assert mean >= 1 - alpha - 0.01
        assert mean <= 1 - alpha + 1 / 201 + 0.01


class TestMondrian:

    def test_per_group_thresholds(self):
        gc = mondrian_calibrate({0: np.arange(1.0, 11.0), 1: np.arange(11.0, 21.0), 2: []}, 0.2)
        assert gc.per_group[0].q_hat == 9.0
        assert gc.per_group[1].q_hat == 19.0
        assert 2 not in gc.per_group

    def test_fallback_for_unknown_group(self):
        fallback = Calibration(q_hat=0.5, n=10, alpha=0.1)
        gc = GroupCalibration(per_group={0: Calibration(q_hat=0.9, n=10, alpha=0.1)}, fallback=fallback)
        scores = np.array([[0.4, 0.8], [0.4, 0.8], [0.4, 0.8]])
        mask, fallbacks = mondrian_predict_sets(gc, np.array([0, -1, 5]), scores)
        assert fallbacks == 2
        np.testing.assert_array_equal(mask, [[True, True], [True, False], [True, False]])

    def test_unknown_group_without_fallback(self):
        gc = GroupCalibration(per_group={0: Calibration(q_hat=0.9, n=10, alpha=0.1)})
        with pytest.raises(KeyError):
            mondrian_predict(gc, 1, ScoreSpec(), [0.5, 0.5])
