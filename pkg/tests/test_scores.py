"""Tests for nonconformity scores."""

import math

import numpy as np
import pytest

from src.core.scores import label_scores, score, score_all, score_matrix
from src.models.dataset import ProbVector
from src.models.score_spec import ScoreKind, ScoreSpec

P = np.array([0.5, 0.3, 0.2])


class TestThresholdScores:

    def test_thr_prob(self):
        np.testing.assert_allclose(score_all(ScoreSpec(ScoreKind.THR_PROB), P), [0.5, 0.7, 0.8])

    def test_thr_logprob(self):
        np.testing.assert_allclose(score_all(ScoreSpec(ScoreKind.THR_LOGPROB), P), -np.log(P))

    def test_logprob_clamps_zero(self):
        s = score_all(ScoreSpec(ScoreKind.THR_LOGPROB), np.array([1.0, 0.0]))
        assert np.isfinite(s).all()
        assert s[1] == pytest.approx(-math.log(1e-12))


class TestAdaptiveScores:

    def test_aps_cumulative_mass(self):
        np.testing.assert_allclose(score_all(ScoreSpec(ScoreKind.APS), P), [0.5, 0.8, 1.0])

    def test_raps_penalty(self):
        spec = ScoreSpec(ScoreKind.RAPS, k_reg=1, lambda_reg=0.1)
        np.testing.assert_allclose(score_all(spec, P), [0.5, 0.9, 1.2])

    def test_ties_broken_by_label_index(self):
        p = np.array([0.25, 0.5, 0.25])
        np.testing.assert_allclose(score_all(ScoreSpec(ScoreKind.APS), p), [0.75, 0.5, 1.0])

    def test_raps_with_zero_lambda_equals_aps(self, rng):
        probs = rng.dirichlet(np.ones(5), size=20)
        np.testing.assert_allclose(score_matrix(ScoreSpec(ScoreKind.RAPS, k_reg=2), probs),
                                   score_matrix(ScoreSpec(ScoreKind.APS), probs))


class TestJitter:

    def test_one_draw_per_row(self, rng):
        probs = rng.dirichlet(np.ones(4), size=6)
        spec = ScoreSpec(ScoreKind.THR_PROB, jitter=0.01)
        offset = score_matrix(spec, probs, seed=3) - (1.0 - probs)
        np.testing.assert_allclose(offset, offset[:, :1].repeat(4, axis=1))
        assert np.all((offset >= 0) & (offset <= 0.01))

    def test_seed_required(self):
        with pytest.raises(ValueError):
            score_all(ScoreSpec(ScoreKind.THR_PROB, jitter=0.1), P)

    def test_same_seed_same_scores(self):
        spec = ScoreSpec(ScoreKind.APS, jitter=0.1)
        np.testing.assert_array_equal(score_all(spec, P, seed=4), score_all(spec, P, seed=4))


class TestConsistency:

    def test_score_matches_score_all(self):
        spec = ScoreSpec(ScoreKind.RAPS, k_reg=0, lambda_reg=0.05)
        full = score_all(spec, ProbVector(P))
        for y in range(3):
            assert score(spec, P, y) == pytest.approx(full[y])

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            score(ScoreSpec(), P, 3)

    def test_label_scores_pick_true_labels(self, rng):
        probs = rng.dirichlet(np.ones(3), size=5)
        labels = np.array([0, 1, 2, 1, 0])
        np.testing.assert_allclose(label_scores(ScoreSpec(), probs, labels),
                                   1.0 - probs[np.arange(5), labels])

    def test_invalid_probabilities(self):
        with pytest.raises(ValueError):
            score_all(ScoreSpec(), np.array([0.5, 0.6]))


class TestScoreSpec:

    def test_kind_from_string(self):
        assert ScoreSpec(kind="aps").kind is ScoreKind.APS

    def test_negative_fields_rejected(self):
        with pytest.raises(ValueError):
            ScoreSpec(jitter=-1.0)
        with pytest.raises(ValueError):
            ScoreSpec(ScoreKind.RAPS, lambda_reg=-0.1)
