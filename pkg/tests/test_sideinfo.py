"""Tests for Bayes updates with side information and the SI evaluation."""

import math

import numpy as np
import pytest

from src.core.datagen import DiscreteTaskSpec, gen_discrete_task
from src.core.metrics import make_rng, split
from src.core.sideinfo import (
    SideModel,
    effective_probs,
    effective_probs_batch,
    evaluate_si,
    observed_side_info,
    posterior_with_si,
    side_log_likelihood,
    train_side_model,
)
from src.models.dataset import MISSING_SIDE_INFO
from src.models.score_spec import ScoreKind, ScoreSpec


@pytest.fixture
def label_group_task():
    """Four labels in two groups; z is the group of y."""
    rng = np.random.default_rng(0)
    conditional = rng.dirichlet(np.full(4, 2.0), size=5)
    group_map = np.zeros((5, 4, 2))
    group_map[:, [0, 1], 0] = 1.0
    group_map[:, [2, 3], 1] = 1.0
    return DiscreteTaskSpec(marginal=np.full(5, 0.2), conditional=conditional, group_map=group_map)


class TestPosterior:

    def test_bayes_update(self):
        np.testing.assert_allclose(posterior_with_si([0.5, 0.5], [0.2, 0.8]).p, [0.2, 0.8])

    def test_zero_evidence(self):
        with pytest.raises(ValueError):
            posterior_with_si([1.0, 0.0], [0.0, 1.0])

    def test_missing_side_info_keeps_distribution(self, label_group_task):
        model = SideModel.from_task(label_group_task)
        p = np.array([0.1, 0.2, 0.3, 0.4])
        x = label_group_task.one_hot([0])[0]
        np.testing.assert_allclose(effective_probs(p, model, x, None).p, p)
        np.testing.assert_allclose(effective_probs(p, model, x, 1).p, [0, 0, 3 / 7, 4 / 7])

    def test_batch_rows(self, label_group_task):
        model = SideModel.from_task(label_group_task)
        probs = np.full((3, 4), 0.25)
        features = label_group_task.one_hot([0, 1, 2])
        out = effective_probs_batch(probs, model, features, np.array([0, MISSING_SIDE_INFO, 1]))
        np.testing.assert_allclose(out, [[0.5, 0.5, 0, 0], [0.25] * 4, [0, 0, 0.5, 0.5]])

    def test_uninformative_model(self):
        model = SideModel.uninformative(support=3, K=2, G=4)
        out = effective_probs_batch(np.array([[0.3, 0.7]]), model, np.eye(3)[[1]], np.array([2]))
        np.testing.assert_allclose(out, [[0.3, 0.7]])


class TestSideModel:

    def test_needs_exactly_one_source(self):
        with pytest.raises(ValueError):
            SideModel(G=2, K=2)

    def test_task_without_group_map(self, discrete_task):
        with pytest.raises(ValueError):
            SideModel.from_task(discrete_task)

    def test_training_learns_group(self, label_group_task):
        ds = gen_discrete_task(label_group_task, 1000, seed=1)
        model = train_side_model(ds, epochs=20, lr=0.5, seed=0)
        assert side_log_likelihood(model, ds) > math.log(0.5) + 0.2
        assert model.likelihoods(ds.features[:3]).shape == (3, 4, 2)

    def test_training_needs_side_info(self, tiny_ds):
        with pytest.raises(ValueError):
            train_side_model(tiny_ds, epochs=1, lr=0.1, seed=0)


class TestAvailability:

    def test_mask_rate(self, label_group_task):
        ds = gen_discrete_task(label_group_task, 5000, seed=2)
        z = observed_side_info(ds, 0.3, make_rng(0))
        assert np.mean(z != MISSING_SIDE_INFO) == pytest.approx(0.3, abs=0.03)
        assert np.all(observed_side_info(ds, 0.0, make_rng(0)) == MISSING_SIDE_INFO)


class TestEvaluateSI:

    def _run(self, task, availability, mondrian=False, seed=0):
        ds = gen_discrete_task(task, 4000, seed=3)
        cal_ds, test_ds = split(ds, 0.5, seed)
        conditional = task.conditional
        model = lambda features: conditional[np.argmax(features, axis=1)]
        return evaluate_si(cal_ds, test_ds, model, SideModel.from_task(task), ScoreSpec(ScoreKind.THR_PROB),
                           0.1, availability, seed=seed, mondrian=mondrian)

    def test_side_information_shrinks_sets(self, label_group_task):
        without = self._run(label_group_task, 0.0)
        full = self._run(label_group_task, 1.0)
        assert full.inefficiency < without.inefficiency
        assert full.coverage >= 0.87 and without.coverage >= 0.87

    def test_mondrian_falls_back_without_side_info(self, label_group_task):
        report = self._run(label_group_task, 0.5, mondrian=True)
        assert report.mondrian
        assert report.fallbacks > 0
        assert report.coverage >= 0.87

    def test_availability_domain(self, label_group_task):
        with pytest.raises(ValueError):
            self._run(label_group_task, 1.5)
