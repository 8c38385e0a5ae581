"""Tests for the conditional-entropy upper bounds."""

import math

import numpy as np
import pytest

from src.core.bounds import (
    POPULATION_METHODS,
    bernstein_delta,
    conftr_bound,
    cross_entropy,
    dpi_bound,
    dpi_exact,
    fano_exact_bound,
    list_fano_bound,
    mb_fano_bound,
    population_batch,
    population_bound,
    population_sets,
    simple_fano_bound,
)
from src.core.datagen import DiscreteTaskSpec, discrete_exact_entropy, random_discrete_task
from src.core.metrics import binary_entropy
from src.models.bound_report import BoundReport, EvalBatch


def _random_batch(rng, make_rows, n=300, K=5):
    probs, labels = make_rows(rng, n, K)
    sets = rng.random((n, K)) < 0.4
    return EvalBatch(probs=probs, labels=labels, sets=sets)


class TestBoundReport:

    def test_terms_must_sum_to_value(self):
        with pytest.raises(ValueError):
            BoundReport(method="x", value=1.0, terms={"a": 0.4, "b": 0.4}, alpha=0.1, n=10)

    def test_bits(self):
        report = BoundReport(method="x", value=math.log(2), terms={"a": math.log(2)}, alpha=0.1, n=10)
        assert report.value_bits() == pytest.approx(1.0)

    def test_misaligned_batch(self):
        with pytest.raises(ValueError):
            EvalBatch(probs=np.full((2, 3), 1 / 3), labels=[0], sets=np.ones((2, 3), dtype=bool))


class TestBernstein:

    def test_value(self):
        z = np.array([0.0, 1.0, 0.0, 1.0])
        log_term = math.log(2 / 0.05)
        expected = math.sqrt(2 * (1 / 3) * log_term / 4) + 7 * log_term / 9
        assert bernstein_delta(z, 0.05) == pytest.approx(expected)

    def test_domain(self):
        with pytest.raises(ValueError):
            bernstein_delta([0.5], 0.05)
        with pytest.raises(ValueError):
            bernstein_delta([0.5, 1.5], 0.05)
        with pytest.raises(ValueError):
            bernstein_delta([0.5, 0.5], 1.0)


class TestAlphaDomain:

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 0.7])
    def test_rejected(self, alpha, rng, make_rows):
        batch = _random_batch(rng, make_rows)
        with pytest.raises(ValueError, match="increasing"):
            dpi_bound(batch, alpha)
        with pytest.raises(ValueError):
            mb_fano_bound(batch, alpha)


class TestDpi:

    def test_terms(self, rng, make_rows):
        batch = _random_batch(rng, make_rows)
        report = dpi_bound(batch, 0.1, delta=0.05, n_cal=100)
        assert set(report.terms) == {"h_b", "covered", "uncovered", "cross_entropy"}
        assert report.terms["h_b"] == pytest.approx(binary_entropy(0.1))
        assert report.terms["cross_entropy"] == pytest.approx(cross_entropy(batch))
        assert report.value == pytest.approx(sum(report.terms.values()))

    def test_plugin_is_tighter_than_bernstein(self, rng, make_rows):
        batch = _random_batch(rng, make_rows)
        assert dpi_bound(batch, 0.1, delta=None).value <= dpi_bound(batch, 0.1, delta=0.05).value

    def test_clamps_are_counted(self):
        batch = EvalBatch(probs=np.array([[1.0, 0.0], [0.5, 0.5]]), labels=[1, 0],
                          sets=np.array([[True, False], [True, True]]))
        report = dpi_bound(batch, 0.1)
        assert report.clip_events >= 1
        assert np.isfinite(report.value)

    def test_exact_never_exceeds_cross_entropy(self, rng, make_rows):
        for _ in range(20):
            batch = _random_batch(rng, make_rows, n=50)
            assert dpi_exact(batch) <= cross_entropy(batch) + 1e-12

    def test_exact_equals_cross_entropy_when_coverage_matches_mass(self):
        batch = EvalBatch(probs=np.array([[0.7, 0.3], [0.4, 0.6]]), labels=[0, 1],
                          sets=np.ones((2, 2), dtype=bool))
        assert dpi_exact(batch) == cross_entropy(batch)


class TestFano:

    def test_simple_fano_by_hand(self):
        sets = np.array([[True, True, False, False],
                         [True, False, False, False],
                         [False, True, True, False]])
        labels = [0, 0, 0]
        alpha, n = 0.2, 9
        report = simple_fano_bound(sets, labels, alpha, n, 4)
        covered = (math.log(2) + math.log(1)) / 2
        uncovered = math.log(4 - 2)
        expected = binary_entropy(alpha) + alpha * uncovered + (1 - (alpha - 0.1)) * covered
        assert report.value == pytest.approx(expected)

    def test_uniform_model_fano_equals_simple_fano(self, rng):
        K, n = 6, 200
        probs = np.full((n, K), 1 / K)
        labels = rng.integers(K, size=n)
        sets = rng.random((n, K)) < 0.5
        batch = EvalBatch(probs=probs, labels=labels, sets=sets)
        mb = mb_fano_bound(batch, 0.1, n_cal=50)
        simple = simple_fano_bound(sets, labels, 0.1, 50, K)
        assert mb.value == pytest.approx(simple.value, abs=1e-9)

    def test_mb_fano_clean_batch_has_no_clamps(self):
        batch = EvalBatch(probs=np.array([[0.9, 0.1], [0.8, 0.2]]), labels=[0, 0],
                          sets=np.array([[True, False], [True, False]]))
        report = mb_fano_bound(batch, 0.1)
        assert report.clip_events == 0
        assert report.terms["uncovered"] == 0.0
        assert report.terms["covered"] == pytest.approx(0.0, abs=1e-12)

    def test_simple_fano_below_conftr_on_covering_sets(self):
        sets = np.zeros((10, 5), dtype=bool)
        sets[:, :2] = True
        labels = np.zeros(10, dtype=int)
        simple = simple_fano_bound(sets, labels, 0.1, 1000, 5).value
        assert simple <= conftr_bound(2.0, 0.1, 1000, 5)

    def test_conftr_formula(self):
        alpha, n, K = 0.1, 99, 10
        one_minus = 1 - (alpha - 0.01)
        lam = binary_entropy(alpha) + alpha * math.log(K) - one_minus * math.log(1 - alpha)
        assert conftr_bound(3.0, alpha, n, K) == pytest.approx(lam + one_minus * math.log(3.0))
        with pytest.raises(ValueError):
            conftr_bound(0.0, alpha, n, K)

    def test_list_fano_singletons(self):
        sets = np.eye(4, dtype=bool)
        assert list_fano_bound(sets, 0.1, 4) == pytest.approx(binary_entropy(0.1) + 0.1 * math.log(4))

    def test_empty_sets_count_as_zero_log_size(self):
        sets = np.zeros((3, 4), dtype=bool)
        assert list_fano_bound(sets, 0.1, 4) == pytest.approx(binary_entropy(0.1) + 0.1 * math.log(4))


class TestPopulation:

    def test_deterministic_task(self):
        task = DiscreteTaskSpec(marginal=np.full(4, 0.25), conditional=np.eye(4))
        for method in ("simple_fano", "mb_fano", "list_fano"):
            assert population_bound(task, method, 0.1) >= -1e-9

    def test_uniform_task(self):
        task = DiscreteTaskSpec(marginal=[1.0], conditional=[[1 / 3] * 3])
        for method in ("simple_fano", "mb_fano", "list_fano", "fano_exact"):
            assert population_bound(task, method, 0.1) >= math.log(3) - 1e-9

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_valid_on_random_tasks(self, seed):
        task = random_discrete_task(8, 5, seed=seed, concentration=0.5)
        truth = discrete_exact_entropy(task)
        for alpha in (0.05, 0.1, 0.2):
            for method in ("simple_fano", "mb_fano", "list_fano", "fano_exact"):
                assert population_bound(task, method, alpha) >= truth - 1e-9, method

    def test_dpi_exact_is_tight_for_the_true_model(self, discrete_task):
        truth = discrete_exact_entropy(discrete_task)
        assert population_bound(discrete_task, "dpi_exact", 0.1) == pytest.approx(truth, abs=1e-9)

    def test_population_sets_reach_target_coverage(self, discrete_task):
        sets = population_sets(discrete_task, 1.0 - discrete_task.conditional, 0.2)
        batch = population_batch(discrete_task, discrete_task.conditional, sets)
        assert float(np.dot(batch.normalized_weights(), batch.covered)) >= 0.8 - 1e-9

    def test_fano_exact_uses_realised_miscoverage(self, discrete_task):
        sets = population_sets(discrete_task, 1.0 - discrete_task.conditional, 0.2)
        batch = population_batch(discrete_task, discrete_task.conditional, sets)
        report = fano_exact_bound(batch)
        assert report.alpha == pytest.approx(float(np.dot(batch.normalized_weights(), ~batch.covered)))

    def test_unknown_method(self, discrete_task):
        with pytest.raises(ValueError):
            population_bound(discrete_task, "nope", 0.1)
        assert "dpi_plugin" in POPULATION_METHODS
