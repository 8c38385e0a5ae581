"""
Acceptance runs behind ``repro <criterion-id>``.

Each criterion builds its own seeded task, measures the quantities it checks
and returns PASS/FAIL together with the measured values. Reports go to
<output>/repro/<criterion-id>/report.json.
"""

from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Callable

import numpy as np

from src.core import autodiff as ad
from src.core.bounds import (
    conftr_bound,
    cross_entropy,
    dpi_bound,
    dpi_exact,
    mb_fano_bound,
    population_batch,
    population_bound,
    simple_fano_bound,
)
from src.core.classifier import ParamStore
from src.core.conformal import calibrate, predict_sets, sets_from_scores
from src.core.datagen import (
    DiscreteTaskSpec,
    GaussianMixtureSpec,
    discrete_exact_entropy,
    gen_discrete_task,
    gen_gaussian_mixture,
    gen_grouped_mixture,
    gmm_posterior,
    random_discrete_task,
)
from src.core.diffsort import soft_membership, soft_quantile
from src.core.experiment_runner import ExperimentRunner, load_task
from src.core.federated import (
    dirichlet_partition,
    entropy_decomposition,
    evaluate_global,
    federated_upper_bound,
    run_federated,
)
from src.core.metrics import coverage, derive_seed, make_rng, split
from src.core.scores import label_scores, score_matrix
from src.core.setsize import expected_logsize_lb_mb, expected_logsize_lb_simple
from src.core.sideinfo import evaluate_si, train_side_model
from src.core.training import batch_loss, evaluate_heldout, train
from src.core.worker_pool import WorkerPool
from src.models.bound_report import EvalBatch
from src.models.errors import ConfigError
from src.models.experiment_config import ExperimentConfig
from src.models.score_spec import ScoreKind, ScoreSpec
from src.models.train_config import FederatedConfig, LossKind, ModelSpec, RelaxConfig, TrainConfig

logger = logging.getLogger(__name__)

THR = ScoreSpec(kind=ScoreKind.THR_PROB)
SLACK = 1e-9


@dataclass
class CriterionOutcome:
    passed: bool
    measured: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "measured": self.measured}


@dataclass
class ReproContext:
    cfg: ExperimentConfig
    pool: WorkerPool
    config_given: bool = False


@dataclass(frozen=True)
class Criterion:
    description: str
    run: Callable[[ReproContext], CriterionOutcome]


def _random_batch(rng: np.random.Generator, n: int, K: int, conc: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Dirichlet probability rows with labels drawn from those rows."""
    probs = rng.dirichlet(np.full(K, conc), size=n)
    labels = (rng.random(n)[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    return probs, np.minimum(labels, K - 1)


def _sandwich(covs: np.ndarray, alpha: float, n_cal: int) -> tuple[bool, dict]:
    """Mean coverage within [1 - alpha, 1 - alpha + 1/(n_cal + 1)] up to 3 standard errors."""
    mean = float(covs.mean())
    se = float(covs.std(ddof=1) / math.sqrt(len(covs))) if len(covs) > 1 else 0.0
    low, high = 1.0 - alpha - 3 * se, 1.0 - alpha + 1.0 / (n_cal + 1) + 3 * se
    return low <= mean <= high, {"mean_coverage": mean, "se": se, "low": low, "high": high}


# ----------------------------------------------------------------------------
# Criteria
# ----------------------------------------------------------------------------

def coverage_sandwich(ctx: ReproContext) -> CriterionOutcome:
    mixture = GaussianMixtureSpec.random(K=10, dim=10, separation=2.0, seed=0)
    ds = gen_gaussian_mixture(mixture, 2200, 1)
    probs = gmm_posterior(mixture, ds.features)
    spec = ScoreSpec(kind=ScoreKind.THR_PROB, jitter=1e-6)
    n_cal, splits = 200, 1000
    passed, measured = True, {}

    for alpha in (0.05, 0.1):
        def one_split(i: int) -> float:
            perm = make_rng(derive_seed(0, i)).permutation(ds.n)
            cal_idx, test_idx = perm[:n_cal], perm[n_cal:]
            cal = calibrate(label_scores(spec, probs[cal_idx], ds.labels[cal_idx], derive_seed(i, 1)), alpha)
            sets = predict_sets(cal, spec, probs[test_idx], derive_seed(i, 2))
            return coverage(sets, ds.labels[test_idx])

        covs = np.asarray(ctx.pool.map_ordered(one_split, range(splits)))
        ok, stats = _sandwich(covs, alpha, n_cal)
        passed &= ok
        measured.update({f"alpha={alpha}:{k}": v for k, v in stats.items()})
    return CriterionOutcome(passed, measured)


def _validity_tasks() -> dict[str, DiscreteTaskSpec]:
    return {
        "deterministic": DiscreteTaskSpec(marginal=np.full(4, 0.25), conditional=np.eye(4)),
        "uniform3": DiscreteTaskSpec(marginal=np.full(4, 0.25), conditional=np.full((4, 3), 1.0 / 3.0)),
        "mixed": random_discrete_task(8, 5, seed=3, concentration=0.5),
    }


def bound_validity(ctx: ReproContext) -> CriterionOutcome:
    passed, measured = True, {}
    resamples, n_cal, n_eval, alpha = 2000, 500, 500, 0.1
    spec = ScoreSpec(kind=ScoreKind.THR_PROB, jitter=1e-3)

    for t, (name, task) in enumerate(_validity_tasks().items()):
        h = discrete_exact_entropy(task)
        measured[f"{name}:H"] = h
        for a in (0.05, 0.1):
            for method in ("simple_fano", "mb_fano", "list_fano"):
                value = population_bound(task, method, a)
                measured[f"{name}:{method}@{a}"] = value
                passed &= value >= h - SLACK

        def one_resample(i: int) -> bool:
            ds = gen_discrete_task(task, n_cal + n_eval, derive_seed(7, t, i))
            probs = task.conditional[np.argmax(ds.features, axis=1)]
            cal = calibrate(label_scores(spec, probs[:n_cal], ds.labels[:n_cal], derive_seed(i, 1)), alpha)
            batch = EvalBatch(probs=probs[n_cal:], labels=ds.labels[n_cal:],
                              sets=predict_sets(cal, spec, probs[n_cal:], derive_seed(i, 2)))
            return dpi_bound(batch, alpha, 0.05, n_cal=n_cal).value >= h

        valid = float(np.mean(ctx.pool.map_ordered(one_resample, range(resamples))))
        measured[f"{name}:dpi_valid_fraction"] = valid
        passed &= valid >= 0.95
    return CriterionOutcome(passed, measured)


def ordering_chain(ctx: ReproContext) -> CriterionOutcome:
    n, K, alpha = 200, 10, 0.1
    worst_gap, worst_uniform = -math.inf, 0.0
    for i in range(100):
        probs, labels = _random_batch(make_rng(derive_seed(3, i)), n, K)
        # In-sample calibration keeps realised coverage >= 1 - alpha
        cal = calibrate(label_scores(THR, probs, labels), alpha)
        sets = sets_from_scores(cal, score_matrix(THR, probs))
        simple = simple_fano_bound(sets, labels, alpha, n, K).value
        worst_gap = max(worst_gap, simple - conftr_bound(float(sets.sum(axis=1).mean()), alpha, n, K))
        uniform = EvalBatch(probs=np.full((n, K), 1.0 / K), labels=labels, sets=sets)
        worst_uniform = max(worst_uniform, abs(mb_fano_bound(uniform, alpha, n_cal=n).value - simple))
    passed = worst_gap <= SLACK and worst_uniform <= SLACK
    return CriterionOutcome(passed, {"max_simple_minus_conftr": worst_gap,
                                     "max_uniform_mb_vs_simple": worst_uniform})


def dpi_exact_dominance(ctx: ReproContext) -> CriterionOutcome:
    n, K, alpha = 200, 10, 0.1
    worst = -math.inf
    for i in range(100):
        rng = make_rng(derive_seed(4, i))
        probs, labels = _random_batch(rng, 2 * n, K)
        cal = calibrate(label_scores(THR, probs[:n], labels[:n]), alpha)
        batch = EvalBatch(probs=probs[n:], labels=labels[n:], sets=predict_sets(cal, THR, probs[n:]))
        worst = max(worst, dpi_exact(batch) - cross_entropy(batch))
    return CriterionOutcome(worst <= SLACK, {"max_dpi_exact_minus_ce": worst})


def gradient_check(ctx: ReproContext) -> CriterionOutcome:
    rng = make_rng(5)
    features = rng.normal(size=(8, 3))
    labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    store = ParamStore.zeros(ModelSpec.linear(3, 4))
    passed, measured = True, {}
    for loss in LossKind:
        cfg = TrainConfig(loss=loss, alpha_train=0.2, batch_size=8)
        failures = 0
        for point_idx in range(20):
            point = make_rng(derive_seed(5, point_idx)).normal(scale=0.5, size=store.spec.n_params)
            report = ad.grad_check(lambda p: batch_loss(store, p, features, labels, cfg), point, tol=1e-4)
            failures += not report.passed
        measured[f"{loss.value}:failing_points"] = failures
        passed &= failures == 0
    return CriterionOutcome(passed, measured)


def conformal_training(ctx: ReproContext) -> CriterionOutcome:
    mixture = GaussianMixtureSpec.random(K=10, dim=10, separation=1.5, seed=0)
    train_ds = gen_gaussian_mixture(mixture, 5000, 1)
    heldout = gen_gaussian_mixture(mixture, 4000, 2)
    losses = (LossKind.CE, LossKind.DPI, LossKind.MB_FANO)
    items = [(seed, loss) for seed in range(5) for loss in losses]

    def one_run(item) -> tuple[float, bool]:
        seed, loss = item
        cfg = TrainConfig(loss=loss, alpha_train=0.01, batch_size=500, lr=0.05, epochs=20, seed=seed)
        result = train(ParamStore.init(ModelSpec.linear(10, 10), seed), train_ds, cfg)
        _, ineff = evaluate_heldout(result.store, heldout, 0.1, derive_seed(seed, 1))
        return ineff, result.losses[4] < result.losses[0]

    outcomes = dict(zip(items, ctx.pool.map_ordered(one_run, items)))
    means = {loss.value: float(np.mean([outcomes[(s, loss)][0] for s in range(5)])) for loss in losses}
    decreasing = all(ok for (_, loss), (_, ok) in outcomes.items() if loss.is_conformal)
    passed = decreasing and all(means[l.value] <= 1.05 * means["CE"] for l in losses if l.is_conformal)
    return CriterionOutcome(passed, {**{f"{k}:inefficiency": v for k, v in means.items()},
                                     "conformal_losses_decrease": decreasing})


def mnist_ce(ctx: ReproContext) -> CriterionOutcome:
    cfg = ctx.cfg
    if not ctx.config_given or cfg.task.source != "idx":
        raise ConfigError("mnist-ce needs --config pointing at IDX image/label files (see configs/mnist_ce.json)")
    data = load_task(cfg.task)
    heldout = data.test_ds
    if heldout is None:
        raise ConfigError("mnist-ce needs test_images_path and test_labels_path")
    training = TrainConfig.from_dict({**cfg.training.to_dict(), "loss": "CE"})
    result = train(ParamStore.init(ModelSpec.linear(data.ds.dim, data.ds.K), training.seed), data.ds, training)
    ineffs = [evaluate_heldout(result.store, heldout, 0.01, seed)[1] for seed in range(10)]
    mean = float(np.mean(ineffs))
    return CriterionOutcome(1.8 <= mean <= 2.8, {"mean_inefficiency": mean, "std": float(np.std(ineffs))})


def side_information(ctx: ReproContext) -> CriterionOutcome:
    ds, mixture, _ = gen_grouped_mixture(12, 3, dim=10, seed=0, n=6000)
    fit_ds, eval_ds = split(ds, 0.5, 1)
    side_model = train_side_model(fit_ds, epochs=20, lr=0.1, seed=0)
    model = lambda features: gmm_posterior(mixture, features)
    availabilities = (0.0, 0.3, 1.0)

    def one_split(seed: int) -> list[float]:
        cal_ds, test_ds = split(eval_ds, 0.5, seed)
        return [evaluate_si(cal_ds, test_ds, model, side_model, THR, 0.1, a, derive_seed(seed, 3)).inefficiency
                for a in availabilities]

    per_split = np.asarray(ctx.pool.map_ordered(one_split, range(10)))
    means = per_split.mean(axis=0)
    every_split = bool(np.all(per_split[:, 2] <= per_split[:, 0]))
    monotone = bool(np.all(np.diff(means) <= 0))
    return CriterionOutcome(every_split and monotone, {
        **{f"availability={a}:inefficiency": float(m) for a, m in zip(availabilities, means)},
        "full_si_better_on_every_split": every_split,
        "monotone_in_availability": monotone,
    })


def federated_decomposition(ctx: ReproContext) -> CriterionOutcome:
    worst_identity, worst_margin = 0.0, math.inf
    for i in range(100):
        joint = random_discrete_task(6, 4, seed=derive_seed(9, i), concentration=0.7, G=3).joint()
        d = entropy_decomposition(joint)
        worst_identity = max(worst_identity, abs(d.h_y_given_x - (d.avg_local + d.mi)))
        for method in ("simple_fano", "mb_fano", "list_fano"):
            bound = federated_upper_bound(joint, method, 0.1)
            worst_margin = min(worst_margin, bound.value - d.h_y_given_x)
    passed = worst_identity <= 1e-12 and worst_margin >= -SLACK
    return CriterionOutcome(passed, {"max_identity_error": worst_identity, "min_bound_margin": worst_margin})


def federated_training(ctx: ReproContext) -> CriterionOutcome:
    alpha = 0.1
    ds, _, _ = gen_grouped_mixture(12, 3, dim=10, seed=0, n=8000)
    train_ds, eval_ds = split(ds, 0.5, 1)
    fed = FederatedConfig(m=10, dirichlet_conc=1.0, rounds=10, local_epochs=1, seed=0,
                          base=TrainConfig(loss=LossKind.CE, batch_size=64, lr=0.05))
    train_devices = dirichlet_partition(train_ds, fed.m, fed.dirichlet_conc, fed.seed)
    eval_devices = dirichlet_partition(eval_ds, fed.m, fed.dirichlet_conc, fed.seed)
    model, _ = run_federated(train_devices, eval_devices, ModelSpec.linear(10, 12), fed, THR, alpha, pool=ctx.pool)

    reports = [evaluate_global(model, eval_devices, THR, alpha, seed) for seed in range(10)]
    covs = np.asarray([r.coverage for r in reports])
    n_cal = eval_ds.n // 2
    in_sandwich, stats = _sandwich(covs, alpha, n_cal)
    plain = float(np.mean([r.inefficiency for r in reports]))
    with_si = float(np.mean([r.inefficiency_si for r in reports]))
    return CriterionOutcome(in_sandwich and with_si < plain,
                            {**stats, "inefficiency": plain, "inefficiency_device_si": with_si})


def setsize_bounds(ctx: ReproContext) -> CriterionOutcome:
    task = random_discrete_task(16, 8, seed=11, concentration=0.5)
    h = discrete_exact_entropy(task)
    n = 10_000
    cal_ds = gen_discrete_task(task, n, 12)
    probs_cal = task.conditional[np.argmax(cal_ds.features, axis=1)]
    passed, measured = True, {"H": h}
    for alpha in (0.01, 0.02, 0.05, 0.1, 0.2):
        cal = calibrate(label_scores(THR, probs_cal, cal_ds.labels), alpha)
        batch = population_batch(task, task.conditional, sets_from_scores(cal, 1.0 - task.conditional))
        empirical = float(np.dot(batch.normalized_weights(), np.log(np.maximum(batch.set_sizes, 1))))
        simple = expected_logsize_lb_simple(h, alpha, task.K).value
        mb = expected_logsize_lb_mb(h, alpha, n, task.K, batch).value
        passed &= simple <= empirical + 1e-6 and mb <= empirical + 1e-6 and mb >= simple - 1e-6
        measured.update({f"alpha={alpha}:empirical": empirical, f"alpha={alpha}:simple": simple,
                         f"alpha={alpha}:model_based": mb})
    return CriterionOutcome(passed, measured)


def soft_hard_consistency(ctx: ReproContext) -> CriterionOutcome:
    relax = RelaxConfig(steepness=1e4, temperature=1e-3)
    n_cal, n_test, K, alpha = 64, 64, 10, 0.1
    agree = total = 0
    for i in range(100):
        rng = make_rng(derive_seed(12, i))
        probs, labels = _random_batch(rng, n_cal + n_test, K, conc=1.0)
        neg_log = -np.log(np.maximum(probs, 1e-12))
        cal_scores = neg_log[np.arange(n_cal), labels[:n_cal]]
        test_scores = neg_log[n_cal:]
        hard = sets_from_scores(calibrate(cal_scores, alpha), test_scores)
        soft = soft_membership(soft_quantile(cal_scores, alpha, relax), test_scores, relax).data > 0.5
        agree += int(np.sum(hard == soft))
        total += hard.size
    rate = agree / total
    return CriterionOutcome(rate >= 0.99, {"agreement": rate, "pairs": total})


CRITERIA: dict[str, Criterion] = {
    "coverage-sandwich": Criterion("Mean SCP coverage lies in [1-a, 1-a+1/(n+1)] over 1000 splits", coverage_sandwich),
    "bound-validity": Criterion("Population bounds and DPI resamples upper-bound H(Y|X)", bound_validity),
    "ordering-chain": Criterion("simple Fano <= ConfTr bound; MB Fano with uniform Q equals simple Fano", ordering_chain),
    "dpi-exact-dominance": Criterion("Exact DPI never exceeds the empirical cross-entropy", dpi_exact_dominance),
    "gradient-check": Criterion("Conformal step + every loss passes finite differences", gradient_check),
    "conformal-training": Criterion("DPI/MB-Fano training is no less efficient than CE", conformal_training),
    "mnist-ce": Criterion("Linear CE model on MNIST: THR inefficiency at a=0.01 in [1.8, 2.8]", mnist_ce),
    "side-information": Criterion("Side information reduces inefficiency, monotone in availability", side_information),
    "federated-decomposition": Criterion("H(Y|X) = H(Y|X,Z) + I(Y;Z|X); federated bound is valid", federated_decomposition),
    "federated-training": Criterion("FedAvg model covers; device-id side information helps", federated_training),
    "setsize-bounds": Criterion("Log-size lower bounds below the empirical E[ln|C|]+", setsize_bounds),
    "soft-hard-consistency": Criterion("Sharp soft pipeline reproduces hard SCP sets", soft_hard_consistency),
}


def run_criterion(cid: str, cfg: ExperimentConfig, runner: ExperimentRunner,
                  config_given: bool = False) -> CriterionOutcome:
    """Run one criterion and write its report."""
    criterion = CRITERIA[cid]
    logger.info(f"repro {cid}: {criterion.description}")
    outcome = criterion.run(ReproContext(cfg=cfg, pool=runner.pool, config_given=config_given))
    run = runner.create_run("repro", Path(cfg.output) / "repro" / cid, seeds=[0])
    runner.write_report(run, {"command": "repro", "config": cfg.to_dict(), "criterion": cid,
                              "description": criterion.description, "passed": outcome.passed,
                              "measured": outcome.measured})
    log = logger.info if outcome.passed else logger.warning
    log(f"repro {cid}: {'PASS' if outcome.passed else 'FAIL'}")
    return outcome
