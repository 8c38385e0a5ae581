"""
Command-line front end.

Every command reads one JSON config (flags override only top-level fields),
runs its (seed, alpha) cells on the worker pool and writes report.json,
table.csv and, for training commands, metrics.jsonl to the output directory.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from src.core.bounds import (
    conftr_bound,
    cross_entropy,
    dpi_bound,
    dpi_exact,
    list_fano_bound,
    mb_fano_bound,
    simple_fano_bound,
)
from src.core.classifier import ParamStore, load_checkpoint, predict_logits, predict_proba, save_checkpoint
from src.core.conformal import calibrate, predict_sets
from src.core.datagen import discrete_exact_entropy, gmm_cond_entropy_mc, save_ecd1
from src.core.experiment_runner import (
    ExperimentRun,
    ExperimentRunner,
    ProbModel,
    TaskData,
    aggregate,
    atomic_write_json,
    load_task,
    probability_model,
)
from src.core.federated import dirichlet_partition, evaluate_global, evaluate_personalized, run_federated
from src.core.metrics import coverage, derive_seed, inefficiency, split
from src.core.scores import label_scores
from src.core.setsize import run_quantized_setsize
from src.core.sideinfo import SideModel, evaluate_si, train_side_model
from src.core.training import train
from src.core.worker_pool import WorkerPool
from src.models.bound_report import EvalBatch
from src.models.dataset import LabeledDataset
from src.models.errors import ConfigError, InfeasibleRankError, TrainingDivergedError
from src.models.experiment_cell import ExperimentCell
from src.models.experiment_config import ExperimentConfig
from src.models.score_spec import ScoreKind, ScoreSpec
from src.models.train_config import ModelSpec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAIL = 2
EXIT_RUNTIME = 3

COMMANDS = ("gen-data", "calibrate", "evaluate", "bounds", "setsize", "train", "sideinfo", "fed-train", "repro")


class UsageError(Exception):
    """Bad command line; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage, which is reserved for FAIL
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="infocp", description="Information-theoretic conformal prediction experiments")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-dir", default=None, help="Directory for infocp.log, errors.log and session logs")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: ECP_THREADS or CPU count)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "repro":
            p.add_argument("criterion", nargs="?", default="all", help="Criterion id, or 'all' (default)")
            p.add_argument("--list", action="store_true", help="List criterion ids and exit")
        p.add_argument("--config", type=Path, default=None, help="Experiment config (JSON)")
        p.add_argument("--alpha", type=float, nargs="+", default=None, help="Override the alpha list")
        p.add_argument("--seeds", type=int, nargs="+", default=None, help="Override the split seeds")
        p.add_argument("--output", default=None, help="Override the output directory")
        if name == "bounds":
            p.add_argument("--bits", action="store_true", help="Also print bound values in bits")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.override(alphas=args.alpha, seeds=args.seeds, output=args.output)


# ----------------------------------------------------------------------------
# Shared pieces
# ----------------------------------------------------------------------------

def score_specs(cfg: ExperimentConfig) -> list[ScoreSpec]:
    """The configured score plus any extra kinds listed under ``scores``."""
    specs = [cfg.score]
    for kind in cfg.scores:
        kind = ScoreKind(str(kind).upper())
        if all(s.kind is not kind for s in specs):
            specs.append(ScoreSpec(kind=kind, k_reg=cfg.score.k_reg, lambda_reg=cfg.score.lambda_reg,
                                   jitter=cfg.score.jitter))
    return specs


def eval_pool(data: TaskData) -> LabeledDataset:
    """Data that is split into calibration and test parts; a shipped test file wins."""
    return data.test_ds if data.test_ds is not None else data.ds


def exact_entropy(data: TaskData, seed: int) -> Optional[dict]:
    if data.discrete is not None:
        return {"value": discrete_exact_entropy(data.discrete), "source": "exact"}
    if data.mixture is not None:
        est = gmm_cond_entropy_mc(data.mixture, 20000, derive_seed(seed, 11))
        return {"value": est.value, "stderr": est.stderr, "source": "monte_carlo"}
    return None


def group_rows(rows: Sequence[dict], keys: Sequence[str], metrics: Sequence[str]) -> list[dict]:
    """Aggregate cell rows across seeds, one summary row per distinct key tuple."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    summary = []
    for key, members in groups.items():
        stats = aggregate(members, metrics)
        entry = dict(zip(keys, key))
        for metric in metrics:
            entry[metric] = stats.get(metric, {}).get("mean")
            entry[f"{metric}_std"] = stats.get(metric, {}).get("std")
            entry[f"{metric}_formatted"] = stats.get(metric, {}).get("formatted")
        entry["seeds"] = len(members)
        summary.append(entry)
    return summary


def flatten(run: ExperimentRun) -> list[dict]:
    rows = []
    for value in run.values():
        rows.extend(value if isinstance(value, list) else [value])
    return rows


def base_report(command: str, cfg: ExperimentConfig) -> dict:
    return {"command": command, "config": cfg.to_dict()}


def finish(runner: ExperimentRunner, run: ExperimentRun, report: dict, table: Sequence[dict]) -> int:
    runner.write_table(run, table)
    runner.write_report(run, report)
    if run.failed:
        logger.error(f"{run.failed} of {len(run.cells)} cells failed; see errors.log")
        return EXIT_RUNTIME
    return EXIT_OK


# ----------------------------------------------------------------------------
# Cells
# ----------------------------------------------------------------------------

def evaluate_cell(cell: ExperimentCell, ds: LabeledDataset, model: ProbModel,
                  specs: Sequence[ScoreSpec], cal_fraction: float) -> list[dict]:
    """Hard split conformal on one calibration/test split, for every score."""
    cal_ds, test_ds = split(ds, cal_fraction, cell.seed)
    probs_cal, probs_test = model(cal_ds.features), model(test_ds.features)
    rows = []
    for spec in specs:
        cal = calibrate(label_scores(spec, probs_cal, cal_ds.labels, derive_seed(cell.seed, 1)), cell.alpha)
        sets = predict_sets(cal, spec, probs_test, derive_seed(cell.seed, 2))
        rows.append({
            "seed": cell.seed,
            "alpha": cell.alpha,
            "score": spec.kind.value,
            "coverage": coverage(sets, test_ds.labels),
            "inefficiency": inefficiency(sets),
            "q_hat": cal.q_hat,
            "n_cal": cal.n,
            "coverage_upper": 1.0 - cal.alpha_n,
        })
    return rows


def bound_values(method: str, batch: EvalBatch, alpha: float, n_cal: int, delta: float) -> tuple[Optional[float], dict]:
    if method == "dpi":
        report = dpi_bound(batch, alpha, delta, n_cal=n_cal)
        return report.value, report.terms
    if method == "dpi_exact":
        return dpi_exact(batch), {}
    if method == "mb_fano":
        report = mb_fano_bound(batch, alpha, n_cal=n_cal)
        return report.value, report.terms
    if method == "simple_fano":
        report = simple_fano_bound(batch.sets, batch.labels, alpha, n_cal, batch.K)
        return report.value, report.terms
    if method == "conftr":
        mean_size = float(batch.set_sizes.mean())
        if mean_size <= 0:
            logger.warning("Every prediction set is empty; ConfTr bound undefined")
            return None, {}
        return conftr_bound(mean_size, alpha, n_cal, batch.K), {}
    if method == "list_fano":
        return list_fano_bound(batch.sets, alpha, batch.K), {}
    raise ConfigError(f"Unknown bound method {method!r}")


def bounds_cell(cell: ExperimentCell, ds: LabeledDataset, model: ProbModel, cfg: ExperimentConfig) -> list[dict]:
    cal_ds, test_ds = split(ds, cfg.cal_fraction, cell.seed)
    probs_cal, probs_test = model(cal_ds.features), model(test_ds.features)
    spec = cfg.score
    cal = calibrate(label_scores(spec, probs_cal, cal_ds.labels, derive_seed(cell.seed, 1)), cell.alpha)
    batch = EvalBatch(probs=probs_test, labels=test_ds.labels,
                      sets=predict_sets(cal, spec, probs_test, derive_seed(cell.seed, 2)))
    ce = cross_entropy(batch)
    cov = float(batch.covered.mean())
    rows = []
    for method in cfg.bounds:
        value, terms = bound_values(method, batch, cell.alpha, cal.n, cfg.delta)
        rows.append({
            "seed": cell.seed,
            "alpha": cell.alpha,
            "method": method,
            "value": value,
            "value_bits": None if value is None else value / math.log(2.0),
            "cross_entropy": ce,
            "coverage": cov,
            "terms": terms,
        })
    return rows


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    data = load_task(cfg.task)
    out = Path(cfg.output)
    run = runner.create_run("gen-data", out, seeds=[cfg.task.seed])
    path = out / "data.ecd1"
    save_ecd1(data.ds, path)
    dataset = {"n": data.ds.n, "dim": data.ds.dim, "K": data.ds.K, "G": data.ds.G, "path": str(path),
               "label_counts": data.ds.label_counts().tolist()}
    if data.test_ds is not None:
        save_ecd1(data.test_ds, out / "test.ecd1")
        dataset["test_path"] = str(out / "test.ecd1")
    report = {**base_report("gen-data", cfg), "dataset": dataset, "entropy": exact_entropy(data, cfg.task.seed)}
    table = [{"label": k, "count": int(c)} for k, c in enumerate(data.ds.label_counts())]
    logger.info(f"Generated {data.ds.n} examples (dim={data.ds.dim}, K={data.ds.K}) -> {path}")
    return finish(runner, run, report, table)


def cmd_calibrate(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    data = load_task(cfg.task)
    ds, model = eval_pool(data), probability_model(data, cfg.checkpoint)
    run = runner.create_run("calibrate", Path(cfg.output), cfg.seeds, cfg.alphas)

    def fn(cell: ExperimentCell) -> dict:
        cal_ds, _ = split(ds, cfg.cal_fraction, cell.seed)
        scores = label_scores(cfg.score, model(cal_ds.features), cal_ds.labels, derive_seed(cell.seed, 1))
        return {"seed": cell.seed, **calibrate(scores, cell.alpha).to_dict()}

    runner.execute(run, fn)
    rows = flatten(run)
    report = {**base_report("calibrate", cfg), "calibrations": rows}
    return finish(runner, run, report, rows)


def cmd_evaluate(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    data = load_task(cfg.task)
    ds, model, specs = eval_pool(data), probability_model(data, cfg.checkpoint), score_specs(cfg)
    run = runner.create_run("evaluate", Path(cfg.output), cfg.seeds, cfg.alphas)
    runner.execute(run, lambda cell: evaluate_cell(cell, ds, model, specs, cfg.cal_fraction))
    rows = flatten(run)
    summary = group_rows(rows, ("alpha", "score"), ("coverage", "inefficiency"))
    for entry in summary:
        print(f"alpha={entry['alpha']:g} {entry['score']:<12} coverage={entry['coverage']:.4f} "
              f"inefficiency={entry['inefficiency_formatted']}")
    report = {**base_report("evaluate", cfg), "cells": rows, "summary": summary}
    return finish(runner, run, report, summary)


def cmd_bounds(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    too_large = [a for a in cfg.alphas if a >= 0.5]
    if too_large:
        raise ConfigError(
            f"bounds requires alpha < 0.5, got {too_large}: the bounds rely on h_b being "
            f"increasing on (0, 0.5), so replacing the miscoverage by alpha is only valid there"
        )
    data = load_task(cfg.task)
    ds, model = eval_pool(data), probability_model(data, cfg.checkpoint)
    run = runner.create_run("bounds", Path(cfg.output), cfg.seeds, cfg.alphas)
    runner.execute(run, lambda cell: bounds_cell(cell, ds, model, cfg))
    rows = flatten(run)
    summary = group_rows([r for r in rows if r["value"] is not None], ("alpha", "method"),
                         ("value", "cross_entropy", "coverage"))
    truth = exact_entropy(data, cfg.task.seed)
    for entry in summary:
        bits = f" ({entry['value'] / math.log(2.0):.4f} bits)" if args.bits else ""
        print(f"alpha={entry['alpha']:g} {entry['method']:<12} {entry['value']:.4f} nats{bits}")
    report = {**base_report("bounds", cfg), "cells": rows, "summary": summary, "entropy": truth}
    return finish(runner, run, report, [{k: v for k, v in r.items() if k != "terms"} for r in rows])


def cmd_setsize(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    data = load_task(cfg.task)
    ds = eval_pool(data)
    if cfg.checkpoint:
        store = load_checkpoint(Path(cfg.checkpoint))
        logit_fn = lambda features: predict_logits(store, features)
    else:
        model = probability_model(data)
        logit_fn = lambda features: np.log(np.maximum(model(features), 1e-12))
    # Quantized probabilities are already discrete; jitter is not applied here
    spec = ScoreSpec(kind=cfg.score.kind, k_reg=cfg.score.k_reg, lambda_reg=cfg.score.lambda_reg)
    run = runner.create_run("setsize", Path(cfg.output), cfg.seeds)

    def fn(cell: ExperimentCell) -> list[dict]:
        cal_ds, test_ds = split(ds, cfg.cal_fraction, cell.seed)
        rows = run_quantized_setsize(logit_fn(cal_ds.features), cal_ds.labels, logit_fn(test_ds.features),
                                     test_ds.labels, cfg.setsize.clusters, cfg.setsize.alphas, cell.seed,
                                     iters=cfg.setsize.iters, spec=spec)
        return [{"seed": cell.seed, **row.to_dict()} for row in rows]

    runner.execute(run, fn)
    rows = flatten(run)
    table = [{"seed": r["seed"], "alpha": r["alpha"], "h_lb": r["h_lb"],
              "simple": r["simple"]["value"], "model_based": r["model_based"]["value"],
              "max_size": r["max_size"]["value"], "empirical_logsize_plus": r["empirical_logsize_plus"]}
             for r in rows]
    h_lb = float(np.mean([r["h_lb"] for r in rows])) if rows else float("nan")
    report = {**base_report("setsize", cfg), "rows": rows, "h_lb": h_lb,
              "entropy": exact_entropy(data, cfg.task.seed)}
    return finish(runner, run, report, table)


def cmd_train(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    data = load_task(cfg.task)
    if data.test_ds is not None:
        train_ds, heldout = data.ds, data.test_ds
    else:
        train_ds, heldout = split(data.ds, 0.5, derive_seed(cfg.training.seed, 1))
    out = Path(cfg.output)
    spec = ModelSpec(layer_sizes=(train_ds.dim, *cfg.hidden, train_ds.K))
    store = ParamStore.init(spec, cfg.training.seed)
    logger.info(f"Training {cfg.training.loss.value} model {spec.layer_sizes} on {train_ds.n} examples")

    result = train(store, train_ds, cfg.training, heldout=heldout, metrics_path=out / "metrics.jsonl")
    checkpoint = out / "model.json"
    save_checkpoint(result.store, checkpoint)

    model = lambda features: predict_proba(result.store, features)
    run = runner.create_run("train", out, cfg.seeds, cfg.alphas)
    runner.execute(run, lambda cell: evaluate_cell(cell, heldout, model, [ScoreSpec(kind=ScoreKind.THR_PROB)],
                                                   cfg.cal_fraction))
    summary = group_rows(flatten(run), ("alpha", "score"), ("coverage", "inefficiency"))
    history = [m.to_dict() for m in result.history]
    report = {**base_report("train", cfg), "history": history, "checkpoint": str(checkpoint),
              "final": {"summary": summary}}
    return finish(runner, run, report, history)


def cmd_sideinfo(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    data = load_task(cfg.task)
    ds = eval_pool(data)
    if not ds.has_side_info:
        raise ConfigError("sideinfo needs a task with side information "
                          "(grouped_mixture, discrete with G > 0, or a CSV group column)")
    model = probability_model(data, cfg.checkpoint)
    if data.discrete is not None and data.discrete.group_map is not None:
        side_model, eval_ds = SideModel.from_task(data.discrete), ds
    else:
        fit_ds, eval_ds = split(ds, 0.5, derive_seed(cfg.task.seed, 5))
        side_model = train_side_model(fit_ds, cfg.side_info.epochs, cfg.side_info.lr, cfg.task.seed)
    arms = [False, True] if cfg.side_info.mondrian else [False]
    run = runner.create_run("sideinfo", Path(cfg.output), cfg.seeds, cfg.alphas)

    def fn(cell: ExperimentCell) -> list[dict]:
        cal_ds, test_ds = split(eval_ds, cfg.cal_fraction, cell.seed)
        rows = []
        for availability in cfg.side_info.availability:
            for mondrian in arms:
                report = evaluate_si(cal_ds, test_ds, model, side_model, cfg.score, cell.alpha, availability,
                                     derive_seed(cell.seed, 3), mondrian=mondrian)
                rows.append({"seed": cell.seed, "alpha": cell.alpha, **report.to_dict()})
        return rows

    runner.execute(run, fn)
    rows = flatten(run)
    summary = group_rows(rows, ("alpha", "availability", "mondrian"), ("coverage", "inefficiency", "accuracy"))
    for entry in summary:
        print(f"alpha={entry['alpha']:g} availability={entry['availability']:.2f} "
              f"mondrian={entry['mondrian']} inefficiency={entry['inefficiency_formatted']}")
    report = {**base_report("sideinfo", cfg), "cells": rows, "summary": summary}
    return finish(runner, run, report, summary)


def cmd_fed_train(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    data = load_task(cfg.task)
    fed = cfg.federated
    alpha = cfg.alphas[0]
    train_ds, eval_ds = split(data.ds, 0.5, derive_seed(fed.seed, 1))
    train_devices = dirichlet_partition(train_ds, fed.m, fed.dirichlet_conc, fed.seed)
    eval_devices = dirichlet_partition(eval_ds, fed.m, fed.dirichlet_conc, fed.seed)
    trunk_spec = ModelSpec(layer_sizes=(data.ds.dim, *cfg.hidden, data.ds.K))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:
        def on_round(report):
            metrics.write(json.dumps(report.to_dict()) + "\n")
            metrics.flush()
        model, rounds = run_federated(train_devices, eval_devices, trunk_spec, fed, cfg.score, alpha,
                                      pool=runner.pool, on_round=on_round)
    atomic_write_json(out / "global_model.json", model.to_dict())
    personalized = evaluate_personalized(model, train_devices, eval_devices, fed, cfg.score, alpha)

    run = runner.create_run("fed-train", out, cfg.seeds, [alpha])
    runner.execute(run, lambda cell: {"seed": cell.seed, "alpha": cell.alpha,
                                      **evaluate_global(model, eval_devices, cfg.score, cell.alpha,
                                                        cell.seed).to_dict()})
    summary = group_rows(flatten(run), ("alpha",),
                         ("coverage", "inefficiency", "coverage_si", "inefficiency_si"))
    per_summary = aggregate(personalized, ("coverage", "inefficiency"))
    final = {"global": summary, "personalized": per_summary}
    for entry in summary:
        print(f"global: coverage={entry['coverage']:.4f} inefficiency={entry['inefficiency_formatted']} "
              f"with device SI={entry['inefficiency_si_formatted']}")
    report = {**base_report("fed-train", cfg), "rounds": [r.to_dict() for r in rounds],
              "personalized": personalized, "final": final}
    return finish(runner, run, report, [r.to_dict() for r in rounds])


def cmd_repro(cfg: ExperimentConfig, args, runner: ExperimentRunner) -> int:
    from src.cli.repro import CRITERIA, run_criterion

    if args.list:
        for cid, criterion in CRITERIA.items():
            print(f"{cid:<26} {criterion.description}")
        return EXIT_OK
    ids = list(CRITERIA) if args.criterion == "all" else [args.criterion]
    unknown = [c for c in ids if c not in CRITERIA]
    if unknown:
        raise UsageError(f"Unknown criterion {unknown[0]!r}; run 'repro --list' for the ids")

    passed_all = True
    for cid in ids:
        outcome = run_criterion(cid, cfg, runner, config_given=args.config is not None)
        status = "PASS" if outcome.passed else "FAIL"
        measured = ", ".join(f"{k}={_short(v)}" for k, v in outcome.measured.items())
        print(f"{status} {cid}: {measured}")
        passed_all &= outcome.passed
    return EXIT_OK if passed_all else EXIT_FAIL


def _short(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, list) and len(value) > 6:
        return f"[{len(value)} values]"
    return str(value)


HANDLERS: dict[str, Callable[[ExperimentConfig, argparse.Namespace, ExperimentRunner], int]] = {
    "gen-data": cmd_gen_data,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "bounds": cmd_bounds,
    "setsize": cmd_setsize,
    "train": cmd_train,
    "sideinfo": cmd_sideinfo,
    "fed-train": cmd_fed_train,
    "repro": cmd_repro,
}


def run_command(args: argparse.Namespace, runner: Optional[ExperimentRunner] = None) -> int:
    """
    Dispatch a parsed command line.

    Returns:
        0 on success, 1 on usage or config errors, 2 when a repro criterion
        fails, 3 when a cell or a training run fails at runtime
    """
    runner = runner or ExperimentRunner(WorkerPool(args.threads))
    try:
        cfg = load_config(args)
        return HANDLERS[args.command](cfg, args, runner)
    except InfeasibleRankError as e:
        logger.error(f"Infeasible alpha/sample-size combination: {e}")
        print(f"error: {e}", file=sys.stderr)
    except TrainingDivergedError as e:
        logger.error(f"{args.command} aborted: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FileNotFoundError, UsageError) as e:
        logger.error(f"{args.command} aborted: {e}")
        print(f"error: {e}", file=sys.stderr)
    return EXIT_USAGE


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse a command line; raises UsageError on bad usage."""
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise UsageError(f"a command is required: one of {', '.join(COMMANDS)}")
    if args.threads is not None and args.threads < 1:
        raise UsageError(f"--threads must be >= 1, got {args.threads}")
    return args
