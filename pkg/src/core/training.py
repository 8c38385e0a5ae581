"""
Conformal training: a differentiable simulation of split conformal prediction
inside each mini-batch, optimized with SGD and Nesterov momentum.
"""

from dataclasses import dataclass, field, asdict
import json
import logging
import math
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from src.core import autodiff as ad
from src.core.autodiff import Tape, Tensor
from src.core.classifier import ParamStore, forward, predict_proba
from src.core.conformal import calibrate, predict_sets
from src.core.diffsort import soft_membership, soft_quantile
from src.core.losses import (
    loss_ce_logits,
    loss_conftr,
    loss_conftr_class,
    loss_dpi,
    loss_fano,
    loss_mb_fano,
)
from src.core.metrics import coverage, derive_seed, inefficiency, make_rng, split
from src.core.scores import label_scores
from src.models.dataset import LabeledDataset
from src.models.errors import TrainingDivergedError, min_calibration_size
from src.models.score_spec import ScoreKind, ScoreSpec
from src.models.train_config import LossKind, TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class ConformalStep:
    """Soft sets on the test half of a batch plus what produced them."""

    soft_sets: Tensor
    q_hat: Tensor
    probs_test: Tensor
    logits: Tensor
    labels_test: np.ndarray
    n_cal: int
    tape: Optional[Tape]


def split_batch(n: int) -> tuple[slice, slice]:
    """Calibration half first; an odd leftover joins the test half."""
    if n < 2:
        raise ValueError(f"Conformal step requires a batch of at least 2, got {n}")
    half = n // 2
    return slice(0, half), slice(half, n)


def conformal_step(store: ParamStore, params: Tensor, features: np.ndarray, labels: np.ndarray,
                   cfg: TrainConfig) -> ConformalStep:
    """
    Soft prediction sets for one batch.

    Calibration scores are -log softmax of the true label (thresholding on
    log-probabilities regardless of the evaluation score). The threshold is
    the soft quantile at the conformal rank of the calibration half.

    Raises:
        InfeasibleRankError: when the calibration half is too small for alpha_train
    """
    labels = np.asarray(labels, dtype=np.int64)
    cal, test = split_batch(len(labels))
    logits, _ = forward(store, features, params)
    neg_log_probs = -ad.log_softmax(logits, axis=1)

    cal_rows = np.arange(len(labels))[cal]
    cal_scores = neg_log_probs[cal_rows, labels[cal]]
    q_hat = soft_quantile(cal_scores, cfg.alpha_train, cfg.relax)

    test_scores = neg_log_probs[test]
    soft_sets = soft_membership(q_hat, test_scores, cfg.relax)
    probs_test = ad.exp(-test_scores)
    return ConformalStep(soft_sets=soft_sets, q_hat=q_hat, probs_test=probs_test, logits=logits,
                         labels_test=labels[test], n_cal=cal_rows.size, tape=ad.current_tape())


def conformal_loss(step: ConformalStep, cfg: TrainConfig) -> Tensor:
    """Evaluate the configured conformal loss on a soft step."""
    K = step.soft_sets.shape[1]
    if cfg.loss is LossKind.CONFTR:
        return loss_conftr(step.soft_sets)
    if cfg.loss is LossKind.CONFTR_CLASS:
        return loss_conftr_class(step.soft_sets, step.labels_test, cfg.class_weight)
    if cfg.loss is LossKind.FANO:
        return loss_fano(step.soft_sets, step.labels_test, cfg.alpha_train, step.n_cal, K)
    if cfg.loss is LossKind.MB_FANO:
        return loss_mb_fano(step.soft_sets, step.probs_test, step.labels_test, cfg.alpha_train, step.n_cal)
    if cfg.loss is LossKind.DPI:
        return loss_dpi(step.soft_sets, step.probs_test, step.labels_test, cfg.alpha_train,
                        step.n_cal, cfg.delta)
    raise ValueError(f"{cfg.loss} is not a conformal loss")


def batch_loss(store: ParamStore, params: Tensor, features: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig) -> Tensor:
    """Training loss for one batch under the configured objective."""
    if cfg.loss is LossKind.CE:
        logits, _ = forward(store, features, params)
        return loss_ce_logits(logits, labels)
    return conformal_loss(conformal_step(store, params, features, labels, cfg), cfg)


def lr_at(epoch: int, epochs: int, base_lr: float) -> float:
    """Base rate multiplied by 0.1 after 2/5, 3/5 and 4/5 of the epochs."""
    milestones = [int(epochs * frac) for frac in (0.4, 0.6, 0.8)]
    return base_lr * 0.1 ** sum(epoch >= m for m in milestones if m > 0)


class NesterovSGD:
    """SGD with Nesterov momentum and optional L2 weight decay."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Optional[np.ndarray] = None

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        grad = grad + self.weight_decay * params
        if self.velocity is None:
            self.velocity = np.zeros_like(params)
        self.velocity = self.momentum * self.velocity + grad
        return params - lr * (grad + self.momentum * self.velocity)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    steps: int
    train_accuracy: float
    coverage: Optional[float] = None
    inefficiency: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    store: ParamStore
    history: list[EpochMetrics] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [m.loss for m in self.history]


def evaluate_heldout(store: ParamStore, ds: LabeledDataset, alpha: float, seed: int) -> tuple[float, float]:
    """Hard split-conformal coverage and inefficiency (THR) on a held-out dataset."""
    spec = ScoreSpec(kind=ScoreKind.THR_PROB)
    cal_ds, test_ds = split(ds, 0.5, seed)
    cal = calibrate(label_scores(spec, predict_proba(store, cal_ds.features), cal_ds.labels), alpha)
    sets = predict_sets(cal, spec, predict_proba(store, test_ds.features))
    return coverage(sets, test_ds.labels), inefficiency(sets)


def _batches(n: int, batch_size: int, perm: np.ndarray, min_size: int):
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def train(store: ParamStore, ds: LabeledDataset, cfg: TrainConfig,
          heldout: Optional[LabeledDataset] = None,
          metrics_path: Optional[Path] = None,
          on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """
    Train a classifier under the configured loss.

    Each epoch shuffles with a seed derived from (cfg.seed, epoch). Batches too
    small for the conformal step are skipped.

    Args:
        store: Initial parameters (not modified)
        ds: Training data
        cfg: Training configuration
        heldout: Optional split for per-epoch hard SCP coverage/inefficiency
        metrics_path: Optional JSON-lines file receiving one record per epoch
        on_epoch: Optional callback per epoch

    Returns:
        TrainResult with the trained parameters and per-epoch metrics

    Raises:
        TrainingDivergedError: on a non-finite loss
    """
    if ds.n == 0:
        raise ValueError("Cannot train on an empty dataset")
    if ds.dim != store.spec.input_dim or ds.K != store.spec.K:
        raise ValueError(
            f"Dataset (dim={ds.dim}, K={ds.K}) does not match model {store.spec.layer_sizes}"
        )
    store = store.copy()
    optimizer = NesterovSGD(cfg.momentum, cfg.weight_decay)
    min_batch = 2 * min_calibration_size(cfg.alpha_train) if cfg.loss.is_conformal else 1
    result = TrainResult(store=store)
    last_finite = None

    metrics_file = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        metrics_file = open(metrics_path, "w", encoding="utf-8")

    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg.epochs, cfg.lr)
            perm = make_rng(derive_seed(cfg.seed, epoch)).permutation(ds.n)
            losses = []
            for step, idx in enumerate(_batches(ds.n, cfg.batch_size, perm, min_batch)):
                params = store.leaf()
                with Tape() as tape:
                    loss = batch_loss(store, params, ds.features[idx], ds.labels[idx], cfg)
                value = loss.item()
                if not math.isfinite(value):
                    logger.error(f"Training diverged at epoch {epoch}, step {step}")
                    raise TrainingDivergedError(epoch, step, last_finite)
                last_finite = value
                ad.backward(loss, tape)
                grad = np.zeros_like(store.flat) if params.grad is None else params.grad
                store.flat = optimizer.step(store.flat, grad, lr)
                losses.append(value)

            if not losses:
                raise ValueError(
                    f"No batch of size >= {min_batch} fits n={ds.n} with batch_size={cfg.batch_size}"
                )
            train_pred = np.argmax(predict_proba(store, ds.features), axis=1)
            metrics = EpochMetrics(epoch=epoch, lr=lr, loss=float(np.mean(losses)), steps=len(losses),
                                   train_accuracy=float(np.mean(train_pred == ds.labels)))
            if heldout is not None:
                metrics.coverage, metrics.inefficiency = evaluate_heldout(
                    store, heldout, cfg.eval_alpha, derive_seed(cfg.seed, epoch, 1))
            result.history.append(metrics)
            logger.info(
                f"Epoch {epoch + 1}/{cfg.epochs} [{cfg.loss.value}] loss={metrics.loss:.4f} "
                f"acc={metrics.train_accuracy:.3f} lr={lr:.4g}"
            )
            if metrics_file is not None:
                metrics_file.write(json.dumps(metrics.to_dict()) + "\n")
                metrics_file.flush()
            if on_epoch is not None:
                on_epoch(metrics)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    result.store = store
    return result
