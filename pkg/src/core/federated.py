"""
Simulated federated learning with device identity as side information.

The global model carries a classifier trunk Q(y|x) and two auxiliary heads
over the device id z: Q(z|x), whose cross-entropy upper-bounds I(Y;Z|X), and
Q(z|x,y), which feeds the Bayes update at prediction time. The Q(z|x,y) head
reads detached trunk logits, so its loss never reaches the trunk.
"""

from dataclasses import dataclass, asdict
import logging
from typing import Callable, Optional

import numpy as np
from scipy.special import softmax, xlogy

from src.core import autodiff as ad
from src.core.autodiff import Tape, Tensor
from src.core.bounds import population_bound
from src.core.classifier import ParamStore, logits_tensor, predict_logits, predict_proba
from src.core.conformal import calibrate, predict_sets
from src.core.datagen import DiscreteTaskSpec
from src.core.losses import loss_ce_logits
from src.core.metrics import coverage, derive_seed, inefficiency, make_rng, split
from src.core.scores import label_scores
from src.core.training import NesterovSGD, conformal_loss, conformal_step, lr_at
from src.core.worker_pool import WorkerPool
from src.models.dataset import LabeledDataset
from src.models.errors import min_calibration_size
from src.models.score_spec import ScoreSpec
from src.models.train_config import FederatedConfig, ModelSpec, TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class GlobalModel:
    """Trunk classifier plus the two device-id heads."""

    trunk: ParamStore
    head_z_x: ParamStore
    head_z_xy: ParamStore

    @classmethod
    def init(cls, trunk_spec: ModelSpec, m: int, seed: int) -> "GlobalModel":
        dim, K = trunk_spec.input_dim, trunk_spec.K
        return cls(
            trunk=ParamStore.init(trunk_spec, seed),
            head_z_x=ParamStore.zeros(ModelSpec.linear(dim + K, m)),
            head_z_xy=ParamStore.zeros(ModelSpec.linear(dim + 2 * K, m)),
        )

    @property
    def m(self) -> int:
        return self.head_z_x.spec.K

    @property
    def K(self) -> int:
        return self.trunk.spec.K

    def sizes(self) -> tuple[int, int, int]:
        return self.trunk.flat.size, self.head_z_x.flat.size, self.head_z_xy.flat.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.trunk.flat, self.head_z_x.flat, self.head_z_xy.flat])

    def with_flat(self, flat: np.ndarray) -> "GlobalModel":
        a, b, _ = self.sizes()
        return GlobalModel(
            trunk=ParamStore(self.trunk.spec, flat[:a]),
            head_z_x=ParamStore(self.head_z_x.spec, flat[a:a + b]),
            head_z_xy=ParamStore(self.head_z_xy.spec, flat[a + b:]),
        )

    def copy(self) -> "GlobalModel":
        return self.with_flat(self.flat().copy())

    def device_likelihoods(self, features: np.ndarray) -> np.ndarray:
        """(n, K, m) array of Q(z | x, y) from the side-information head."""
        logits = predict_logits(self.trunk, features)
        n = len(features)
        out = np.empty((n, self.K, self.m))
        for y in range(self.K):
            inputs = np.concatenate([features, logits, ad.one_hot(np.full(n, y), self.K)], axis=1)
            out[:, y, :] = softmax(predict_logits(self.head_z_xy, inputs), axis=1)
        return out

    def to_dict(self) -> dict:
        return {"trunk": self.trunk.to_dict(), "head_z_x": self.head_z_x.to_dict(),
                "head_z_xy": self.head_z_xy.to_dict()}


def dirichlet_partition(ds: LabeledDataset, m: int, conc: float, seed: int) -> list[LabeledDataset]:
    """
    Label-skewed split across m devices.

    For each label, device proportions are drawn from Dir(conc * 1_m) and the
    label's examples are dealt out by largest-remainder rounding, so every
    example lands on exactly one device. Proportions depend only on (seed,
    label), so two splits partitioned with one seed share their device label mix.
    """
    if m < 1:
        raise ValueError(f"Device count must be >= 1, got {m}")
    if m > ds.n:
        raise ValueError(f"Cannot partition n={ds.n} examples over m={m} devices")
    if not conc > 0:
        raise ValueError(f"Dirichlet concentration must be positive, got {conc}")
    shuffle_rng = make_rng(derive_seed(seed, 0))
    assignments = [[] for _ in range(m)]
    for label in range(ds.K):
        members = np.flatnonzero(ds.labels == label)
        if len(members) == 0:
            continue
        members = shuffle_rng.permutation(members)
        proportions = make_rng(derive_seed(seed, 1, label)).dirichlet(np.full(m, conc))
        counts = _largest_remainder(proportions, len(members))
        offsets = np.concatenate([[0], np.cumsum(counts)])
        for device in range(m):
            assignments[device].extend(members[offsets[device]:offsets[device + 1]].tolist())

    devices = [ds.subset(np.sort(np.asarray(idx, dtype=np.int64))) for idx in assignments]
    logger.info(f"Dirichlet({conc}) partition over {m} devices: sizes {[d.n for d in devices]}")
    return devices


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - counts.sum()
    # Stable order keeps ties deterministic (lower device index first)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _split_params(global_model: GlobalModel, params: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    a, b, _ = global_model.sizes()
    return params[:a], params[a:a + b], params[a + b:]


def local_objective(global_model: GlobalModel, params: Tensor, features: np.ndarray,
                    labels: np.ndarray, device_id: int, cfg: TrainConfig) -> Tensor:
    """
    Per-device loss: base loss + mean -ln Q(z=device | x) + mean -ln Q(z=device | x, y).

    Batches too small for the conformal step train the trunk with cross-entropy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    trunk_p, zx_p, zxy_p = _split_params(global_model, params)
    logits = logits_tensor(global_model.trunk.spec, trunk_p, features)

    if cfg.loss.is_conformal and n >= 2 * min_calibration_size(cfg.alpha_train):
        base = conformal_loss(conformal_step(global_model.trunk, trunk_p, features, labels, cfg), cfg)
    else:
        base = loss_ce_logits(logits, labels)

    devices = np.full(n, device_id)
    zx_in = ad.concat([Tensor(features), logits], axis=1)
    device_term = loss_ce_logits(logits_tensor(global_model.head_z_x.spec, zx_p, zx_in), devices)

    zxy_in = ad.concat([Tensor(features), ad.detach(logits), Tensor(ad.one_hot(labels, global_model.K))], axis=1)
    side_term = loss_ce_logits(logits_tensor(global_model.head_z_xy.spec, zxy_p, zxy_in), devices)
    return base + device_term + side_term


def local_train(global_model: GlobalModel, device_ds: LabeledDataset, device_id: int,
                cfg: FederatedConfig, round_idx: int) -> GlobalModel:
    """Copy the global model and train it on one device for cfg.local_epochs."""
    model = global_model.copy()
    if device_ds.n == 0 or cfg.local_epochs == 0:
        return model
    base = cfg.base
    lr = lr_at(round_idx, max(cfg.rounds, 1), base.lr)
    flat = model.flat()
    optimizer = NesterovSGD(base.momentum, base.weight_decay)
    for epoch in range(cfg.local_epochs):
        perm = make_rng(derive_seed(cfg.seed, round_idx, device_id, epoch)).permutation(device_ds.n)
        for start in range(0, device_ds.n, base.batch_size):
            idx = perm[start:start + base.batch_size]
            params = Tensor(flat, requires_grad=True)
            with Tape() as tape:
                loss = local_objective(model, params, device_ds.features[idx], device_ds.labels[idx],
                                       device_id, base)
            ad.backward(loss, tape)
            flat = optimizer.step(flat, params.grad, lr)
    return model.with_flat(flat)


def fedavg_round(global_model: GlobalModel, devices: list[LabeledDataset], cfg: FederatedConfig,
                 round_idx: int = 0, pool: Optional[WorkerPool] = None) -> GlobalModel:
    """
    One round of federated averaging, weighted by device example counts.

    Devices may train concurrently; aggregation runs in device-index order.
    """
    active = [(i, d) for i, d in enumerate(devices) if d.n > 0]
    if not active:
        raise ValueError("fedavg_round requires at least one nonempty device")
    if cfg.local_epochs == 0:
        return global_model.copy()

    def run(item):
        device_id, device_ds = item
        return local_train(global_model, device_ds, device_id, cfg, round_idx).flat()

    pool = pool or WorkerPool(max_workers=1)
    local_flats = pool.map_ordered(run, active)
    weights = np.array([d.n for _, d in active], dtype=np.float64)
    weights /= weights.sum()
    averaged = np.zeros_like(local_flats[0])
    for w, flat in zip(weights, local_flats):
        averaged += w * flat
    return global_model.with_flat(averaged)


def personalize(global_model: GlobalModel, device_ds: LabeledDataset, epochs: int, lr: float,
                seed: int = 0, batch_size: int = 64, momentum: float = 0.9) -> ParamStore:
    """Fine-tune the trunk on one device's data with cross-entropy."""
    if device_ds.n == 0:
        raise ValueError("Cannot personalize on an empty device")
    store = global_model.trunk.copy()
    optimizer = NesterovSGD(momentum)
    for epoch in range(epochs):
        perm = make_rng(derive_seed(seed, epoch)).permutation(device_ds.n)
        for start in range(0, device_ds.n, batch_size):
            idx = perm[start:start + batch_size]
            params = store.leaf()
            with Tape() as tape:
                loss = loss_ce_logits(logits_tensor(store.spec, params, device_ds.features[idx]),
                                      device_ds.labels[idx])
            ad.backward(loss, tape)
            store.flat = optimizer.step(store.flat, params.grad, lr)
    return store


@dataclass
class RoundReport:
    round: int
    coverage: float
    inefficiency: float
    coverage_si: float
    inefficiency_si: float

    def to_dict(self) -> dict:
        return asdict(self)


def _with_device_ids(devices: list[LabeledDataset], m: int) -> LabeledDataset:
    nonempty = [d for d in devices if d.n > 0]
    ids = np.concatenate([np.full(d.n, i) for i, d in enumerate(devices) if d.n > 0])
    merged = LabeledDataset(
        features=np.concatenate([d.features for d in nonempty]),
        labels=np.concatenate([d.labels for d in nonempty]),
        K=devices[0].K,
    )
    return merged.with_side_info(ids, m)


def evaluate_global(global_model: GlobalModel, devices: list[LabeledDataset], spec: ScoreSpec,
                    alpha: float, seed: int, round_idx: int = 0) -> RoundReport:
    """
    Server-side hard SCP on the pooled device data, with and without device-id side information.
    """
    pooled = _with_device_ids(devices, global_model.m)
    cal_ds, test_ds = split(pooled, 0.5, seed)

    def sets_for(ds_cal, ds_test, use_si):
        probs = [predict_proba(global_model.trunk, d.features) for d in (ds_cal, ds_test)]
        if use_si:
            for i, d in enumerate((ds_cal, ds_test)):
                lik = global_model.device_likelihoods(d.features)[np.arange(d.n), :, d.side_info]
                joint = probs[i] * lik
                probs[i] = joint / np.maximum(joint.sum(axis=1, keepdims=True), 1e-300)
        cal = calibrate(label_scores(spec, probs[0], ds_cal.labels, derive_seed(seed, 1)), alpha)
        return predict_sets(cal, spec, probs[1], derive_seed(seed, 2))

    plain = sets_for(cal_ds, test_ds, False)
    with_si = sets_for(cal_ds, test_ds, True)
    return RoundReport(round=round_idx, coverage=coverage(plain, test_ds.labels),
                       inefficiency=inefficiency(plain),
                       coverage_si=coverage(with_si, test_ds.labels),
                       inefficiency_si=inefficiency(with_si))


def run_federated(train_devices: list[LabeledDataset], eval_devices: list[LabeledDataset],
                  trunk_spec: ModelSpec, cfg: FederatedConfig, spec: ScoreSpec, alpha: float,
                  pool: Optional[WorkerPool] = None,
                  on_round: Optional[Callable[[RoundReport], None]] = None) -> tuple[GlobalModel, list[RoundReport]]:
    """Run cfg.rounds FedAvg rounds, evaluating the global model after each."""
    model = GlobalModel.init(trunk_spec, cfg.m, cfg.seed)
    reports = []
    for r in range(cfg.rounds):
        model = fedavg_round(model, train_devices, cfg, r, pool)
        report = evaluate_global(model, eval_devices, spec, alpha, derive_seed(cfg.seed, r), r)
        reports.append(report)
        logger.info(f"Round {r + 1}/{cfg.rounds}: coverage={report.coverage:.3f} "
                    f"inefficiency={report.inefficiency:.3f} (with SI {report.inefficiency_si:.3f})")
        if on_round:
            on_round(report)
    return model, reports


def evaluate_personalized(global_model: GlobalModel, train_devices: list[LabeledDataset],
                          eval_devices: list[LabeledDataset], cfg: FederatedConfig, spec: ScoreSpec,
                          alpha: float) -> list[dict]:
    """Fine-tune per device and run hard SCP on that device's own evaluation split."""
    rows = []
    for device_id, (train_ds, eval_ds) in enumerate(zip(train_devices, eval_devices)):
        if train_ds.n == 0 or eval_ds.n < 4:
            continue
        local = personalize(global_model, train_ds, cfg.personalize_epochs, cfg.personalize_lr,
                            derive_seed(cfg.seed, device_id))
        cal_ds, test_ds = split(eval_ds, 0.5, derive_seed(cfg.seed, device_id, 1))
        cal = calibrate(label_scores(spec, predict_proba(local, cal_ds.features), cal_ds.labels,
                                     derive_seed(cfg.seed, device_id, 2)), alpha)
        sets = predict_sets(cal, spec, predict_proba(local, test_ds.features), derive_seed(cfg.seed, device_id, 3))
        rows.append({"device": device_id, "coverage": coverage(sets, test_ds.labels),
                     "inefficiency": inefficiency(sets), "n_cal": cal_ds.n})
    return rows


@dataclass
class EntropyDecomposition:
    h_y_given_x: float
    avg_local: float
    mi: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_joint(joint: np.ndarray) -> np.ndarray:
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 3:
        raise ValueError(f"Joint table must have shape (|X|, K, G), got {joint.shape}")
    if np.any(joint < 0) or abs(joint.sum() - 1.0) > 1e-9:
        raise ValueError(f"Joint table must be a normalized distribution (sum {joint.sum()})")
    return joint


def _entropy(table: np.ndarray) -> float:
    return float(-np.sum(xlogy(table, table)))


def entropy_decomposition(joint: np.ndarray) -> EntropyDecomposition:
    """
    H(Y|X), H(Y|X,Z) and I(Y;Z|X) of a p(x, y, z) table by enumeration.

    The mutual information is computed from its own definition, so
    h_y_given_x = avg_local + mi is a genuine check.
    """
    joint = _check_joint(joint)
    p_x = joint.sum(axis=(1, 2))
    p_xy = joint.sum(axis=2)
    p_xz = joint.sum(axis=1)
    h_y_given_x = _entropy(p_xy) - _entropy(p_x)
    avg_local = _entropy(joint) - _entropy(p_xz)

    ratio_num = joint * p_x[:, None, None]
    ratio_den = p_xy[:, :, None] * p_xz[:, None, :]
    positive = joint > 0
    mi = float(np.sum(joint[positive] * (np.log(ratio_num[positive]) - np.log(ratio_den[positive]))))
    return EntropyDecomposition(h_y_given_x=h_y_given_x, avg_local=avg_local, mi=mi)


def local_tasks(joint: np.ndarray) -> list[tuple[float, Optional[DiscreteTaskSpec]]]:
    """Per-z weight p(z) and the conditional task p(x, y | z)."""
    joint = _check_joint(joint)
    tasks = []
    for z in range(joint.shape[2]):
        p_xy = joint[:, :, z]
        p_z = float(p_xy.sum())
        if p_z <= 0:
            tasks.append((0.0, None))
            continue
        p_xy = p_xy / p_z
        marginal = p_xy.sum(axis=1)
        K = p_xy.shape[1]
        conditional = np.where(marginal[:, None] > 0, p_xy / np.maximum(marginal[:, None], 1e-300), 1.0 / K)
        tasks.append((p_z, DiscreteTaskSpec(marginal=marginal, conditional=conditional)))
    return tasks


@dataclass
class FederatedBound:
    value: float
    local_values: list[float]
    weights: list[float]
    device_term: float

    def to_dict(self) -> dict:
        return asdict(self)


def federated_upper_bound(joint: np.ndarray, method: str, alpha: float,
                          q_z_given_x: Optional[np.ndarray] = None) -> FederatedBound:
    """
    Upper bound on H(Y|X) from per-device bounds plus the device-id cross-entropy:
    sum_z p(z) H_ub(Y|X, Z=z) + E[-ln Q(z|x)].

    Args:
        joint: p(x, y, z) table
        method: Bound family evaluated exactly on every local task
        alpha: Miscoverage level for the local sets
        q_z_given_x: (|X|, G) model of the device given x; the true p(z|x) by default
    """
    joint = _check_joint(joint)
    p_xz = joint.sum(axis=1)
    if q_z_given_x is None:
        q_z_given_x = p_xz / np.maximum(p_xz.sum(axis=1, keepdims=True), 1e-300)
    q_z_given_x = np.asarray(q_z_given_x, dtype=np.float64)
    positive = p_xz > 0
    device_term = float(-np.sum(p_xz[positive] * np.log(np.maximum(q_z_given_x[positive], 1e-12))))

    local_values, weights = [], []
    for p_z, task in local_tasks(joint):
        weights.append(p_z)
        local_values.append(0.0 if task is None else population_bound(task, method, alpha))
    value = float(np.dot(weights, local_values)) + device_term
    return FederatedBound(value=value, local_values=local_values, weights=weights, device_term=device_term)
