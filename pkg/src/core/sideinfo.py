"""
Side information for prediction sets.

An observed group id z updates the model's label distribution by Bayes rule,
p'(y) proportional to p(y) Q(z | x, y). Examples without z keep the original
distribution, so calibration and test must share one availability pattern.
"""

from dataclasses import dataclass, asdict
import logging
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import softmax

from src.core import autodiff as ad
from src.core.autodiff import Tape
from src.core.classifier import ParamStore, logits_tensor, predict_logits, predict_proba
from src.core.conformal import calibrate, mondrian_calibrate, mondrian_predict_sets, predict_sets
from src.core.datagen import DiscreteTaskSpec
from src.core.losses import loss_ce_logits
from src.core.metrics import coverage, derive_seed, inefficiency, make_rng
from src.core.scores import label_scores, score_matrix
from src.core.training import NesterovSGD
from src.models.dataset import MISSING_SIDE_INFO, LabeledDataset, ProbVector
from src.models.score_spec import ScoreSpec
from src.models.train_config import ModelSpec

logger = logging.getLogger(__name__)


@dataclass
class SideModel:
    """
    Q(z | x, y) for every label y.

    Either an exact table indexed by the one-hot input value (discrete tasks)
    or a linear head over the features concatenated with a one-hot label.
    """

    G: int
    K: int
    table: Optional[np.ndarray] = None
    head: Optional[ParamStore] = None

    def __post_init__(self):
        if (self.table is None) == (self.head is None):
            raise ValueError("SideModel needs exactly one of a table or a linear head")
        if self.table is not None:
            self.table = np.asarray(self.table, dtype=np.float64)
            if self.table.shape[1:] != (self.K, self.G):
                raise ValueError(f"Table shape {self.table.shape} does not match (|X|, {self.K}, {self.G})")

    @classmethod
    def from_task(cls, task: DiscreteTaskSpec) -> "SideModel":
        if task.group_map is None:
            raise ValueError("Discrete task has no group map")
        return cls(G=task.G, K=task.K, table=task.group_map)

    @classmethod
    def uninformative(cls, support: int, K: int, G: int) -> "SideModel":
        return cls(G=G, K=K, table=np.full((support, K, G), 1.0 / G))

    def likelihoods(self, features: np.ndarray) -> np.ndarray:
        """(n, K, G) array of Q(z | x, y)."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if self.table is not None:
            return self.table[np.argmax(features, axis=1)]
        n = len(features)
        out = np.empty((n, self.K, self.G))
        for y in range(self.K):
            out[:, y, :] = softmax(predict_logits(self.head, side_inputs(features, np.full(n, y), self.K)), axis=1)
        return out

    def lik(self, features: np.ndarray, z: np.ndarray) -> np.ndarray:
        """(n, K) likelihood of each example's observed z under every label."""
        z = np.asarray(z, dtype=np.int64)
        return self.likelihoods(features)[np.arange(len(z)), :, z]


def side_inputs(features: np.ndarray, labels: np.ndarray, K: int) -> np.ndarray:
    """Features concatenated with a one-hot label."""
    return np.concatenate([features, ad.one_hot(labels, K)], axis=1)


def posterior_with_si(p, lik) -> ProbVector:
    """Bayes update p'(y) = p(y) lik(y) / sum_y p(y) lik(y)."""
    p = p.p if isinstance(p, ProbVector) else np.asarray(p, dtype=np.float64)
    return ProbVector(posterior_rows(p[None, :], np.asarray(lik, dtype=np.float64)[None, :])[0])


def posterior_rows(probs: np.ndarray, liks: np.ndarray) -> np.ndarray:
    if np.any(liks < 0):
        raise ValueError("Likelihood entries must be nonnegative")
    joint = probs * liks
    norm = joint.sum(axis=1, keepdims=True)
    if np.any(norm <= 0):
        raise ValueError("Side information has zero probability under the model")
    return joint / norm


def effective_probs(p, side_model: SideModel, x: np.ndarray, z: Optional[int]) -> ProbVector:
    """Posterior given z when observed; the unchanged distribution otherwise."""
    p = p if isinstance(p, ProbVector) else ProbVector(np.asarray(p, dtype=np.float64))
    if z is None or z == MISSING_SIDE_INFO:
        return p
    return posterior_with_si(p, side_model.lik(np.atleast_2d(x), np.array([z]))[0])


def effective_probs_batch(probs: np.ndarray, side_model: SideModel, features: np.ndarray,
                          z: np.ndarray) -> np.ndarray:
    """Row-wise effective_probs; rows with MISSING_SIDE_INFO are copied unchanged."""
    out = np.array(probs, dtype=np.float64, copy=True)
    observed = np.asarray(z) != MISSING_SIDE_INFO
    if observed.any():
        liks = side_model.lik(features[observed], np.asarray(z)[observed])
        out[observed] = posterior_rows(out[observed], liks)
    return out


def train_side_model(ds: LabeledDataset, epochs: int, lr: float, seed: int,
                     batch_size: int = 256, momentum: float = 0.9) -> SideModel:
    """
    Fit a linear head Q(z | x, y) by maximum likelihood on examples with observed z.

    Raises:
        ValueError: when no example carries side information
    """
    if not ds.has_side_info:
        raise ValueError("train_side_model requires examples with side information")
    observed = ds.side_info != MISSING_SIDE_INFO
    inputs = side_inputs(ds.features[observed], ds.labels[observed], ds.K)
    targets = ds.side_info[observed]
    n = len(targets)

    store = ParamStore.zeros(ModelSpec.linear(inputs.shape[1], ds.G))
    optimizer = NesterovSGD(momentum)
    for epoch in range(epochs):
        perm = make_rng(derive_seed(seed, epoch)).permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            params = store.leaf()
            with Tape() as tape:
                logits = logits_tensor(store.spec, params, inputs[idx])
                loss = loss_ce_logits(logits, targets[idx])
            ad.backward(loss, tape)
            store.flat = optimizer.step(store.flat, params.grad, lr)

    model = SideModel(G=ds.G, K=ds.K, head=store)
    logger.info(f"Side model trained on {n} examples; mean log-likelihood "
                f"{side_log_likelihood(model, ds):.4f}")
    return model


def side_log_likelihood(model: SideModel, ds: LabeledDataset) -> float:
    """Mean ln Q(z_i | x_i, y_i) over examples with observed z."""
    observed = ds.side_info != MISSING_SIDE_INFO
    liks = model.likelihoods(ds.features[observed])
    picked = liks[np.arange(observed.sum()), ds.labels[observed], ds.side_info[observed]]
    return float(np.mean(np.log(np.maximum(picked, 1e-12))))


@dataclass
class SIReport:
    coverage: float
    inefficiency: float
    accuracy: float
    availability: float
    mondrian: bool
    fallbacks: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


ProbModel = Union[ParamStore, Callable[[np.ndarray], np.ndarray]]


def _predict(model: ProbModel, features: np.ndarray) -> np.ndarray:
    return predict_proba(model, features) if isinstance(model, ParamStore) else model(features)


def observed_side_info(ds: LabeledDataset, availability: float, rng: np.random.Generator) -> np.ndarray:
    """Mask side information independently per example with the given availability."""
    z = ds.side_info if ds.side_info is not None else np.full(ds.n, MISSING_SIDE_INFO)
    keep = rng.random(ds.n) < availability
    return np.where(keep, z, MISSING_SIDE_INFO)


def evaluate_si(ds_cal: LabeledDataset, ds_test: LabeledDataset, model: ProbModel,
                side_model: SideModel, spec: ScoreSpec, alpha: float, availability: float,
                seed: int, mondrian: bool = False) -> SIReport:
    """
    Split conformal evaluation with partially observed side information.

    Availability is sampled once per example for calibration and test alike.
    The Mondrian arm calibrates one threshold per observed group and falls
    back to the global threshold for examples without side information.
    """
    if not 0.0 <= availability <= 1.0:
        raise ValueError(f"availability must lie in [0, 1], got {availability}")
    rng = make_rng(seed)
    z_cal = observed_side_info(ds_cal, availability, rng)
    z_test = observed_side_info(ds_test, availability, rng)

    probs_cal = effective_probs_batch(_predict(model, ds_cal.features), side_model, ds_cal.features, z_cal)
    probs_test = effective_probs_batch(_predict(model, ds_test.features), side_model, ds_test.features, z_test)

    jitter_seed = derive_seed(seed, 1)
    cal_scores = label_scores(spec, probs_cal, ds_cal.labels, jitter_seed)
    global_cal = calibrate(cal_scores, alpha)
    fallbacks = 0
    if mondrian:
        by_group = {int(g): cal_scores[z_cal == g] for g in np.unique(z_cal) if g != MISSING_SIDE_INFO}
        gc = mondrian_calibrate(by_group, alpha, fallback=global_cal)
        sets, fallbacks = mondrian_predict_sets(gc, z_test, score_matrix(spec, probs_test, derive_seed(seed, 2)))
    else:
        sets = predict_sets(global_cal, spec, probs_test, derive_seed(seed, 2))

    report = SIReport(
        coverage=coverage(sets, ds_test.labels),
        inefficiency=inefficiency(sets),
        accuracy=float(np.mean(np.argmax(probs_test, axis=1) == ds_test.labels)),
        availability=availability,
        mondrian=mondrian,
        fallbacks=fallbacks,
    )
    logger.info(f"SI evaluation (availability={availability}, mondrian={mondrian}): "
                f"coverage={report.coverage:.3f} inefficiency={report.inefficiency:.3f}")
    return report
