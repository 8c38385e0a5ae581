"""Small linear/MLP classifiers backed by one flat parameter vector."""

from dataclasses import dataclass
import json
import logging
import math
import os
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import log_softmax as _np_log_softmax

from src.core import autodiff as ad
from src.core.autodiff import Tensor
from src.core.metrics import make_rng
from src.models.train_config import Activation, ModelSpec

logger = logging.getLogger(__name__)


@dataclass
class ParamStore:
    """Model spec plus its flat parameter vector (W then b for every layer)."""

    spec: ModelSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64).reshape(-1)
        if self.flat.size != self.spec.n_params:
            raise ValueError(f"Expected {self.spec.n_params} parameters, got {self.flat.size}")

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamStore":
        return cls(spec=spec, flat=np.zeros(spec.n_params))

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "ParamStore":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
        rng = make_rng(seed)
        chunks = []
        for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(spec=spec, flat=np.concatenate(chunks))

    def copy(self) -> "ParamStore":
        return ParamStore(spec=self.spec, flat=self.flat.copy())

    def leaf(self) -> Tensor:
        """Fresh differentiable leaf over a copy of the parameters."""
        return Tensor(self.flat.copy(), requires_grad=True)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "params": self.flat.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ParamStore":
        return cls(spec=ModelSpec.from_dict(data["spec"]), flat=np.asarray(data["params"]))


def _layer_slices(spec: ModelSpec):
    offset = 0
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = slice(offset, offset + fan_in * fan_out)
        offset += fan_in * fan_out
        b = slice(offset, offset + fan_out)
        offset += fan_out
        yield fan_in, fan_out, w, b


def logits_tensor(spec: ModelSpec, params: Tensor, features) -> Tensor:
    """Differentiable logits for a feature batch."""
    h = ad.as_tensor(features)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ValueError(f"Expected features of shape (n, {spec.input_dim}), got {h.shape}")
    layers = list(_layer_slices(spec))
    for i, (fan_in, fan_out, w, b) in enumerate(layers):
        h = h @ params[w].reshape(fan_in, fan_out) + params[b]
        if i < len(layers) - 1:
            h = ad.relu(h) if spec.activation is Activation.RELU else ad.tanh(h)
    return h


def forward(store: ParamStore, features, params: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
    """
    Logits and softmax probabilities.

    Args:
        store: Model parameters
        features: (n, dim) batch
        params: Differentiable parameter leaf; defaults to a constant copy

    Returns:
        Tuple of (logits, probs) tensors; probs are computed through log-sum-exp
    """
    params = Tensor(store.flat) if params is None else params
    logits = logits_tensor(store.spec, params, features)
    return logits, ad.softmax(logits, axis=1)


def predict_logits(store: ParamStore, features: np.ndarray) -> np.ndarray:
    return logits_tensor(store.spec, Tensor(store.flat), features).data


def predict_proba(store: ParamStore, features: np.ndarray) -> np.ndarray:
    """Softmax probabilities as a plain array."""
    return np.exp(_np_log_softmax(predict_logits(store, features), axis=1))


def save_checkpoint(store: ParamStore, path: Path) -> None:
    """Write the spec and flat parameters as JSON (atomic replace)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(store.to_dict(), f)
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint: {path}")


def load_checkpoint(path: Path) -> ParamStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return ParamStore.from_dict(json.load(f))
