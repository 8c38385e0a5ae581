"""
Synthetic tasks with exact entropy oracles, and dataset file formats.

Gaussian-mixture tasks have an analytic posterior, discrete tasks an exactly
enumerable conditional entropy. Loaders cover IDX image files, CSV with a
declared schema and the ECD1 columnar binary format.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
import csv
import logging
import struct

import numpy as np
from scipy.special import logsumexp

from src.core.metrics import derive_seed, entropy_of_rows, make_rng
from src.models.dataset import MISSING_SIDE_INFO, LabeledDataset
from src.models.errors import DatasetFormatError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
ECD1_MAGIC = b"ECD1"


@dataclass
class GaussianMixtureSpec:
    """Mixture of diagonal Gaussians, one component per label."""

    means: np.ndarray
    diag_vars: np.ndarray
    priors: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.diag_vars = np.atleast_2d(np.asarray(self.diag_vars, dtype=np.float64))
        self.priors = np.asarray(self.priors, dtype=np.float64).reshape(-1)
        if self.means.shape != self.diag_vars.shape:
            raise ValueError(f"means {self.means.shape} and diag_vars {self.diag_vars.shape} differ")
        if len(self.priors) != self.means.shape[0]:
            raise ValueError("priors must have one entry per label")
        if np.any(self.diag_vars <= 0):
            raise ValueError("Variances must be positive")
        if np.any(self.priors < 0) or abs(self.priors.sum() - 1.0) > 1e-9:
            raise ValueError(f"priors must lie on the simplex (sum {self.priors.sum()})")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def random(cls, K: int, dim: int, separation: float, seed: int,
               var: float = 1.0) -> "GaussianMixtureSpec":
        """Random means on a sphere of radius ``separation``, shared variance, uniform priors."""
        rng = make_rng(seed)
        directions = rng.normal(size=(K, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return cls(means=separation * directions,
                   diag_vars=np.full((K, dim), var),
                   priors=np.full(K, 1.0 / K))


@dataclass
class DiscreteTaskSpec:
    """
    Finite-input task with an exactly known conditional distribution.

    ``group_map`` optionally gives p(z | x, y) with shape (|X|, K, G).
    """

    marginal: np.ndarray
    conditional: np.ndarray
    group_map: Optional[np.ndarray] = None

    def __post_init__(self):
        self.marginal = np.asarray(self.marginal, dtype=np.float64).reshape(-1)
        self.conditional = np.atleast_2d(np.asarray(self.conditional, dtype=np.float64))
        if len(self.marginal) > 64:
            raise ValueError(f"Support size {len(self.marginal)} exceeds 64")
        if self.conditional.shape[0] != len(self.marginal):
            raise ValueError("conditional must have one row per input value")
        _check_simplex(self.marginal, "marginal")
        _check_simplex(self.conditional, "conditional rows")
        if self.group_map is not None:
            self.group_map = np.asarray(self.group_map, dtype=np.float64)
            if self.group_map.shape[:2] != self.conditional.shape:
                raise ValueError(
                    f"group_map shape {self.group_map.shape} does not match (|X|, K) "
                    f"{self.conditional.shape}"
                )
            _check_simplex(self.group_map, "group_map rows")

    @property
    def support_size(self) -> int:
        return len(self.marginal)

    @property
    def K(self) -> int:
        return self.conditional.shape[1]

    @property
    def G(self) -> int:
        return 0 if self.group_map is None else self.group_map.shape[2]

    def joint(self) -> np.ndarray:
        """p(x, y, z) table; a single z value when no group map is set."""
        pxy = self.marginal[:, None] * self.conditional
        if self.group_map is None:
            return pxy[:, :, None]
        return pxy[:, :, None] * self.group_map

    def one_hot(self, xs: np.ndarray) -> np.ndarray:
        return np.eye(self.support_size)[np.asarray(xs, dtype=np.int64)]


def _check_simplex(arr: np.ndarray, name: str, tol: float = 1e-12) -> None:
    if np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"{name} must sum to 1 (max deviation {np.max(np.abs(sums - 1.0)):.2e})")


def _sample_categorical_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Draw one index per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None]
    return np.minimum((u >= cdf).sum(axis=-1), probs.shape[-1] - 1)


# ----------------------------------------------------------------------------
# Gaussian mixtures
# ----------------------------------------------------------------------------

def gen_gaussian_mixture(spec: GaussianMixtureSpec, n: int, seed: int) -> LabeledDataset:
    """
    Sample ``n`` labeled points from a Gaussian mixture.

    The whole draw comes from one generator, so the same (spec, n, seed) always
    gives the same dataset, but the first m points of an n-point draw differ
    from an m-point draw.

    Args:
        spec: Mixture specification
        n: Number of examples (>= 1)
        seed: Generator seed

    Returns:
        LabeledDataset with labels drawn from the priors
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = make_rng(seed)
    labels = rng.choice(spec.K, size=n, p=spec.priors)
    noise = rng.standard_normal((n, spec.dim))
    features = spec.means[labels] + noise * np.sqrt(spec.diag_vars[labels])
    return LabeledDataset(features=features, labels=labels, K=spec.K)


def gmm_log_joint(spec: GaussianMixtureSpec, x: np.ndarray) -> np.ndarray:
    """log p(x, y) for each row of x and each label y, shape (n, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    diff = x[:, None, :] - spec.means[None, :, :]
    log_norm = -0.5 * np.sum(np.log(2 * np.pi * spec.diag_vars), axis=1)
    log_lik = log_norm[None, :] - 0.5 * np.sum(diff**2 / spec.diag_vars[None, :, :], axis=2)
    with np.errstate(divide="ignore"):
        return log_lik + np.log(spec.priors)[None, :]


def gmm_posterior(spec: GaussianMixtureSpec, x: np.ndarray) -> np.ndarray:
    """Bayes posterior P(y | x) computed in log-space; one row per input."""
    log_joint = gmm_log_joint(spec, x)
    return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))


@dataclass
class MCEstimate:
    """Monte Carlo estimate with its standard error."""

    value: float
    stderr: float
    n: int


def gmm_cond_entropy_mc(spec: GaussianMixtureSpec, n_mc: int, seed: int) -> MCEstimate:
    """Monte Carlo estimate of H(Y|X) as the mean posterior entropy."""
    if n_mc < 1:
        raise ValueError(f"n_mc must be >= 1, got {n_mc}")
    ds = gen_gaussian_mixture(spec, n_mc, seed)
    per_sample = entropy_of_rows(gmm_posterior(spec, ds.features))
    stderr = float(per_sample.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return MCEstimate(value=float(per_sample.mean()), stderr=stderr, n=n_mc)


def gen_grouped_mixture(K: int, G: int, dim: int, seed: int, n: int,
                        within_sep: float = 1.0, between_sep: float = 6.0,
                        var: float = 1.0) -> tuple[LabeledDataset, GaussianMixtureSpec, np.ndarray]:
    """
    Mixture whose labels are partitioned into ``G`` contiguous groups.

    Group centres are far apart and labels inside a group overlap, so
    observing the group (z = group(y)) removes most of the ambiguity.

    Returns:
        Tuple of (dataset with side_info = group(y), mixture spec, label->group map)
    """
    if K % G != 0:
        raise ValueError(f"K={K} must be divisible by G={G}")
    rng = make_rng(seed)
    group_of = np.repeat(np.arange(G), K // G)
    centres = rng.normal(size=(G, dim))
    centres *= between_sep / np.linalg.norm(centres, axis=1, keepdims=True)
    offsets = rng.normal(size=(K, dim))
    offsets *= within_sep / np.linalg.norm(offsets, axis=1, keepdims=True)
    spec = GaussianMixtureSpec(means=centres[group_of] + offsets,
                               diag_vars=np.full((K, dim), var),
                               priors=np.full(K, 1.0 / K))
    ds = gen_gaussian_mixture(spec, n, derive_seed(seed, 1))
    return ds.with_side_info(group_of[ds.labels], G), spec, group_of


# ----------------------------------------------------------------------------
# Discrete tasks
# ----------------------------------------------------------------------------

def gen_discrete_task(spec: DiscreteTaskSpec, n: int, seed: int) -> LabeledDataset:
    """
    Sample a discrete task; features are one-hot encodings of x.

    Reproducible for a fixed (spec, n, seed). A draw of size m is not a prefix
    of a larger draw with the same seed.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = make_rng(seed)
    xs = rng.choice(spec.support_size, size=n, p=spec.marginal)
    ys = _sample_categorical_rows(rng, spec.conditional[xs])
    side_info = None
    if spec.group_map is not None:
        side_info = _sample_categorical_rows(rng, spec.group_map[xs, ys])
    return LabeledDataset(features=spec.one_hot(xs), labels=ys, K=spec.K,
                          side_info=side_info, G=spec.G)


def discrete_exact_entropy(spec: DiscreteTaskSpec) -> float:
    """Exact H(Y|X) = sum_x p(x) H(p(.|x)) in nats."""
    return float(np.dot(spec.marginal, entropy_of_rows(spec.conditional)))


def random_discrete_task(support: int, K: int, seed: int, concentration: float = 1.0,
                         G: int = 0) -> DiscreteTaskSpec:
    """Random task with Dirichlet rows; optional random group map with G groups."""
    rng = make_rng(seed)
    marginal = rng.dirichlet(np.ones(support))
    conditional = rng.dirichlet(np.full(K, concentration), size=support)
    group_map = rng.dirichlet(np.ones(G), size=(support, K)) if G else None
    return DiscreteTaskSpec(marginal=marginal, conditional=conditional, group_map=group_map)


# ----------------------------------------------------------------------------
# File formats
# ----------------------------------------------------------------------------

def _read_be32(data: bytes, offset: int, path: Path) -> int:
    if len(data) < offset + 4:
        raise DatasetFormatError(f"Truncated IDX header in {path}")
    return struct.unpack(">I", data[offset:offset + 4])[0]


def load_idx(images_path: Path, labels_path: Path) -> LabeledDataset:
    """
    Load an IDX image/label file pair (MNIST layout).

    Pixels are scaled to [0, 1]; the label count is inferred as max label + 1.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    for path in (images_path, labels_path):
        if not path.exists():
            raise FileNotFoundError(f"IDX file not found: {path}")

    image_bytes = images_path.read_bytes()
    magic = _read_be32(image_bytes, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise DatasetFormatError(f"Magic number mismatch in image file {images_path} ({magic:#010x})")
    count = _read_be32(image_bytes, 4, images_path)
    rows = _read_be32(image_bytes, 8, images_path)
    cols = _read_be32(image_bytes, 12, images_path)
    expected = 16 + count * rows * cols
    if len(image_bytes) < expected:
        raise DatasetFormatError(
            f"Truncated image file {images_path}: {len(image_bytes)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)

    label_bytes = labels_path.read_bytes()
    magic = _read_be32(label_bytes, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise DatasetFormatError(f"Magic number mismatch in label file {labels_path} ({magic:#010x})")
    label_count = _read_be32(label_bytes, 4, labels_path)
    if label_count != count:
        raise DatasetFormatError(f"Label count {label_count} does not match image count {count}")
    if len(label_bytes) < 8 + label_count:
        raise DatasetFormatError(f"Truncated label file {labels_path}")
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=label_count, offset=8).astype(np.int64)

    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    K = int(labels.max()) + 1 if count else 1
    logger.info(f"Loaded IDX dataset: {count} images of {rows}x{cols}, K={K}")
    return LabeledDataset(features=features, labels=labels, K=K)


@dataclass
class CsvSchema:
    """Declared CSV layout: feature columns, label column and optional group column."""

    feature_columns: list[str]
    label_column: str = "label"
    group_column: Optional[str] = None
    label_names: list[str] = field(default_factory=list)


def _parse_group(cell: str, path: Path, line_no: int) -> int:
    cell = cell.strip()
    if not cell:
        return MISSING_SIDE_INFO
    try:
        group = int(cell)
    except ValueError:
        raise DatasetFormatError(f"{path}:{line_no}: group value {cell!r} is not an integer")
    if group < MISSING_SIDE_INFO:
        raise DatasetFormatError(f"{path}:{line_no}: negative group value {group}")
    return group


def load_csv(path: Path, schema: Optional[CsvSchema] = None) -> LabeledDataset:
    """
    Load a CSV file with a header row.

    Labels that are all non-negative integers are kept as written, with
    K = max + 1. Other labels are mapped to dense integers in order of first
    appearance, unless ``schema.label_names`` fixes the order. An empty group
    cell means the side information is missing.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")

    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"Empty CSV file: {path}")
        rows = list(reader)

    if schema is None:
        schema = CsvSchema(feature_columns=[c for c in header if c != "label"])
    missing = [c for c in [*schema.feature_columns, schema.label_column] if c not in header]
    if schema.group_column:
        missing += [] if schema.group_column in header else [schema.group_column]
    if missing:
        raise DatasetFormatError(f"CSV {path} is missing declared columns {missing}")

    col = {name: i for i, name in enumerate(header)}
    features, raw_labels, groups = [], [], []
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DatasetFormatError(
                f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}"
            )
        try:
            features.append([float(row[col[c]]) for c in schema.feature_columns])
        except ValueError as e:
            raise DatasetFormatError(f"{path}:{line_no}: {e}")
        raw_labels.append((line_no, row[col[schema.label_column]].strip()))
        if schema.group_column:
            groups.append(_parse_group(row[col[schema.group_column]], path, line_no))

    if not raw_labels:
        raise DatasetFormatError(f"CSV file {path} has no data rows")

    if not schema.label_names and all(raw.isdecimal() for _, raw in raw_labels):
        labels = [int(raw) for _, raw in raw_labels]
        K = max(labels) + 1
    else:
        label_map = {name: i for i, name in enumerate(schema.label_names)}
        labels = []
        for line_no, raw in raw_labels:
            if raw not in label_map:
                if schema.label_names:
                    raise DatasetFormatError(f"{path}:{line_no}: unknown label {raw!r}")
                label_map[raw] = len(label_map)
            labels.append(label_map[raw])
        K = len(label_map)

    side_info = np.asarray(groups, dtype=np.int64) if schema.group_column else None
    G = int(max(groups)) + 1 if groups and max(groups) >= 0 else 0
    return LabeledDataset(features=np.asarray(features), labels=np.asarray(labels),
                          K=K, side_info=side_info, G=G)



def save_ecd1(ds: LabeledDataset, path: Path) -> None:
    """
    Write the ECD1 columnar binary format.

    Layout (little-endian): magic "ECD1", uint64 n, dim, K, G, then float64
    features (row-major), int64 labels and int64 side_info (-1 = missing).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    side = ds.side_info if ds.side_info is not None else np.full(ds.n, -1, dtype=np.int64)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(ECD1_MAGIC)
        f.write(struct.pack("<4Q", ds.n, ds.dim, ds.K, ds.G))
        f.write(ds.features.astype("<f8").tobytes())
        f.write(ds.labels.astype("<i8").tobytes())
        f.write(side.astype("<i8").tobytes())
    tmp.replace(path)


def load_ecd1(path: Path) -> LabeledDataset:
    """Read a dataset written by ``save_ecd1``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    data = path.read_bytes()
    if data[:4] != ECD1_MAGIC:
        raise DatasetFormatError(f"Not an ECD1 file: {path}")
    if len(data) < 36:
        raise DatasetFormatError(f"Truncated ECD1 header: {path}")
    n, dim, K, G = struct.unpack("<4Q", data[4:36])
    expected = 36 + 8 * (n * dim + 2 * n)
    if len(data) != expected:
        raise DatasetFormatError(f"ECD1 file {path} has {len(data)} bytes, expected {expected}")
    offset = 36
    features = np.frombuffer(data, dtype="<f8", count=n * dim, offset=offset).reshape(n, dim)
    offset += 8 * n * dim
    labels = np.frombuffer(data, dtype="<i8", count=n, offset=offset)
    offset += 8 * n
    side = np.frombuffer(data, dtype="<i8", count=n, offset=offset)
    side_info = side if np.any(side >= 0) else None
    return LabeledDataset(features=features.copy(), labels=labels.copy(), K=int(K),
                          side_info=None if side_info is None else side_info.copy(), G=int(G))
