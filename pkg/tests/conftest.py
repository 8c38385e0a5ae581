import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core.datagen import GaussianMixtureSpec, gen_gaussian_mixture, random_discrete_task
from src.models.dataset import LabeledDataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mixture_spec():
    return GaussianMixtureSpec.random(K=4, dim=3, separation=2.0, seed=7)


@pytest.fixture
def mixture_ds(mixture_spec):
    return gen_gaussian_mixture(mixture_spec, 400, seed=8)


@pytest.fixture
def discrete_task():
    return random_discrete_task(support=6, K=4, seed=3, concentration=0.7)


@pytest.fixture
def grouped_task():
    return random_discrete_task(support=5, K=4, seed=4, concentration=0.7, G=3)


@pytest.fixture
def tiny_ds():
    features = np.arange(20, dtype=float).reshape(10, 2)
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
    return LabeledDataset(features=features, labels=labels, K=3)


def dirichlet_rows(rng, n, K, conc=0.5):
    """Random probability rows with labels drawn from them."""
    probs = rng.dirichlet(np.full(K, conc), size=n)
    probs = np.maximum(probs, 1e-9)
    probs /= probs.sum(axis=1, keepdims=True)
    labels = np.array([rng.choice(K, p=p) for p in probs])
    return probs, labels


@pytest.fixture
def make_rows():
    return dirichlet_rows
