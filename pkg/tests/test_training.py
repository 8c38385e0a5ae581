"""Tests for the classifier, the conformal training step and the training loop."""

import json

import numpy as np
import pytest

from src.core import autodiff as ad
from src.core import training as training_module
from src.core.autodiff import Tensor
from src.core.classifier import (
    ParamStore,
    forward,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from src.core.training import (
    NesterovSGD,
    batch_loss,
    conformal_step,
    lr_at,
    split_batch,
    train,
)
from src.models.errors import ConfigError, InfeasibleRankError, TrainingDivergedError
from src.models.train_config import LossKind, ModelSpec, RelaxConfig, TrainConfig


class TestClassifier:

    def test_parameter_count(self):
        spec = ModelSpec(layer_sizes=(3, 5, 4))
        assert spec.n_params == (3 + 1) * 5 + (5 + 1) * 4
        assert ParamStore.init(spec, seed=0).flat.size == spec.n_params

    def test_probabilities(self, rng):
        store = ParamStore.init(ModelSpec(layer_sizes=(3, 6, 4), activation="tanh"), seed=1)
        probs = predict_proba(store, rng.standard_normal((10, 3)))
        assert probs.shape == (10, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_forward_matches_predict(self, rng):
        store = ParamStore.init(ModelSpec.linear(3, 4), seed=2)
        x = rng.standard_normal((5, 3))
        _, probs = forward(store, x)
        np.testing.assert_allclose(probs.data, predict_proba(store, x))

    def test_wrong_feature_width(self):
        store = ParamStore.zeros(ModelSpec.linear(3, 2))
        with pytest.raises(ValueError):
            predict_proba(store, np.ones((2, 4)))

    def test_checkpoint(self, tmp_path):
        store = ParamStore.init(ModelSpec(layer_sizes=(2, 3, 2)), seed=3)
        save_checkpoint(store, tmp_path / "model.json")
        back = load_checkpoint(tmp_path / "model.json")
        assert back.spec == store.spec
        np.testing.assert_array_equal(back.flat, store.flat)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.json")


class TestConformalStep:

    def _setup(self, rng, loss=LossKind.CONFTR, n=8):
        store = ParamStore.init(ModelSpec.linear(3, 4), seed=0)
        x = rng.standard_normal((n, 3))
        y = rng.integers(4, size=n)
        cfg = TrainConfig(loss=loss, alpha_train=0.2, batch_size=8)
        return store, x, y, cfg

    def test_split_batch(self):
        assert split_batch(9) == (slice(0, 4), slice(4, 9))
        with pytest.raises(ValueError):
            split_batch(1)

    def test_soft_sets_shape_and_range(self, rng):
        store, x, y, cfg = self._setup(rng)
        step = conformal_step(store, store.leaf(), x, y, cfg)
        assert step.soft_sets.shape == (4, 4)
        assert step.n_cal == 4
        assert np.all((step.soft_sets.data > 0) & (step.soft_sets.data < 1))

    def test_small_calibration_half(self, rng):
        store, x, y, cfg = self._setup(rng, n=6)
        with pytest.raises(InfeasibleRankError):
            conformal_step(store, store.leaf(), x, y, cfg)

    @pytest.mark.parametrize("loss", list(LossKind))
    def test_gradients_pass_finite_differences(self, rng, loss):
        store, x, y, cfg = self._setup(rng, loss=loss)
        report = ad.grad_check(lambda p: batch_loss(store, p, x, y, cfg), store.flat, tol=1e-3, abs_floor=1e-5)
        assert report.passed, f"{loss}: max abs error {report.max_abs_error:.3e}"

    def test_sharp_relaxation_matches_hard_sets(self, rng):
        store, x, y, _ = self._setup(rng, n=20)
        cfg = TrainConfig(loss=LossKind.CONFTR, alpha_train=0.2, batch_size=20,
                          relax=RelaxConfig(steepness=1e5, temperature=1e-4))
        step = conformal_step(store, store.leaf(), x, y, cfg)
        neg_log = -np.log(predict_proba(store, x))
        cal_scores = np.sort(neg_log[np.arange(10), y[:10]])
        q_hat = cal_scores[9 - 1]
        assert step.q_hat.item() == pytest.approx(q_hat, abs=1e-4)
        hard = neg_log[10:] <= q_hat
        margin = np.abs(neg_log[10:] - q_hat) > 1e-2
        np.testing.assert_array_equal(np.round(step.soft_sets.data)[margin], hard[margin])


class TestOptimizer:

    def test_first_nesterov_step(self):
        opt = NesterovSGD(momentum=0.9)
        out = opt.step(np.array([1.0]), np.array([2.0]), lr=0.1)
        np.testing.assert_allclose(out, [1.0 - 0.1 * (2.0 + 0.9 * 2.0)])

    def test_weight_decay(self):
        opt = NesterovSGD(momentum=0.0, weight_decay=0.5)
        np.testing.assert_allclose(opt.step(np.array([2.0]), np.array([0.0]), lr=1.0), [1.0])

    def test_schedule(self):
        assert lr_at(3, 10, 1.0) == 1.0
        assert lr_at(4, 10, 1.0) == pytest.approx(0.1)
        assert lr_at(6, 10, 1.0) == pytest.approx(0.01)
        assert lr_at(9, 10, 1.0) == pytest.approx(0.001)


class TestTrainConfig:

    def test_batch_too_small_for_conformal_loss(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss=LossKind.DPI, alpha_train=0.01, batch_size=100)

    def test_ce_ignores_batch_constraint(self):
        assert TrainConfig(loss=LossKind.CE, alpha_train=0.01, batch_size=10).batch_size == 10

    def test_loss_from_string(self):
        cfg = TrainConfig.from_dict({"loss": "mb_fano", "relax": {"steepness": 5.0}})
        assert cfg.loss is LossKind.MB_FANO
        assert cfg.relax.steepness == 5.0
        assert TrainConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


class TestTrain:

    def test_ce_training_reduces_loss(self, mixture_ds, tmp_path):
        store = ParamStore.init(ModelSpec.linear(3, 4), seed=0)
        cfg = TrainConfig(loss=LossKind.CE, batch_size=50, lr=0.1, epochs=8, eval_alpha=0.1)
        heldout = mixture_ds.subset(range(200, 400))
        result = train(store, mixture_ds.subset(range(200)), cfg, heldout=heldout,
                       metrics_path=tmp_path / "metrics.jsonl")
        assert result.losses[-1] < result.losses[0]
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 8
        assert json.loads(lines[0])["coverage"] is not None
        np.testing.assert_array_equal(store.flat, ParamStore.init(ModelSpec.linear(3, 4), seed=0).flat)

    def test_training_is_deterministic(self, mixture_ds):
        cfg = TrainConfig(loss=LossKind.CONFTR, alpha_train=0.1, batch_size=40, lr=0.05, epochs=2)
        store = ParamStore.init(ModelSpec.linear(3, 4), seed=0)
        a = train(store, mixture_ds, cfg)
        b = train(store, mixture_ds, cfg)
        np.testing.assert_array_equal(a.store.flat, b.store.flat)

    def test_dimension_mismatch(self, mixture_ds):
        with pytest.raises(ValueError):
            train(ParamStore.zeros(ModelSpec.linear(5, 4)), mixture_ds, TrainConfig(epochs=1))

    def test_divergence(self, mixture_ds, monkeypatch):
        monkeypatch.setattr(training_module, "batch_loss", lambda *a, **k: Tensor(np.nan))
        cfg = TrainConfig(loss=LossKind.CE, batch_size=100, epochs=1)
        with pytest.raises(TrainingDivergedError) as info:
            train(ParamStore.zeros(ModelSpec.linear(3, 4)), mixture_ds, cfg)
        assert info.value.epoch == 0 and info.value.step == 0
