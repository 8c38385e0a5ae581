"""Tests for synthetic generators, entropy oracles and dataset file formats."""

import math
import struct

import numpy as np
import pytest

from src.core.datagen import (
    CsvSchema,
    DiscreteTaskSpec,
    GaussianMixtureSpec,
    discrete_exact_entropy,
    gen_discrete_task,
    gen_gaussian_mixture,
    gen_grouped_mixture,
    gmm_cond_entropy_mc,
    gmm_posterior,
    load_csv,
    load_ecd1,
    load_idx,
    random_discrete_task,
    save_ecd1,
)
from src.models.dataset import MISSING_SIDE_INFO, LabeledDataset
from src.models.errors import DatasetFormatError


class TestGaussianMixture:

    def test_generation_is_seeded(self, mixture_spec):
        a = gen_gaussian_mixture(mixture_spec, 50, seed=1)
        b = gen_gaussian_mixture(mixture_spec, 50, seed=1)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_posterior_rows_are_distributions(self, mixture_spec, mixture_ds):
        post = gmm_posterior(mixture_spec, mixture_ds.features)
        assert post.shape == (mixture_ds.n, 4)
        np.testing.assert_allclose(post.sum(axis=1), 1.0)

    def test_posterior_is_stable_far_from_means(self, mixture_spec):
        post = gmm_posterior(mixture_spec, np.full((1, 3), 1e3))
        assert np.all(np.isfinite(post))
        assert post.sum() == pytest.approx(1.0)

    def test_identical_components_give_uniform_posterior(self):
        spec = GaussianMixtureSpec(means=np.zeros((3, 2)), diag_vars=np.ones((3, 2)), priors=np.full(3, 1 / 3))
        np.testing.assert_allclose(gmm_posterior(spec, np.ones((2, 2))), 1 / 3)
        est = gmm_cond_entropy_mc(spec, 100, seed=0)
        assert est.value == pytest.approx(math.log(3))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            GaussianMixtureSpec(means=np.zeros((2, 2)), diag_vars=-np.ones((2, 2)), priors=[0.5, 0.5])
        with pytest.raises(ValueError):
            GaussianMixtureSpec(means=np.zeros((2, 2)), diag_vars=np.ones((2, 2)), priors=[0.7, 0.7])

    def test_grouped_mixture_side_info_is_label_group(self):
        ds, spec, group_of = gen_grouped_mixture(K=6, G=3, dim=4, seed=2, n=120)
        assert spec.K == 6
        np.testing.assert_array_equal(group_of, [0, 0, 1, 1, 2, 2])
        np.testing.assert_array_equal(ds.side_info, group_of[ds.labels])
        assert ds.G == 3

    def test_grouped_mixture_requires_divisible_k(self):
        with pytest.raises(ValueError):
            gen_grouped_mixture(K=5, G=2, dim=2, seed=0, n=10)


class TestDiscreteTask:

    def test_exact_entropy_of_deterministic_task(self):
        spec = DiscreteTaskSpec(marginal=np.full(4, 0.25), conditional=np.eye(4))
        assert discrete_exact_entropy(spec) == pytest.approx(0.0)

    def test_exact_entropy_of_uniform_task(self):
        spec = DiscreteTaskSpec(marginal=[1.0], conditional=[[1 / 3, 1 / 3, 1 / 3]])
        assert discrete_exact_entropy(spec) == pytest.approx(math.log(3))

    def test_samples_follow_the_task(self, discrete_task):
        ds = gen_discrete_task(discrete_task, 20000, seed=5)
        xs = np.argmax(ds.features, axis=1)
        np.testing.assert_allclose(np.bincount(xs, minlength=6) / ds.n, discrete_task.marginal, atol=0.02)

    def test_group_map_produces_side_info(self, grouped_task):
        ds = gen_discrete_task(grouped_task, 100, seed=1)
        assert ds.G == 3
        assert ds.side_info is not None and ds.side_info.max() < 3

    def test_support_limit(self):
        with pytest.raises(ValueError):
            DiscreteTaskSpec(marginal=np.full(65, 1 / 65), conditional=np.full((65, 2), 0.5))

    def test_joint_sums_to_one(self, grouped_task):
        assert grouped_task.joint().sum() == pytest.approx(1.0)
        assert random_discrete_task(4, 3, seed=0).joint().shape == (4, 3, 1)


def _write_idx(tmp_path, images, labels, image_magic=0x803):
    count, rows, cols = images.shape
    img = tmp_path / "images.idx"
    img.write_bytes(struct.pack(">4I", image_magic, count, rows, cols) + images.astype(np.uint8).tobytes())
    lab = tmp_path / "labels.idx"
    lab.write_bytes(struct.pack(">2I", 0x801, count) + labels.astype(np.uint8).tobytes())
    return img, lab


class TestIdx:

    def test_load(self, tmp_path):
        images = np.arange(3 * 2 * 2).reshape(3, 2, 2) * 20
        img, lab = _write_idx(tmp_path, images, np.array([0, 2, 1]))
        ds = load_idx(img, lab)
        assert ds.n == 3 and ds.dim == 4 and ds.K == 3
        assert ds.features.max() == pytest.approx(220 / 255)

    def test_bad_magic(self, tmp_path):
        img, lab = _write_idx(tmp_path, np.zeros((1, 2, 2)), np.array([0]), image_magic=0x801)
        with pytest.raises(DatasetFormatError):
            load_idx(img, lab)

    def test_truncated(self, tmp_path):
        img, lab = _write_idx(tmp_path, np.zeros((2, 2, 2)), np.array([0, 1]))
        img.write_bytes(img.read_bytes()[:-3])
        with pytest.raises(DatasetFormatError):
            load_idx(img, lab)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_idx(tmp_path / "nope", tmp_path / "nope2")


class TestCsv:

    def test_string_labels_in_order_of_appearance(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,b,label\n1,2,cat\n3,4,dog\n5,6,cat\n")
        ds = load_csv(path)
        np.testing.assert_array_equal(ds.labels, [0, 1, 0])
        assert ds.K == 2

    def test_integer_labels_keep_their_index(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,label\n1,2\n2,0\n3,1\n4,2\n")
        ds = load_csv(path)
        np.testing.assert_array_equal(ds.labels, [2, 0, 1, 2])
        assert ds.K == 3

    def test_sparse_integer_labels(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,label\n1,4\n2,1\n")
        ds = load_csv(path)
        np.testing.assert_array_equal(ds.labels, [4, 1])
        assert ds.K == 5

    def test_group_column(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x,y,g\n1.0,a,0\n2.0,b,1\n")
        ds = load_csv(path, CsvSchema(feature_columns=["x"], label_column="y", group_column="g"))
        np.testing.assert_array_equal(ds.side_info, [0, 1])
        assert ds.G == 2

    def test_empty_group_cell_is_missing(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x,y,g\n1.0,a,1\n2.0,b,\n")
        ds = load_csv(path, CsvSchema(feature_columns=["x"], label_column="y", group_column="g"))
        np.testing.assert_array_equal(ds.side_info, [1, MISSING_SIDE_INFO])
        assert ds.G == 2

    def test_bad_group_cell(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x,y,g\n1.0,a,0\n2.0,b,north\n")
        with pytest.raises(DatasetFormatError, match=":3:"):
            load_csv(path, CsvSchema(feature_columns=["x"], label_column="y", group_column="g"))

    def test_missing_column(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,label\n1,0\n")
        with pytest.raises(DatasetFormatError):
            load_csv(path, CsvSchema(feature_columns=["a", "b"]))

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,label\n1,0\n2\n")
        with pytest.raises(DatasetFormatError):
            load_csv(path)


class TestEcd1:

    def test_save_and_load_preserves_everything(self, tmp_path):
        ds = LabeledDataset(features=np.array([[0.5, 1.5], [2.0, -1.0]]), labels=[1, 0], K=3,
                            side_info=[-1, 1], G=2)
        save_ecd1(ds, tmp_path / "d.ecd1")
        back = load_ecd1(tmp_path / "d.ecd1")
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.side_info, ds.side_info)
        assert (back.K, back.G) == (3, 2)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "d.ecd1"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(DatasetFormatError):
            load_ecd1(path)

    def test_size_mismatch(self, tmp_path):
        ds = LabeledDataset(features=np.ones((2, 1)), labels=[0, 0], K=1)
        save_ecd1(ds, tmp_path / "d.ecd1")
        (tmp_path / "d.ecd1").write_bytes((tmp_path / "d.ecd1").read_bytes()[:-8])
        with pytest.raises(DatasetFormatError):
            load_ecd1(tmp_path / "d.ecd1")
