"""Synthetic suite generation and CSV ingestion."""

import numpy as np
import pytest

from merge_surgeon.datasets import DataError, Dataset, gen_task_suite, load_csv, save_csv


def suites_bitwise_equal(a, b):
    if a.mixture.features.tobytes() != b.mixture.features.tobytes():
        return False
    if a.mixture.labels.tobytes() != b.mixture.labels.tobytes():
        return False
    for ta, tb in zip(a.tasks, b.tasks):
        for split in ("train", "validation", "test"):
            da, db = getattr(ta, split), getattr(tb, split)
            if da.features.tobytes() != db.features.tobytes():
                return False
            if da.labels.tobytes() != db.labels.tobytes():
                return False
    return True


class TestGeneration:
    def test_determinism(self):
        a = gen_task_suite(42, 4, 16, 5, 30, 20)
        b = gen_task_suite(42, 4, 16, 5, 30, 20)
        assert suites_bitwise_equal(a, b)

    def test_different_seed_differs(self):
        a = gen_task_suite(42, 2, 8, 3, 30, 20)
        b = gen_task_suite(43, 2, 8, 3, 30, 20)
        assert not suites_bitwise_equal(a, b)

    def test_labels_in_range(self):
        suite = gen_task_suite(42, 3, 8, 4, 25, 15)
        for task in suite.tasks:
            for split in (task.train, task.validation, task.test):
                assert split.labels.min() >= 0
                assert split.labels.max() < 4
        assert suite.mixture.labels.min() >= 0
        assert suite.mixture.labels.max() < 4

    def test_means_on_radius_3_sphere(self):
        suite = gen_task_suite(7, 2, 10, 4, 10, 10)
        for means in suite.class_means:
            np.testing.assert_allclose(np.linalg.norm(means, axis=1), 3.0, atol=1e-9)

    def test_nearest_mean_oracle_beats_chance(self):
        # The generating means are an independent classifier for the data
        # they generated; it must beat 1/C comfortably.
        suite = gen_task_suite(42, 4, 16, 5, 30, 200)
        means = suite.class_means[0]
        test = suite.tasks[0].test
        d2 = ((test.features[:, None, :].astype(np.float64) - means[None, :, :]) ** 2).sum(-1)
        accuracy = (d2.argmin(axis=1) == test.labels).mean()
        assert accuracy > 1.0 / 5

    def test_mixture_is_equal_count_union(self):
        suite = gen_task_suite(1, 3, 6, 3, 40, 10)
        assert len(suite.mixture) == 3 * 40

    def test_splits_drawn_independently(self):
        suite = gen_task_suite(2, 2, 6, 3, 20, 20)
        for task in suite.tasks:
            assert task.train.features.tobytes() != task.test.features.tobytes()
            assert task.validation.features.tobytes() != task.test.features.tobytes()

    def test_bad_sizes_rejected(self):
        with pytest.raises(DataError):
            gen_task_suite(1, 0, 8, 3, 10, 10)
        with pytest.raises(DataError):
            gen_task_suite(1, 2, 8, 3, 0, 10)
        with pytest.raises(DataError):
            gen_task_suite(1, 2, 1, 3, 10, 10)


class TestDatasetValidation:
    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 3)), np.array([0, 5]), num_classes=3)

    def test_non_finite_features(self):
        with pytest.raises(DataError):
            Dataset(np.array([[np.nan, 0.0]]), np.array([0]), num_classes=1)

    def test_inputs_transposed(self):
        ds = Dataset(np.arange(6, dtype=np.float32).reshape(3, 2), np.zeros(3, dtype=int), 1)
        assert ds.inputs().shape == (2, 3)


class TestCsv:
    def test_dense_label_remap(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,f1,label\n0.5,1.0,7\n0.1,0.2,7\n0.9,0.3,9\n")
        ds = load_csv(path, "label")
        assert list(ds.labels) == [0, 0, 1]
        assert ds.num_classes == 2

    def test_header_only_is_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("f0,f1,label\n")
        with pytest.raises(DataError, match="empty dataset"):
            load_csv(path, "label")

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,f1\n1,2\n")
        with pytest.raises(DataError, match="missing label column"):
            load_csv(path, "label")

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("f0,label\nabc,0\n")
        with pytest.raises(DataError, match="non-numeric"):
            load_csv(path, "label")

    def test_round_trip_generated_dataset(self, tmp_path):
        suite = gen_task_suite(5, 2, 6, 3, 40, 10)
        original = suite.tasks[1].train
        path = tmp_path / "task.csv"
        save_csv(original, path)
        loaded = load_csv(path, "label")
        np.testing.assert_allclose(loaded.features, original.features, atol=1e-6)
        # Loading densely remaps labels by first appearance; apply the same
        # remap to the originals before comparing.
        remap = {}
        expected = []
        for value in original.labels:
            remap.setdefault(int(value), len(remap))
            expected.append(remap[int(value)])
        assert list(loaded.labels) == expected

    def test_round_trip_is_float32_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        ds = Dataset(rng.standard_normal((20, 4)).astype(np.float32) * 1e-3,
                     np.zeros(20, dtype=int), 1)
        path = tmp_path / "exact.csv"
        save_csv(ds, path)
        loaded = load_csv(path, "label")
        assert loaded.features.tobytes() == ds.features.tobytes()
