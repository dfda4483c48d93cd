"""
Tests for dataset loading and synthetic generators.
"""
import struct

import numpy as np
import pandas as pd
import pytest

from src.config import DataConfig
from src.core import TaskKind
from src.data_io import (
    load_csv,
    load_dataset,
    load_idx,
    load_idx_images,
    load_idx_labels,
    make_gaussian_mixture,
    make_linear,
)
from src.exceptions import DatasetValidationError


@pytest.fixture
def idx_files(tmp_path):
    """Four 2x3 images and their labels in IDX format."""
    pixels = np.arange(24, dtype=np.uint8).reshape(4, 2, 3) * 10
    labels = np.array([3, 0, 9, 1], dtype=np.uint8)
    images_path = tmp_path / "images.idx3-ubyte"
    labels_path = tmp_path / "labels.idx1-ubyte"
    images_path.write_bytes(struct.pack(">iiii", 2051, 4, 2, 3) + pixels.tobytes())
    labels_path.write_bytes(struct.pack(">ii", 2049, 4) + labels.tobytes())
    return images_path, labels_path, pixels, labels


def test_load_idx_files(idx_files):
    """Test reading images and labels."""
    images_path, labels_path, pixels, labels = idx_files
    np.testing.assert_array_equal(load_idx_images(images_path), pixels)
    np.testing.assert_array_equal(load_idx_labels(labels_path), labels)


def test_load_idx_dataset(idx_files):
    """Test flattening, scaling and truncation."""
    images_path, labels_path, pixels, labels = idx_files
    d = load_idx(images_path, labels_path, max_samples=3)
    assert d.n == 3
    assert d.d == 6
    assert d.k == 10
    np.testing.assert_allclose(d.features[1], pixels[1].ravel() / 255.0)
    np.testing.assert_array_equal(d.labels, labels[:3])


def test_idx_bad_magic(idx_files):
    """Test that swapped files are rejected."""
    images_path, labels_path, _, _ = idx_files
    with pytest.raises(DatasetValidationError, match="Magic number mismatch"):
        load_idx_images(labels_path)
    with pytest.raises(DatasetValidationError, match="Magic number mismatch"):
        load_idx_labels(images_path)


def test_idx_truncated_payload(tmp_path):
    """Test that a short payload is rejected."""
    path = tmp_path / "short.idx"
    path.write_bytes(struct.pack(">iiii", 2051, 2, 2, 2) + bytes(5))
    with pytest.raises(DatasetValidationError, match="expected 8"):
        load_idx_images(path)


def test_load_csv(tmp_path):
    """Test features, labels and the labeled flag column."""
    path = tmp_path / "data.csv"
    pd.DataFrame({"a": [0.1, 0.2, 0.3], "b": [1.0, 2.0, 3.0], "label": [0, 1, 1], "has_label": [1, 0, 1]}).to_csv(
        path, index=False
    )
    d = load_csv(path, TaskKind.classification(2), labeled_column="has_label")
    assert d.d == 2
    np.testing.assert_array_equal(d.labels, [0, 1, 1])
    np.testing.assert_array_equal(d.labeled_mask, [True, False, True])


def test_load_csv_errors(tmp_path):
    """Test missing files, missing label columns and text features."""
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv", TaskKind.regression())
    path = tmp_path / "data.csv"
    pd.DataFrame({"a": [1.0], "target": [2.0]}).to_csv(path, index=False)
    with pytest.raises(DatasetValidationError, match="no label column"):
        load_csv(path, TaskKind.regression())
    pd.DataFrame({"a": ["x"], "label": [2.0]}).to_csv(path, index=False)
    with pytest.raises(DatasetValidationError, match="non-numeric"):
        load_csv(path, TaskKind.regression())


def test_gaussian_mixture_is_seeded():
    """Test shape, class balance and determinism of the mixture generator."""
    a = make_gaussian_mixture(90, 4, 3, 2.0, seed=5)
    b = make_gaussian_mixture(90, 4, 3, 2.0, seed=5)
    assert a.features.shape == (90, 4)
    np.testing.assert_array_equal(np.bincount(a.labels), [30, 30, 30])
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.features, make_gaussian_mixture(90, 4, 3, 2.0, seed=6).features)


def test_linear_generator():
    """Test the noiseless linear generator is exactly linear."""
    d = make_linear(40, 3, 0.0, seed=1)
    beta = np.linalg.lstsq(d.features, d.labels, rcond=None)[0]
    np.testing.assert_allclose(d.features @ beta, d.labels, atol=1e-8)


def test_load_dataset_checks_source_and_task():
    """Test dispatch, truncation and source/task mismatches."""
    d = load_dataset(DataConfig(n_samples=60, n_features=2, max_samples=50), "classification", 0)
    assert d.n == 50
    assert d.task.is_classification
    with pytest.raises(ValueError):
        load_dataset(DataConfig(), "regression", 0)
    with pytest.raises(ValueError):
        load_dataset(DataConfig(source="linear"), "classification", 0)


def test_data_config_requires_paths():
    """Test that file sources name their files."""
    with pytest.raises(ValueError):
        DataConfig(source="csv")
    with pytest.raises(ValueError):
        DataConfig(source="idx", idx_images="x")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
