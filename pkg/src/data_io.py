"""
Dataset sources: CSV files, IDX (MNIST-format) files and seeded synthetic generators.
"""
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_blobs, make_regression

from .config import DataConfig
from .core import TaskKind, WeakDataset
from .exceptions import DatasetValidationError
from .logging_config import get_logger

logger = get_logger(__name__)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
PIXEL_SCALE = 255.0


def _read_be32(f) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise DatasetValidationError("truncated IDX header")
    (value,) = struct.unpack(">i", data)
    return value


def load_idx_images(path: Union[str, Path]) -> np.ndarray:
    """
    Read an IDX image file.

    Layout (big endian): i32 magic, i32 count, i32 rows, i32 cols, then u8 pixels row-wise.

    Returns:
        uint8 array of shape (count, rows, cols)
    """
    with open(path, "rb") as f:
        magic = _read_be32(f)
        if magic != IDX_IMAGE_MAGIC:
            raise DatasetValidationError(f"Magic number mismatch in image file ({magic})")
        count = _read_be32(f)
        rows = _read_be32(f)
        cols = _read_be32(f)
        payload = f.read()
    if len(payload) != count * rows * cols:
        raise DatasetValidationError(f"image file holds {len(payload)} bytes, expected {count * rows * cols}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path: Union[str, Path]) -> np.ndarray:
    """Read an IDX label file (i32 magic, i32 count, u8 labels)."""
    with open(path, "rb") as f:
        magic = _read_be32(f)
        if magic != IDX_LABEL_MAGIC:
            raise DatasetValidationError(f"Magic number mismatch in label file ({magic})")
        count = _read_be32(f)
        payload = f.read()
    if len(payload) != count:
        raise DatasetValidationError(f"label file holds {len(payload)} labels, expected {count}")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path], n_classes: int = 10,
             max_samples: Optional[int] = None) -> WeakDataset:
    """Flattened IDX images scaled to [0, 1] with their class labels."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.size:
        raise DatasetValidationError(f"dimension mismatch: {images.shape[0]} images, {labels.size} labels")
    if max_samples is not None:
        images, labels = images[:max_samples], labels[:max_samples]
    features = images.reshape(images.shape[0], -1).astype(np.float64) / PIXEL_SCALE
    return WeakDataset(features, labels.astype(np.int64), TaskKind.classification(n_classes))


def load_csv(path: Union[str, Path], task: TaskKind, label_column: str = "label",
             labeled_column: Optional[str] = None) -> WeakDataset:
    """
    Load a dataset from a CSV file with a header row.

    Every column other than the label (and the optional labeled flag) is a numeric feature.

    Raises:
        FileNotFoundError: If the file does not exist
        DatasetValidationError: If a required column is missing or a value is invalid
    """
    csv_path = Path(path)
    if not csv_path.is_file():
        raise FileNotFoundError(f"CSV file not found: {csv_path}")
    df = pd.read_csv(csv_path)
    if label_column not in df.columns:
        raise DatasetValidationError(f"CSV has no label column '{label_column}'")
    if labeled_column is not None and labeled_column not in df.columns:
        raise DatasetValidationError(f"CSV has no labeled column '{labeled_column}'")

    feature_columns = [c for c in df.columns if c not in (label_column, labeled_column)]
    try:
        features = df[feature_columns].to_numpy(dtype=np.float64)
    except ValueError as e:
        raise DatasetValidationError(f"non-numeric feature column: {e}") from e
    labels = df[label_column].to_numpy()
    mask = None
    if labeled_column is not None:
        mask = df[labeled_column].astype(bool).to_numpy()
    logger.info("Loaded %d rows, %d features from %s", len(df), len(feature_columns), csv_path)
    return WeakDataset(features, labels, task, mask)


def make_gaussian_mixture(n_samples: int, n_features: int, n_classes: int, separation: float,
                          seed: int) -> WeakDataset:
    """k isotropic unit-variance Gaussians whose centers lie at distance ``separation`` from the origin."""
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n_classes, n_features))
    centers = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    X, y = make_blobs(n_samples=n_samples, centers=centers, cluster_std=1.0, random_state=seed)
    return WeakDataset(X, y, TaskKind.classification(n_classes))


def make_linear(n_samples: int, n_features: int, noise: float, seed: int) -> WeakDataset:
    """Linear regression data y = xᵀβ + N(0, noise²)."""
    X, y = make_regression(n_samples=n_samples, n_features=n_features, noise=noise, random_state=seed)
    return WeakDataset(X, y, TaskKind.regression())


def load_dataset(config: DataConfig, task: str, seed: int) -> WeakDataset:
    """
    Build the full (clean) dataset a protocol describes.

    Args:
        config: Data section of the protocol
        task: "classification" or "regression"
        seed: Seed of the synthetic generators

    Returns:
        WeakDataset with every instance labeled
    """
    task_kind = TaskKind.classification(config.n_classes) if task == "classification" else TaskKind.regression()
    if config.source == "gaussian":
        if not task_kind.is_classification:
            raise ValueError("gaussian source generates classification data")
        d = make_gaussian_mixture(config.n_samples, config.n_features, config.n_classes, config.separation, seed)
    elif config.source == "linear":
        if task_kind.is_classification:
            raise ValueError("linear source generates regression data")
        d = make_linear(config.n_samples, config.n_features, config.regression_noise, seed)
    elif config.source == "csv":
        d = load_csv(config.csv_path, task_kind, config.label_column, config.labeled_column)
    else:
        d = load_idx(config.idx_images, config.idx_labels, config.n_classes, config.max_samples)

    if config.max_samples is not None and d.n > config.max_samples:
        d = d.subset(np.arange(config.max_samples))
    return d
