"""Dataset loading, synthetic generation, and the label-based partition.

Image/label files use the IDX binary layout: a big-endian magic number
(2051 for images, 2049 for labels), big-endian dimension sizes, then raw
unsigned bytes.  Pixel values are scaled to [0, 1].  The synthetic
generator produces Gaussian class blobs so the classification experiments
run without any external download.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    """An IDX file failed validation."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels).astype(np.int64)
        if features.ndim != 2:
            raise ValueError(f"expected (n, f) features, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError(
                f"label count {labels.shape} does not match feature count {features.shape[0]}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Shard:
    """One agent's slice of the training data."""

    agent_id: int
    classes: tuple[int, ...]
    features: np.ndarray
    labels: np.ndarray


# --- idx files ----------------------------------------------------------------


def _read_header(data: bytes, path: str, expected_magic: int, n_dims: int) -> tuple[int, ...]:
    header_size = 4 * (1 + n_dims)
    if len(data) < header_size:
        raise IdxFormatError(f"{path}: truncated header ({len(data)} bytes)")
    fields = struct.unpack(f">{1 + n_dims}i", data[:header_size])
    if fields[0] != expected_magic:
        raise IdxFormatError(f"{path}: bad magic {fields[0]}, expected {expected_magic}")
    return fields[1:]


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file into a (n, rows, cols) float array in [0, 1]."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    n, rows, cols = _read_header(data, path, IMAGE_MAGIC, 3)
    if min(n, rows, cols) < 0:
        raise IdxFormatError(f"{path}: negative dimension in header")
    expected = 16 + n * rows * cols
    if len(data) != expected:
        raise IdxFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    return pixels.reshape(n, rows, cols).astype(float) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file into a (n,) int array."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    (n,) = _read_header(data, path, LABEL_MAGIC, 1)
    if n < 0:
        raise IdxFormatError(f"{path}: negative dimension in header")
    expected = 8 + n
    if len(data) != expected:
        raise IdxFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx_dataset(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Pair an image file with a label file, flattening images to rows."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    return Dataset(images.reshape(images.shape[0], -1), labels, num_classes)


# --- synthetic data -----------------------------------------------------------


def make_synthetic(
    num_classes: int,
    dim: int,
    n_examples: int,
    seed: int,
    center_scale: float = 4.0,
    noise: float = 1.0,
    stream: int = 1,
) -> Dataset:
    """Gaussian class blobs with class-balanced labels.

    Class centres are drawn once from the ``[seed, 0]`` stream so a train
    and a test set made with the same seed share geometry; example noise
    comes from the ``[seed, stream]`` stream.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if n_examples < num_classes:
        raise ValueError(f"need at least one example per class, got {n_examples}")
    center_rng = np.random.default_rng([seed, 0])
    centers = center_rng.normal(0.0, center_scale, size=(num_classes, dim))
    rng = np.random.default_rng([seed, stream])
    labels = np.arange(n_examples) % num_classes
    rng.shuffle(labels)
    features = centers[labels] + noise * rng.standard_normal((n_examples, dim))
    return Dataset(features, labels, num_classes)


def make_synthetic_pair(
    num_classes: int,
    dim: int,
    n_train: int,
    n_test: int,
    seed: int,
    center_scale: float = 4.0,
    noise: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """Train and test sets over the same class centres."""
    train = make_synthetic(num_classes, dim, n_train, seed, center_scale, noise, stream=1)
    test = make_synthetic(num_classes, dim, n_test, seed, center_scale, noise, stream=2)
    return train, test


# --- partition ----------------------------------------------------------------


def partition_non_iid(
    dataset: Dataset,
    num_agents: int,
    labels_per_agent: int = 2,
    examples_per_agent: int = 100,
    seed: int = 0,
) -> list[Shard]:
    """Split a dataset into label-disjoint shards, one per agent.

    Classes are assigned in ascending order: agent 1 gets the first
    ``labels_per_agent`` classes, agent 2 the next, and so on, which
    requires ``num_agents * labels_per_agent == num_classes``.  Example
    selection within each class is the only seeded choice.
    """
    if num_agents < 1:
        raise ValueError(f"need at least one agent, got {num_agents}")
    if labels_per_agent < 1:
        raise ValueError(f"need at least one label per agent, got {labels_per_agent}")
    if num_agents * labels_per_agent != dataset.num_classes:
        raise ValueError(
            f"{num_agents} agents x {labels_per_agent} labels must cover "
            f"{dataset.num_classes} classes exactly"
        )
    if examples_per_agent % labels_per_agent != 0:
        raise ValueError(
            f"{examples_per_agent} examples per agent do not split evenly over "
            f"{labels_per_agent} labels"
        )
    per_label = examples_per_agent // labels_per_agent

    shards: list[Shard] = []
    for idx in range(num_agents):
        agent_id = idx + 1
        classes = tuple(range(idx * labels_per_agent, (idx + 1) * labels_per_agent))
        rng = np.random.default_rng([seed, agent_id])
        rows: list[np.ndarray] = []
        for cls in classes:
            candidates = np.flatnonzero(dataset.labels == cls)
            if candidates.size < per_label:
                raise ValueError(
                    f"class {cls} has {candidates.size} examples, agent {agent_id} needs {per_label}"
                )
            rows.append(rng.choice(candidates, size=per_label, replace=False))
        chosen = np.concatenate(rows)
        shards.append(
            Shard(
                agent_id=agent_id,
                classes=classes,
                features=dataset.features[chosen],
                labels=dataset.labels[chosen],
            )
        )
    return shards
