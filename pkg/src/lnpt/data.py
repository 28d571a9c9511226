"""Dataset ingestion and synthesis.

The label-free view used by the distillation path is a separate type
with no label field at all, so a training loop written against it
cannot read labels even by accident.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class UnlabeledDataset:
    """Inputs only; structurally incapable of yielding labels."""
    inputs: np.ndarray
    class_count: int
    split: str = "train"

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, D) float
    labels: np.ndarray | None
    class_count: int
    split: str = "train"
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.inputs):
                raise FormatError("inputs and labels disagree on sample count")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise FormatError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def unlabeled(self) -> UnlabeledDataset:
        return UnlabeledDataset(self.inputs, self.class_count, self.split)


def _read_u32be(buf: bytes, off: int, path) -> int:
    if off + 4 > len(buf):
        raise FormatError(f"{path}: truncated file")
    return struct.unpack(">I", buf[off:off + 4])[0]


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Parse big-endian IDX image/label file pair; pixels scaled by 1/255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img = images_path.read_bytes()
    magic = _read_u32be(img, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    n = _read_u32be(img, 4, images_path)
    rows = _read_u32be(img, 8, images_path)
    cols = _read_u32be(img, 12, images_path)
    if len(img) < 16 + n * rows * cols:
        raise FormatError(f"{images_path}: truncated pixel data "
                          f"({len(img) - 16} bytes for {n}x{rows}x{cols})")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)

    lab = labels_path.read_bytes()
    lmagic = _read_u32be(lab, 0, labels_path)
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    ln = _read_u32be(lab, 4, labels_path)
    if len(lab) < 8 + ln:
        raise FormatError(f"{labels_path}: truncated label data")
    if ln != n:
        raise FormatError(f"image count {n} != label count {ln}")
    labels = np.frombuffer(lab, dtype=np.uint8, count=ln, offset=8).astype(np.int64)

    inputs = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(inputs, labels, class_count, image_shape=(1, rows, cols))


def load_csv(path, class_count: int | None = None) -> Dataset:
    """CSV with a header row; optional integer `label` column, numeric features."""
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    label_col = header.index("label") if "label" in header else None
    feat_cols = [i for i in range(len(header)) if i != label_col]
    try:
        inputs = np.array([[float(r[i]) for i in feat_cols] for r in rows])
        labels = (np.array([int(float(r[label_col])) for r in rows])
                  if label_col is not None else None)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: bad row: {exc}") from None
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels is not None else 0
    return Dataset(inputs, labels, class_count)


def synth_blobs(class_count: int, per_class: int, dim: int, spread: float,
                seed: int) -> Dataset:
    """Gaussian clusters at seeded centers."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((class_count, dim)) * 3.0
    inputs = np.empty((class_count * per_class, dim))
    labels = np.empty(class_count * per_class, dtype=np.int64)
    for k in range(class_count):
        block = slice(k * per_class, (k + 1) * per_class)
        inputs[block] = centers[k] + rng.standard_normal((per_class, dim)) * spread
        labels[block] = k
    return Dataset(inputs, labels, class_count)


def synth_spirals(class_count: int, per_class: int, noise: float, seed: int,
                  turns: float = 1.5) -> Dataset:
    """Interleaved 2-D spiral arms, one per class."""
    rng = np.random.default_rng(seed)
    inputs = np.empty((class_count * per_class, 2))
    labels = np.empty(class_count * per_class, dtype=np.int64)
    for k in range(class_count):
        t = rng.random(per_class)
        radius = 0.2 + 0.8 * t
        angle = 2.0 * np.pi * (k / class_count + turns * t)
        block = slice(k * per_class, (k + 1) * per_class)
        inputs[block, 0] = radius * np.cos(angle) + rng.standard_normal(per_class) * noise
        inputs[block, 1] = radius * np.sin(angle) + rng.standard_normal(per_class) * noise
        labels[block] = k
    return Dataset(inputs, labels, class_count)


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint train/test split with a seeded shuffle."""
    n = len(ds)
    n_test = int(round(n * test_fraction))
    order = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]
    def take(idx, tag):
        return Dataset(ds.inputs[idx], None if ds.labels is None else ds.labels[idx],
                       ds.class_count, split=tag, image_shape=ds.image_shape)
    return take(train_idx, "train"), take(test_idx, "test")


@dataclass
class Standardizer:
    """Per-feature affine transform fitted on the train split only."""
    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def fit(inputs: np.ndarray) -> "Standardizer":
        mean = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return Standardizer(mean, std)

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        return (inputs - self.mean) / self.std

    def invert(self, transformed: np.ndarray) -> np.ndarray:
        return transformed * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Standardizer":
        return Standardizer(np.asarray(d["mean"], dtype=np.float64),
                            np.asarray(d["std"], dtype=np.float64))


SCORE_SAMPLINGS = ("balanced-true", "balanced-pseudo", "uniform")


def score_batch(ds: Dataset | UnlabeledDataset, sampling: str, per_class: int,
                seed: int, teacher_logits: np.ndarray | None = None) -> np.ndarray:
    """Pick the scoring batch: per_class samples for each of the K classes.

    balanced-true balances by dataset labels, balanced-pseudo by teacher
    argmax (teacher_logits required), uniform ignores classes and draws
    per_class * K samples. A class with fewer than per_class members is
    sampled with replacement.
    """
    rng = np.random.default_rng(seed)
    k = ds.class_count
    if sampling == "uniform":
        idx = rng.choice(len(ds), size=per_class * k, replace=len(ds) < per_class * k)
        return ds.inputs[np.sort(idx)]
    if sampling == "balanced-true":
        if not isinstance(ds, Dataset) or ds.labels is None:
            raise ConfigError("balanced-true sampling needs a labeled dataset")
        by = ds.labels
    elif sampling == "balanced-pseudo":
        if teacher_logits is None:
            raise ConfigError("balanced-pseudo sampling needs teacher logits")
        by = np.argmax(teacher_logits, axis=1)
    else:
        raise ConfigError(f"unknown score sampling {sampling!r}")
    picks = []
    for c in range(k):
        members = np.flatnonzero(by == c)
        if members.size == 0:
            members = np.arange(len(ds))
        chosen = rng.choice(members, size=per_class, replace=members.size < per_class)
        picks.append(chosen)
    idx = np.sort(np.concatenate(picks))
    return ds.inputs[idx]
