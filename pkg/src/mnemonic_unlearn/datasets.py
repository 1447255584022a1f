"""MNIST IDX ingestion, synthetic clusters, class partitions and mnemonic codebooks."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

IMAGE_MAGIC = 0x00000803  # 2051
LABEL_MAGIC = 0x00000801  # 2049

DATA_ENV_VAR = "MNEMONIC_UNLEARN_DATA"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split_tag: str = "train"
    normalization: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes,
                              self.split_tag, self.normalization)

    def select_classes(self, classes: Iterable[int]) -> "LabeledDataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, sorted(classes))))


@dataclass(frozen=True)
class ClassPartition:
    """Forgetting classes and remaining classes; together they cover every class."""

    forget: frozenset
    remain: frozenset

    def __post_init__(self):
        object.__setattr__(self, "forget", frozenset(int(c) for c in self.forget))
        object.__setattr__(self, "remain", frozenset(int(c) for c in self.remain))
        if self.forget & self.remain:
            raise ValueError(f"forget and remain overlap on {sorted(self.forget & self.remain)}")
        if not self.forget:
            raise ValueError("forget set is empty")
        if not self.remain:
            raise ValueError("remain set is empty")

    @classmethod
    def from_forget(cls, forget, num_classes: int) -> "ClassPartition":
        forget = {forget} if isinstance(forget, (int, np.integer)) else set(forget)
        bad = [c for c in forget if not 0 <= c < num_classes]
        if bad:
            raise ValueError(f"forget classes {bad} outside [0, {num_classes})")
        return cls(frozenset(forget), frozenset(range(num_classes)) - frozenset(forget))

    @property
    def num_classes(self) -> int:
        return len(self.forget) + len(self.remain)

    def check(self, num_classes: int) -> None:
        if self.forget | self.remain != frozenset(range(num_classes)):
            raise ValueError(f"partition does not cover classes 0..{num_classes - 1}")


# ---------------------------------------------------------------------------
# IDX parsing


def _read_header(buf: bytes, path, expected_magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(buf) < need:
        raise IdxFormatError(f"{path}: truncated header, {len(buf)} bytes at offset 0 < {need}")
    magic = struct.unpack(">i", buf[:4])[0]
    if magic != expected_magic:
        kind = {IMAGE_MAGIC: "image", LABEL_MAGIC: "label"}.get(magic, "unknown")
        want = "image" if expected_magic == IMAGE_MAGIC else "label"
        raise IdxFormatError(
            f"{path}: magic {magic} at byte offset 0 marks a {kind} file, expected {want} "
            f"file ({expected_magic})")
    return struct.unpack(f">{ndim}i", buf[4:need])


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    count, rows, cols = _read_header(buf, path, IMAGE_MAGIC, 3)
    expected = 16 + count * rows * cols
    if len(buf) != expected:
        what = "truncated" if len(buf) < expected else "has trailing bytes"
        raise IdxFormatError(
            f"{path}: {what}; header declares {count} images of {rows}x{cols} "
            f"({expected} bytes) but data ends at byte offset {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,) = _read_header(buf, path, LABEL_MAGIC, 1)
    expected = 8 + count
    if len(buf) != expected:
        what = "truncated" if len(buf) < expected else "has trailing bytes"
        raise IdxFormatError(
            f"{path}: {what}; header declares {count} labels ({expected} bytes) but data "
            f"ends at byte offset {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).copy()


def load_mnist_idx(images_path, labels_path, split_tag: str = "train",
                   normalization: tuple[float, float] | None = None,
                   num_classes: int = 10) -> LabeledDataset:
    """Parse an IDX image/label pair.

    Pixels are scaled to [0, 1] and then standardized with a single scalar
    mean/std. Pass the training split's ``normalization`` when loading the
    test split; when omitted the statistics of this file are used.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images_path} holds {images.shape[0]} images, "
            f"{labels_path} holds {labels.shape[0]} labels")
    x = images.astype(np.float64) / 255.0
    if normalization is None:
        std = float(x.std())
        normalization = (float(x.mean()), std if std > 0 else 1.0)
    mean, std = normalization
    x -= mean
    x /= std
    return LabeledDataset(x, labels.astype(np.int64), num_classes, split_tag, (mean, std))


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV_VAR, Path.home() / "data" / "mnist")).expanduser()


def load_mnist(data_dir=None, train_limit: int | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and test splits from a directory of the four standard IDX files."""
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    paths = {split: [data_dir / f for f in files] for split, files in MNIST_FILES.items()}
    missing = [str(p) for ps in paths.values() for p in ps if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"MNIST files not found: {', '.join(missing)}")
    train = load_mnist_idx(*paths["train"], split_tag="train")
    test = load_mnist_idx(*paths["test"], split_tag="test", normalization=train.normalization)
    if train_limit is not None and train_limit < len(train):
        train = train.subset(np.arange(train_limit))
    return train, test


# ---------------------------------------------------------------------------
# Synthetic Gaussian clusters


def make_synthetic(num_classes: int = 3, per_class: int = 100, dim: int = 8,
                   cluster_spread: float = 0.5, seed: int = 0,
                   test_per_class: int | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Isotropic Gaussian blobs around seeded standard-normal centers."""
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("num_classes, per_class and dim must all be >= 1")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be nonnegative")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim)) * 3.0

    def draw(n):
        labels = np.repeat(np.arange(num_classes), n)
        x = centers[labels] + cluster_spread * rng.standard_normal((labels.size, dim))
        return x, labels

    # one generator, sequential draws: train and test never share samples
    x_tr, y_tr = draw(per_class)
    x_te, y_te = draw(test_per_class)
    return (LabeledDataset(x_tr, y_tr, num_classes, "train"),
            LabeledDataset(x_te, y_te, num_classes, "test"))


# ---------------------------------------------------------------------------
# Mnemonic codes


CODEBOOK_FORMAT = "mnemonic-unlearn/codebook/v1"


@dataclass
class MnemonicCodebook:
    """Per-class standard-normal input patterns, shape ``(classes, codes_per_class, dim)``."""

    codes: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 3 or 0 in self.codes.shape:
            raise ValueError(f"codes must have shape (classes, per_class, dim), got {self.codes.shape}")

    @property
    def num_classes(self) -> int:
        return self.codes.shape[0]

    @property
    def codes_per_class(self) -> int:
        return self.codes.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.codes.shape[2]

    def for_class(self, c: int) -> np.ndarray:
        return self.codes[c]

    def as_dataset(self, classes: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Stack the codes of ``classes`` (all by default) into ``(X, y)``."""
        classes = range(self.num_classes) if classes is None else sorted(classes)
        X = np.concatenate([self.codes[c] for c in classes])
        y = np.repeat(np.asarray(list(classes), dtype=np.int64), self.codes_per_class)
        return X, y

    def covers(self, classes: Iterable[int]) -> bool:
        return all(0 <= c < self.num_classes for c in classes)

    def save(self, path) -> Path:
        """``.npz`` with a JSON ``header`` (format, seed, shape, meta) and float64 ``codes``."""
        path = Path(path)
        header = {"format": CODEBOOK_FORMAT, "seed": self.seed,
                  "shape": list(self.codes.shape), "meta": self.meta}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                     codes=self.codes.astype("<f8"))
        return path

    @classmethod
    def load(cls, path) -> "MnemonicCodebook":
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            codes = data["codes"].astype(np.float64)
        if header.get("format") != CODEBOOK_FORMAT:
            raise ValueError(f"{path}: not a codebook file")
        return cls(codes, header["seed"], header.get("meta") or {})


def generate_codebook(num_classes: int, feature_dim: int, codes_per_class: int = 1,
                      seed: int = 0) -> MnemonicCodebook:
    """i.i.d. N(0, 1) codes in standardized input space; never resampled."""
    if num_classes < 1 or feature_dim < 1 or codes_per_class < 1:
        raise ValueError("num_classes, feature_dim and codes_per_class must all be >= 1")
    rng = np.random.default_rng(seed)
    codes = rng.standard_normal((num_classes, codes_per_class, feature_dim))
    return MnemonicCodebook(codes, seed)
