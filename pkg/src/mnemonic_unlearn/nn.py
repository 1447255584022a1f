"""Dense ReLU network engine in float64 numpy.

Parameters live in one flat vector so that Fisher diagonals, perturbations
and gradients can all share a single segmentation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


@dataclass
class ParameterVector:
    """Flat float64 values plus an ordered, contiguous layer segmentation."""

    values: np.ndarray
    segments: tuple[Segment, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        self.segments = tuple(self.segments)
        if self.values.ndim != 1:
            raise ShapeError("parameter values must be a flat vector")
        offset = 0
        names = set()
        for seg in self.segments:
            if seg.name in names:
                raise ValueError(f"duplicate layer name {seg.name!r}")
            names.add(seg.name)
            if seg.offset != offset or int(np.prod(seg.shape)) != seg.length:
                raise ShapeError(f"segment {seg.name!r} is not contiguous or has a bad shape")
            offset += seg.length
        if offset != self.values.size:
            raise ShapeError(f"segments cover {offset} values but vector has {self.values.size}")

    @classmethod
    def from_arrays(cls, named: Iterable[tuple[str, np.ndarray]]) -> "ParameterVector":
        segments, chunks, offset = [], [], 0
        for name, arr in named:
            arr = np.asarray(arr, dtype=DTYPE)
            segments.append(Segment(name, offset, arr.size, tuple(arr.shape)))
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0, dtype=DTYPE)
        return cls(values, tuple(segments))

    def __len__(self) -> int:
        return self.values.size

    @property
    def layer_names(self) -> list[str]:
        return [s.name for s in self.segments]

    def view(self, name: str) -> np.ndarray:
        """Reshaped view (not a copy) of one layer."""
        for seg in self.segments:
            if seg.name == name:
                return self.values[seg.offset:seg.offset + seg.length].reshape(seg.shape)
        raise KeyError(name)

    def layer_slices(self) -> list[tuple[str, slice]]:
        return [(s.name, slice(s.offset, s.offset + s.length)) for s in self.segments]

    def same_layout(self, other: "ParameterVector") -> bool:
        return self.segments == other.segments

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != self.values.shape:
            raise ShapeError(f"expected {self.values.shape} values, got {values.shape}")
        return ParameterVector(values, self.segments)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.segments)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


# Gradients share the parameter layout; a separate class would add nothing.
GradientVector = ParameterVector


def _layer_names(n_layers: int) -> list[tuple[str, str]]:
    return [(f"fc{i}.weight", f"fc{i}.bias") for i in range(n_layers)]


@dataclass
class MlpModel:
    """Fully connected network, ReLU on hidden layers, identity output.

    Weights are stored as ``(fan_in, fan_out)`` so ``forward`` is
    ``relu(x @ W + b)`` layer after layer.
    """

    layer_dims: tuple[int, ...]
    params: ParameterVector
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"layer_dims must hold at least two positive sizes, got {self.layer_dims}")
        expected = []
        for (wname, bname), (fan_in, fan_out) in zip(
            _layer_names(self.n_layers), zip(self.layer_dims[:-1], self.layer_dims[1:])
        ):
            expected += [(wname, (fan_in, fan_out)), (bname, (fan_out,))]
        got = [(s.name, s.shape) for s in self.params.segments]
        if got != expected:
            raise ShapeError(f"parameter layout {got} does not match layer_dims {self.layer_dims}")

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], seed: int = 0) -> "MlpModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        rng = np.random.default_rng(seed)
        arrays = []
        for (wname, bname), (fan_in, fan_out) in zip(
            _layer_names(len(layer_dims) - 1), zip(layer_dims[:-1], layer_dims[1:])
        ):
            bound = 1.0 / math.sqrt(fan_in)
            arrays.append((wname, rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            arrays.append((bname, rng.uniform(-bound, bound, size=fan_out)))
        return cls(tuple(layer_dims), ParameterVector.from_arrays(arrays), seed=seed)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int]) -> "MlpModel":
        arrays = []
        for (wname, bname), (fan_in, fan_out) in zip(
            _layer_names(len(layer_dims) - 1), zip(layer_dims[:-1], layer_dims[1:])
        ):
            arrays += [(wname, np.zeros((fan_in, fan_out))), (bname, np.zeros(fan_out))]
        return cls(tuple(layer_dims), ParameterVector.from_arrays(arrays))

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_features(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.params.view(w), self.params.view(b)) for w, b in _layer_names(self.n_layers)]

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, self.params.copy(), self.seed, dict(self.meta))

    def with_params(self, values: np.ndarray) -> "MlpModel":
        return MlpModel(self.layer_dims, self.params.with_values(values), self.seed, dict(self.meta))


def _check_batch(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(f"expected batch with {model.n_features} columns, got shape {X.shape}")
    return X


def _check_labels(model: MlpModel, X: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ShapeError(f"labels shape {y.shape} does not match batch of {X.shape[0]}")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.size and (y.min() < 0 or y.max() >= model.n_classes):
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    if not np.all(np.isfinite(X)):
        raise ValueError("batch contains non-finite values")
    return y.astype(np.intp, copy=False)


def _forward_trace(model: MlpModel, X: np.ndarray) -> list[np.ndarray]:
    acts = [X]
    layers = model.weights()
    for i, (W, b) in enumerate(layers):
        z = acts[-1] @ W + b
        if i < len(layers) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts


def forward(model: MlpModel, X) -> np.ndarray:
    """Logits for a batch; rows follow the input rows."""
    return _forward_trace(model, _check_batch(model, X))[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=DTYPE)))


def per_sample_losses(model: MlpModel, X, y) -> np.ndarray:
    """Cross-entropy of each row against its label."""
    X = _check_batch(model, X)
    y = _check_labels(model, X, y)
    logp = log_softmax(forward(model, X))
    return -logp[np.arange(len(y)), y]


def _backward(model: MlpModel, acts: list[np.ndarray], y: np.ndarray):
    """Yield per-layer (input activation, output delta) for the *summed* loss."""
    probs = np.exp(log_softmax(acts[-1]))
    delta = probs
    delta[np.arange(len(y)), y] -= 1.0
    layers = model.weights()
    out = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        out[i] = (acts[i], delta)
        if i > 0:
            delta = (delta @ layers[i][0].T) * (acts[i] > 0)
    return out


def loss_and_grad(model: MlpModel, X, y) -> tuple[float, GradientVector]:
    """Mean softmax cross-entropy and its gradient w.r.t. every parameter."""
    X = _check_batch(model, X)
    y = _check_labels(model, X, y)
    acts = _forward_trace(model, X)
    logp = log_softmax(acts[-1])
    n = X.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    chunks = []
    for a, d in _backward(model, acts, y):
        chunks.append((a.T @ d).ravel() / n)
        chunks.append(d.sum(axis=0) / n)
    return loss, model.params.with_values(np.concatenate(chunks))


def squared_grad_sum(model: MlpModel, X, y) -> np.ndarray:
    """Sum over rows of the squared per-sample loss gradient.

    Each sample's weight gradient is the outer product ``a ⊗ δ``, so the sum
    of its elementwise squares is ``(a**2).T @ (δ**2)`` and no per-sample
    gradient matrix is ever materialized.
    """
    X = _check_batch(model, X)
    y = _check_labels(model, X, y)
    acts = _forward_trace(model, X)
    chunks = []
    for a, d in _backward(model, acts, y):
        d2 = d * d
        chunks.append(((a * a).T @ d2).ravel())
        chunks.append(d2.sum(axis=0))
    return np.concatenate(chunks)


def predict(model: MlpModel, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(model, X), axis=1)


def accuracy(model: MlpModel, X, y) -> float:
    """Percentage of rows whose argmax logit equals the label."""
    X = _check_batch(model, X)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch of {X.shape[0]}")
    return 100.0 * float(np.mean(predict(model, X) == y))


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    schedule: str = "constant"
    total_steps: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "cosine" and not (self.total_steps and self.total_steps > 0):
            raise ValueError("cosine schedule needs a positive total_steps")

    def rate(self, step: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        t = min(max(step, 0), self.total_steps) / self.total_steps
        return max(0.0, 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * t)))


def sgd_step(model: MlpModel, grad: GradientVector, config: SgdConfig, step: int = 0) -> MlpModel:
    """Return a new model with ``w - lr_t * (grad + weight_decay * w)``."""
    if not model.params.same_layout(grad):
        raise ShapeError("gradient layout does not match the model")
    if not grad.is_finite():
        raise ValueError("non-finite gradient")
    w = model.params.values
    lr = config.rate(step)
    update = grad.values + config.weight_decay * w if config.weight_decay else grad.values
    return model.with_params(w - lr * update)


def param_digest(model: MlpModel) -> str:
    import hashlib

    return hashlib.sha256(model.params.values.tobytes()).hexdigest()


CHECKPOINT_FORMAT = "mnemonic-unlearn/mlp-checkpoint/v1"


def save_checkpoint(model: MlpModel, path) -> Path:
    """Write an ``.npz`` holding raw float64 values plus a JSON header.

    Keys: ``header`` (JSON string: format, layer_dims, seed, meta),
    ``values`` (flat float64 parameter vector, little-endian).
    """
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "layer_dims": list(model.layer_dims),
        "seed": model.seed,
        "meta": model.meta,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                 values=model.params.values.astype("<f8"))
    return path


def load_checkpoint(path) -> MlpModel:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        values = data["values"].astype(DTYPE)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a model checkpoint (format={header.get('format')!r})")
    model = MlpModel.zeros(header["layer_dims"]).with_params(values)
    model.seed = header.get("seed")
    model.meta = header.get("meta") or {}
    return model
