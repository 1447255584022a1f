"""One-shot class forgetting by Fisher-guided parameter perturbation.

Pipeline: diagonal empirical Fisher per class (from mnemonic codes or from
training data) -> per-parameter amplitude ``eta = f_forget / (f_remain + eps)``
-> per-layer coefficient ``alpha = min(lambda1, lambda2 / max eta)`` ->
two candidates ``w +/- alpha * eta`` -> keep the one that scores higher on
``A_R + E_F``.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .datasets import ClassPartition, LabeledDataset, MnemonicCodebook
from .nn import MlpModel, Segment, ShapeError, predict, squared_grad_sum

DEFAULT_EPSILON = 1e-12


@dataclass
class FimDiagonal:
    values: np.ndarray
    segments: tuple[Segment, ...]
    class_set: frozenset
    source: str
    backprop_count: int = 0

    def __post_init__(self):
        if self.source not in ("mnemonic", "data", "oracle"):
            raise ValueError(f"unknown FIM source {self.source!r}")
        if self.values.ndim != 1 or np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("FIM diagonal must be a finite, nonnegative vector")

    def __len__(self) -> int:
        return self.values.size


def _check_layout(a, b) -> None:
    if a.segments != b.segments:
        raise ShapeError("parameter segmentations differ")


def estimate_fim_diagonal(model: MlpModel, X, y, class_set: Iterable[int],
                          source: str = "data") -> FimDiagonal:
    """Class-balanced mean of per-sample squared loss gradients.

    Each class's samples are averaged first, then the per-class vectors are
    averaged over ``class_set``, so a class with many samples does not
    dominate the estimate.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    class_set = frozenset(int(c) for c in class_set)
    if X.shape[0] == 0:
        raise ValueError("no samples")
    stray = set(np.unique(y).tolist()) - class_set
    if stray:
        raise ValueError(f"samples carry labels {sorted(stray)} outside class_set")
    total = np.zeros(len(model.params))
    for c in sorted(class_set):
        mask = y == c
        if not mask.any():
            raise ValueError(f"class {c} has no samples")
        total += squared_grad_sum(model, X[mask], y[mask]) / mask.sum()
    return FimDiagonal(total / len(class_set), model.params.segments, class_set, source,
                       backprop_count=int(X.shape[0]))


def fim_from_codebook(model: MlpModel, codebook: MnemonicCodebook,
                      class_set: Iterable[int]) -> FimDiagonal:
    class_set = frozenset(int(c) for c in class_set)
    if not codebook.covers(class_set):
        raise ValueError(f"codebook lacks classes {sorted(c for c in class_set if c >= codebook.num_classes)}")
    X, y = codebook.as_dataset(class_set)
    return estimate_fim_diagonal(model, X, y, class_set, source="mnemonic")


def sample_per_class(dataset: LabeledDataset, class_set: Iterable[int], n: int | None,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray, dict]:
    """Seeded subset of ``n`` rows per class (all rows when ``n`` is None).

    Returns ``(X, y, capped)`` where ``capped`` maps classes with fewer than
    ``n`` rows to the count actually used.
    """
    rng = np.random.default_rng(seed)
    picks, capped = [], {}
    for c in sorted(class_set):
        idx = dataset.class_indices(c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no samples")
        if n is not None:
            if n < 1:
                raise ValueError("samples per class must be >= 1")
            if n < idx.size:
                idx = np.sort(rng.choice(idx, size=n, replace=False))
            elif n > idx.size:
                capped[c] = int(idx.size)
        picks.append(idx)
    idx = np.concatenate(picks)
    return dataset.inputs[idx], dataset.labels[idx], capped


def fim_from_data(model: MlpModel, dataset: LabeledDataset, class_set: Iterable[int],
                  samples_per_class: int | None = None, seed: int = 0) -> FimDiagonal:
    X, y, _ = sample_per_class(dataset, class_set, samples_per_class, seed)
    return estimate_fim_diagonal(model, X, y, class_set,
                                 source="oracle" if samples_per_class is None else "data")


def compute_eta(fim_forget: FimDiagonal, fim_remain: FimDiagonal,
                epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    _check_layout(fim_forget, fim_remain)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return fim_forget.values / (fim_remain.values + epsilon)


def compute_alpha(eta: np.ndarray, segments: Iterable[Segment], lambda1: float,
                  lambda2: float) -> dict[str, float]:
    """``min(lambda1, lambda2 / max eta)`` for every parameter tensor.

    A layer whose largest amplitude is zero gets ``lambda1``.
    """
    if not (lambda1 > 0 and lambda2 > 0):
        raise ValueError("lambda1 and lambda2 must be positive")
    alpha = {}
    for seg in segments:
        peak = float(eta[seg.offset:seg.offset + seg.length].max()) if seg.length else 0.0
        alpha[seg.name] = lambda1 if peak == 0 else min(lambda1, lambda2 / peak)
    return alpha


@dataclass
class PerturbationPlan:
    eta: np.ndarray
    alpha_per_layer: dict[str, float]
    segments: tuple[Segment, ...]
    lambda1: float
    lambda2: float
    epsilon_denominator: float = DEFAULT_EPSILON

    @classmethod
    def build(cls, fim_forget: FimDiagonal, fim_remain: FimDiagonal, lambda1: float,
              lambda2: float, epsilon: float = DEFAULT_EPSILON) -> "PerturbationPlan":
        eta = compute_eta(fim_forget, fim_remain, epsilon)
        alpha = compute_alpha(eta, fim_forget.segments, lambda1, lambda2)
        return cls(eta, alpha, fim_forget.segments, lambda1, lambda2, epsilon)

    def delta(self) -> np.ndarray:
        """Unsigned per-parameter step ``alpha_layer * eta``."""
        scale = np.empty_like(self.eta)
        for seg in self.segments:
            scale[seg.offset:seg.offset + seg.length] = self.alpha_per_layer[seg.name]
        return scale * self.eta

    def apply(self, model: MlpModel, sign: int) -> MlpModel:
        if sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if model.params.segments != self.segments:
            raise ShapeError("plan does not match the model's parameters")
        return model.with_params(model.params.values + sign * self.delta())


@dataclass
class ForgetReport:
    chosen_sign: int
    score_plus: float
    score_minus: float
    alpha_per_layer: dict[str, float]
    lambda1: float
    lambda2: float
    backprop_count: int
    forward_passes: int
    wall_time: float
    source: str = "mnemonic"
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "chosen_sign": "+" if self.chosen_sign > 0 else "-",
            "code_score_plus": self.score_plus,
            "code_score_minus": self.score_minus,
            "alpha_per_layer": self.alpha_per_layer,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "backprop_count": self.backprop_count,
            "forward_passes": self.forward_passes,
            "wall_time": self.wall_time,
            "source": self.source,
            "notes": self.notes,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def score_candidate(model: MlpModel, X, y, partition: ClassPartition) -> float:
    """``A_R + E_F`` on a small labelled probe set (codes or data)."""
    hit = predict(model, X) == y
    in_forget = np.isin(y, sorted(partition.forget))
    a_r = 100.0 * hit[~in_forget].mean()
    e_f = 100.0 - 100.0 * hit[in_forget].mean()
    return float(a_r + e_f)


def choose_sign(score_plus: float, score_minus: float) -> int:
    # ties keep the positive direction
    return 1 if score_plus >= score_minus else -1


def _validate(model: MlpModel, partition: ClassPartition) -> None:
    if not model.params.is_finite():
        raise ValueError("model parameters contain NaN or inf")
    partition.check(model.n_classes)


def perturb_and_select(model: MlpModel, fim_forget: FimDiagonal, fim_remain: FimDiagonal,
                       probe_X, probe_y, partition: ClassPartition, lambda1: float,
                       lambda2: float, epsilon: float = DEFAULT_EPSILON):
    plan = PerturbationPlan.build(fim_forget, fim_remain, lambda1, lambda2, epsilon)
    plus, minus = plan.apply(model, +1), plan.apply(model, -1)
    s_plus = score_candidate(plus, probe_X, probe_y, partition)
    s_minus = score_candidate(minus, probe_X, probe_y, partition)
    sign = choose_sign(s_plus, s_minus)
    return (plus if sign > 0 else minus), plan, sign, s_plus, s_minus


def forget(model: MlpModel, codebook: MnemonicCodebook, partition: ClassPartition,
           lambda1: float = 1e-3, lambda2: float = 10.0,
           epsilon: float = DEFAULT_EPSILON) -> tuple[MlpModel, ForgetReport]:
    """Forget ``partition.forget`` using only the codebook; the input model is not modified.

    Cost is one backward pass per code of every class plus two forward passes
    over the codebook, independent of the training-set size.
    """
    _validate(model, partition)
    if not codebook.covers(partition.forget | partition.remain):
        raise ValueError("codebook does not cover every class")
    if codebook.feature_dim != model.n_features:
        raise ShapeError(f"codebook dim {codebook.feature_dim} != model input {model.n_features}")
    start = time.perf_counter()
    fim_f = fim_from_codebook(model, codebook, partition.forget)
    fim_r = fim_from_codebook(model, codebook, partition.remain)
    probe_X, probe_y = codebook.as_dataset()
    chosen, plan, sign, s_plus, s_minus = perturb_and_select(
        model, fim_f, fim_r, probe_X, probe_y, partition, lambda1, lambda2, epsilon)
    elapsed = time.perf_counter() - start
    chosen.meta.update(forgotten=sorted(partition.forget), lambda1=lambda1, lambda2=lambda2)
    report = ForgetReport(sign, s_plus, s_minus, plan.alpha_per_layer, lambda1, lambda2,
                          fim_f.backprop_count + fim_r.backprop_count, 2, elapsed)
    return chosen, report


def forget_with_data(model: MlpModel, dataset: LabeledDataset, partition: ClassPartition,
                     lambda1: float = 1e-3, lambda2: float = 10.0,
                     samples_per_class: int | None = None, seed: int = 0,
                     epsilon: float = DEFAULT_EPSILON) -> tuple[MlpModel, ForgetReport]:
    """Same perturbation, but Fisher diagonals and sign scoring use training rows.

    ``samples_per_class=None`` uses every row of every class.
    """
    _validate(model, partition)
    start = time.perf_counter()
    X, y, capped = sample_per_class(dataset, partition.forget | partition.remain,
                                    samples_per_class, seed)
    in_f = np.isin(y, sorted(partition.forget))
    source = "oracle" if samples_per_class is None else "data"
    fim_f = estimate_fim_diagonal(model, X[in_f], y[in_f], partition.forget, source)
    fim_r = estimate_fim_diagonal(model, X[~in_f], y[~in_f], partition.remain, source)
    chosen, plan, sign, s_plus, s_minus = perturb_and_select(
        model, fim_f, fim_r, X, y, partition, lambda1, lambda2, epsilon)
    elapsed = time.perf_counter() - start
    notes = {"samples_per_class": samples_per_class or "all"}
    if capped:
        notes["capped_classes"] = capped
    report = ForgetReport(sign, s_plus, s_minus, plan.alpha_per_layer, lambda1, lambda2,
                          fim_f.backprop_count + fim_r.backprop_count, 2, elapsed,
                          source="data", notes=notes)
    return chosen, report


def fim_error(a: FimDiagonal, b: FimDiagonal) -> float:
    """L2 distance between two diagonals divided by the parameter count."""
    _check_layout(a, b)
    return float(np.linalg.norm(a.values - b.values) / a.values.size)
