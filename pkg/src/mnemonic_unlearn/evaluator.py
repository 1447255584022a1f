"""Measurements around a forgetting run.

Every function here is read-only on the model it is given.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datasets import ClassPartition, LabeledDataset, MnemonicCodebook
from .nn import MlpModel, accuracy, loss_and_grad, per_sample_losses, predict
from .unlearner import FimDiagonal, fim_error, fim_from_codebook, fim_from_data


@dataclass
class EvalReport:
    a_r: float
    a_f: float
    e_f: float
    forget_time: float | None = None
    backprop_count: int | None = None
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("a_r", "a_f", "e_f"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")

    @property
    def score(self) -> float:
        return self.a_r + self.e_f

    def to_dict(self) -> dict:
        return asdict(self)


def forgetting_capability(model: MlpModel, test_set: LabeledDataset, partition: ClassPartition,
                          **context) -> EvalReport:
    """Test accuracy on remaining classes and error on the forgetting classes."""
    in_f = np.isin(test_set.labels, sorted(partition.forget))
    in_r = np.isin(test_set.labels, sorted(partition.remain))
    if not in_f.any():
        raise ValueError(f"test set has no samples of forgetting classes {sorted(partition.forget)}")
    if not in_r.any():
        raise ValueError("test set has no samples of remaining classes")
    hit = predict(model, test_set.inputs) == test_set.labels
    a_r = 100.0 * float(hit[in_r].mean())
    a_f = 100.0 * float(hit[in_f].mean())
    context.setdefault("forget", sorted(partition.forget))
    return EvalReport(a_r, a_f, 100.0 - a_f, context=context)


def never_outputs_class(model: MlpModel, test_set: LabeledDataset, class_id: int) -> tuple[bool, int]:
    """``(True, 0)`` when no test input is assigned to ``class_id``; otherwise the offending count."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    count = int(np.sum(predict(model, test_set.inputs) == class_id))
    return count == 0, count


@dataclass
class LossDistribution:
    losses: np.ndarray
    membership: np.ndarray  # "train" / "test" per entry
    class_id: int

    def split(self, tag: str) -> np.ndarray:
        return self.losses[self.membership == tag]


def loss_distribution(model: MlpModel, train_split: LabeledDataset, test_split: LabeledDataset,
                      class_id: int) -> LossDistribution:
    parts, tags = [], []
    for ds, tag in ((train_split, "train"), (test_split, "test")):
        idx = ds.class_indices(class_id)
        if idx.size == 0:
            raise ValueError(f"{tag} split has no samples of class {class_id}")
        parts.append(per_sample_losses(model, ds.inputs[idx], ds.labels[idx]))
        tags.append(np.full(idx.size, tag))
    return LossDistribution(np.concatenate(parts), np.concatenate(tags), class_id)


def rank_auc(member_losses: np.ndarray, nonmember_losses: np.ndarray) -> float:
    """P(member loss < non-member loss) with ties counted one half.

    A loss-threshold attacker that calls low-loss samples members gets
    AUC > 0.5 exactly when training losses sit below test losses.
    """
    a = np.asarray(member_losses, dtype=np.float64)
    b = np.asarray(nonmember_losses, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both loss samples must be nonempty")
    b_sorted = np.sort(b)
    greater = b.size - np.searchsorted(b_sorted, a, side="right")
    ties = np.searchsorted(b_sorted, a, side="right") - np.searchsorted(b_sorted, a, side="left")
    return float((greater.sum() + 0.5 * ties.sum()) / (a.size * b.size))


def mia_auc(model: MlpModel, train_split: LabeledDataset, test_split: LabeledDataset,
            class_id: int) -> float:
    dist = loss_distribution(model, train_split, test_split, class_id)
    return rank_auc(dist.split("train"), dist.split("test"))


def backdoor_probe(model: MlpModel, codebook: MnemonicCodebook, test_set: LabeledDataset,
                   trigger_class: int, ratios: Sequence[float] = (0.0, 0.1, 0.3, 0.5, 0.8, 1.0),
                   code_index: int = 0) -> dict[float, float]:
    """Accuracy on ``(1 - r) * x + r * code`` for each mixing ratio ``r``; labels unchanged."""
    code = codebook.codes[trigger_class, code_index]
    out = {}
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"ratio {r} outside [0, 1]")
        # r == 0 must reproduce the plain accuracy bit for bit, so skip the arithmetic
        x = test_set.inputs if r == 0 else (1.0 - r) * test_set.inputs + r * code
        out[float(r)] = accuracy(model, x, test_set.labels)
    return out


def _mean_abs_by_layer(model: MlpModel, grad_values: np.ndarray) -> dict[str, float]:
    return {name: float(np.abs(grad_values[sl]).mean()) for name, sl in model.params.layer_slices()}


def laplace_diagnostic(model: MlpModel, dataset: LabeledDataset, codebook: MnemonicCodebook | None,
                       partition: ClassPartition, t_mix: float) -> dict[str, dict[str, float]]:
    """Per-layer mean |gradient| of the full, forgetting-class and remaining-class losses.

    The full loss weights the code loss by ``t_mix`` and the data loss by
    ``1 - t_mix``, matching the training mixture.
    """
    def grad(X, y):
        return loss_and_grad(model, X, y)[1].values

    X, y = dataset.inputs, dataset.labels
    g_data = grad(X, y)
    if codebook is not None and t_mix > 0:
        cx, cy = codebook.as_dataset()
        g_full = t_mix * grad(cx, cy) + (1.0 - t_mix) * g_data
    else:
        g_full = g_data
    in_f = np.isin(y, sorted(partition.forget))
    full = _mean_abs_by_layer(model, g_full)
    nan = {k: float("nan") for k in full}
    # an empty slice has no loss to differentiate; report NaN rather than fail
    forget = _mean_abs_by_layer(model, grad(X[in_f], y[in_f])) if in_f.any() else nan
    remain = _mean_abs_by_layer(model, grad(X[~in_f], y[~in_f])) if (~in_f).any() else nan
    tiny = np.finfo(np.float64).tiny
    return {
        "full": full,
        "forget": forget,
        "remain": remain,
        "forget_ratio": {k: forget[k] / max(full[k], tiny) for k in full},
        "remain_ratio": {k: remain[k] / max(full[k], tiny) for k in full},
    }


@dataclass
class FimStudy:
    sample_counts: list[int]
    data_errors: dict[int, list[float]]
    mnemonic_error: float | None
    seeds: list[int]
    notes: dict = field(default_factory=dict)

    def curve(self) -> list[dict]:
        rows = []
        for n in self.sample_counts:
            errs = np.asarray(self.data_errors[n])
            rows.append({"x": n, "mean": float(errs.mean()), "std": float(errs.std()),
                         "seed_count": len(errs)})
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["x", "mean", "std", "seed_count"])
            w.writeheader()
            for row in self.curve():
                w.writerow(row)
            if self.mnemonic_error is not None:
                w.writerow({"x": "mnemonic", "mean": self.mnemonic_error, "std": 0.0, "seed_count": 1})

    def to_dict(self) -> dict:
        return {"sample_counts": self.sample_counts,
                "data_errors": {str(k): v for k, v in self.data_errors.items()},
                "mnemonic_error": self.mnemonic_error, "seeds": self.seeds,
                "curve": self.curve(), "notes": self.notes}


def fim_approximation_study(model: MlpModel, dataset: LabeledDataset,
                            codebook: MnemonicCodebook | None, class_set: Iterable[int],
                            sample_counts: Sequence[int], seeds: Sequence[int] = (0,),
                            oracle: FimDiagonal | None = None) -> FimStudy:
    """Distance to the all-data Fisher diagonal for n-sample and code-based estimates."""
    class_set = frozenset(class_set)
    if any(n < 1 for n in sample_counts):
        raise ValueError("sample counts must be positive")
    if oracle is None:
        oracle = fim_from_data(model, dataset, class_set)
    smallest = min(dataset.class_indices(c).size for c in class_set)
    notes = {}
    errors: dict[int, list[float]] = {}
    for n in sample_counts:
        if n > smallest:
            notes[str(n)] = f"capped at {smallest} samples for the smallest class"
        errors[int(n)] = [fim_error(fim_from_data(model, dataset, class_set, n, seed=s), oracle)
                          for s in seeds]
    mnemonic = None
    if codebook is not None:
        mnemonic = fim_error(fim_from_codebook(model, codebook, class_set), oracle)
    return FimStudy([int(n) for n in sample_counts], errors, mnemonic, list(seeds), notes)


def write_json(obj, path) -> None:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
