"""Mini-batch SGD training with stochastic mnemonic-code replacement."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datasets import LabeledDataset, MnemonicCodebook
from .nn import MlpModel, SgdConfig, ShapeError, accuracy, loss_and_grad, sgd_step

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (256, 128)


@dataclass(frozen=True)
class TrainConfig:
    t_mix: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seed: int = 0
    excluded_classes: frozenset = frozenset()
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        if not 0.0 <= self.t_mix <= 1.0:
            raise ValueError(f"t_mix must lie in [0, 1], got {self.t_mix}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        object.__setattr__(self, "excluded_classes", frozenset(int(c) for c in self.excluded_classes))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self._asdict(), **changes})

    def _asdict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def to_dict(self) -> dict:
        d = self._asdict()
        d["sgd"] = asdict(self.sgd)
        d["excluded_classes"] = sorted(self.excluded_classes)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("sgd"), dict):
            d["sgd"] = SgdConfig(**d["sgd"])
        if "excluded_classes" in d:
            d["excluded_classes"] = frozenset(d["excluded_classes"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainRecord:
    epoch_loss: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    replacements_per_epoch: list[int] = field(default_factory=list)
    replacement_count: int = 0
    backprop_count: int = 0
    steps: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_accuracy", "replacements"])
            for i, loss in enumerate(self.epoch_loss):
                acc = self.test_accuracy[i] if i < len(self.test_accuracy) else ""
                w.writerow([i + 1, repr(loss), acc if acc == "" else repr(acc),
                            self.replacements_per_epoch[i]])


def _streams(seed: int):
    """Independent generators for init, replacement draws and shuffling.

    Keeping them separate means ``t_mix=0`` consumes the shuffle stream
    exactly like plain training does.
    """
    init, mix, order, pick = np.random.SeedSequence(seed).spawn(4)
    return (int(init.generate_state(1)[0]), np.random.default_rng(mix),
            np.random.default_rng(order), np.random.default_rng(pick))


def _check_codebook(dataset: LabeledDataset, codebook: MnemonicCodebook | None, t_mix: float):
    if codebook is None:
        if t_mix > 0:
            raise ValueError("t_mix > 0 requires a codebook")
        return
    classes = np.unique(dataset.labels)
    missing = [int(c) for c in classes if c >= codebook.num_classes]
    if missing:
        raise ValueError(f"codebook has no codes for classes {missing}")
    if codebook.feature_dim != dataset.n_features:
        raise ShapeError(
            f"codebook dim {codebook.feature_dim} != dataset features {dataset.n_features}")


def _run_sgd(model: MlpModel, dataset: LabeledDataset, codebook: MnemonicCodebook | None,
             config: TrainConfig, max_steps: int | None, test_set: LabeledDataset | None,
             replace_hook: Callable | None = None) -> tuple[MlpModel, TrainRecord]:
    """Shared loop; ``max_steps`` caps the number of mini-batch updates."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    _, mix_rng, order_rng, pick_rng = _streams(config.seed)
    X, y = dataset.inputs, dataset.labels
    if config.excluded_classes:
        keep = ~np.isin(y, sorted(config.excluded_classes))
        X, y = X[keep], y[keep]
        if y.size == 0:
            raise ValueError("every sample belongs to an excluded class")
    n = y.size
    batches_per_epoch = math.ceil(n / config.batch_size)
    epochs = config.epochs if max_steps is None else math.ceil(max_steps / batches_per_epoch) if max_steps else 0
    record = TrainRecord()
    step = 0
    start = time.perf_counter()
    for epoch in range(epochs):
        # replacement is drawn for the whole epoch before shuffling
        replaced = mix_rng.random(n) < config.t_mix
        if codebook is not None and codebook.codes_per_class > 1:
            which = pick_rng.integers(0, codebook.codes_per_class, size=n)
        else:
            which = np.zeros(n, dtype=np.intp)
        n_replaced = int(replaced.sum())
        order = order_rng.permutation(n)
        total, seen = 0.0, 0
        for b in range(batches_per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            xb, yb = X[idx], y[idx]
            swap = replaced[idx]
            if swap.any():
                xb = xb.copy()
                xb[swap] = codebook.codes[yb[swap], which[idx][swap]]
                if replace_hook is not None:
                    replace_hook(xb[swap], yb[swap])
            loss, grad = loss_and_grad(model, xb, yb)
            model = sgd_step(model, grad, config.sgd, step)
            step += 1
            record.backprop_count += 1
            total += loss * idx.size
            seen += idx.size
        if max_steps is not None and seen < n:
            # partial epoch: count only the samples that were actually visited
            visited = order[:seen]
            n_replaced = int(replaced[visited].sum())
        record.replacements_per_epoch.append(n_replaced)
        record.replacement_count += n_replaced
        record.epoch_loss.append(total / max(seen, 1))
        if test_set is not None:
            record.test_accuracy.append(accuracy(model, test_set.inputs, test_set.labels))
        log.info("epoch %d loss %.4f%s", epoch + 1, record.epoch_loss[-1],
                 f" test acc {record.test_accuracy[-1]:.2f}" if test_set is not None else "")
    record.steps = step
    record.wall_time = time.perf_counter() - start
    return model, record


def init_model(n_features: int, num_classes: int, config: TrainConfig) -> MlpModel:
    init_seed, *_ = _streams(config.seed)
    model = MlpModel.initialize((n_features, *config.hidden, num_classes), seed=init_seed)
    model.seed = config.seed
    return model


def train_with_codes(dataset: LabeledDataset, codebook: MnemonicCodebook | None,
                     config: TrainConfig, test_set: LabeledDataset | None = None,
                     replace_hook: Callable | None = None) -> tuple[MlpModel, TrainRecord]:
    """Train from scratch, swapping each sample for its class code with probability ``t_mix``.

    A fresh uniform draw decides every sample's replacement in every epoch;
    labels are never touched. ``replace_hook(x_codes, labels)`` sees every
    replaced block, which the tests use to check label preservation.
    """
    _check_codebook(dataset, codebook, config.t_mix)
    model = init_model(dataset.n_features, dataset.num_classes, config)
    model, record = _run_sgd(model, dataset, codebook, config, None, test_set, replace_hook)
    model.meta.update(t_mix=config.t_mix, excluded_classes=sorted(config.excluded_classes))
    return model, record


def plain_train(dataset: LabeledDataset, config: TrainConfig,
                test_set: LabeledDataset | None = None) -> tuple[MlpModel, TrainRecord]:
    """Training without codes; with ``excluded_classes`` this yields the retrain oracle."""
    return train_with_codes(dataset, None, config.replace(t_mix=0.0), test_set)


def finetune_with_codes(pretrained: MlpModel, dataset: LabeledDataset,
                        codebook: MnemonicCodebook, steps: int, config: TrainConfig,
                        test_set: LabeledDataset | None = None) -> tuple[MlpModel, TrainRecord]:
    """Run exactly ``steps`` mixed mini-batch updates starting from ``pretrained``."""
    if pretrained.n_features != dataset.n_features or pretrained.n_classes != dataset.num_classes:
        raise ShapeError(
            f"model dims {pretrained.layer_dims} do not fit dataset "
            f"({dataset.n_features} features, {dataset.num_classes} classes)")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    _check_codebook(dataset, codebook, config.t_mix)
    model, record = _run_sgd(pretrained.copy(), dataset, codebook, config, steps, test_set)
    model.meta.update(t_mix=config.t_mix, finetune_steps=steps)
    return model, record


def mnist_profile(**overrides) -> TrainConfig:
    """784-256-128-10, 20 epochs, batch 128, lr 0.01, decay 5e-4, t_mix 0.1."""
    base = dict(t_mix=0.1, epochs=20, batch_size=128, sgd=SgdConfig(0.01, 5e-4), seed=0,
                hidden=DEFAULT_HIDDEN)
    base.update(overrides)
    return TrainConfig(**base)
