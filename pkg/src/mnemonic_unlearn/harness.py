"""Experiment pipelines behind the command line.

Configuration precedence, lowest first: built-in profile, JSON config file,
command-line flags. Every ``cmd_*`` function writes into a staging directory
and only moves files into ``out`` once the whole command succeeded, then
appends an entry to ``out/manifest.json``.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import shutil
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Callable

import numpy as np

from .datasets import (MNIST_FILES, ClassPartition, LabeledDataset, MnemonicCodebook,
                       default_data_dir,
                       generate_codebook, load_mnist, make_synthetic)
from .evaluator import (backdoor_probe, fim_approximation_study, forgetting_capability,
                        laplace_diagnostic, loss_distribution, rank_auc,
                        write_json)
from .nn import (ShapeError, accuracy, load_checkpoint, param_digest, predict,
                 save_checkpoint)
from .trainer import TrainConfig, train_with_codes
from .unlearner import (DEFAULT_EPSILON, estimate_fim_diagonal, fim_error, fim_from_codebook,
                        fim_from_data, forget, forget_with_data, perturb_and_select,
                        sample_per_class)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "mnemonic-unlearn/manifest/v1"

LAMBDA1_GRID = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]
LAMBDA2_GRID = [1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 1e5]

_BASE = {
    "seed": 0,
    "out": "runs/default",
    "workers": 1,
    "checkpoint": None,
    "codebook": None,
    "codes": {"codes_per_class": 1},
    "train": {},
    "forget": {"classes": [0], "lambda1": 1e-3, "lambda2": 10.0,
               "epsilon": DEFAULT_EPSILON, "samples_per_class": None},
    "sweep": {"lambda1": LAMBDA1_GRID, "lambda2": LAMBDA2_GRID, "source": "mnemonic",
              "scoring": "test", "samples_per_class": None},
    "tmix": {"values": [0.0, 0.1, 0.3, 0.5, 0.8]},
    "fim_study": {"class_set": [0], "sample_counts": [1, 10, 100, 1000], "seeds": [0, 1, 2]},
    "mia": {"class_id": 0},
    "backdoor": {"trigger_class": 0, "ratios": [0.0, 0.1, 0.3, 0.5, 0.8, 1.0]},
    "laplace": {"t_mix": None},
}

PROFILES = {
    "quick": {
        "dataset": {"kind": "synthetic", "num_classes": 10, "per_class": 200, "dim": 32,
                    "cluster_spread": 1.0, "test_per_class": 100},
        "train": {"t_mix": 0.1, "epochs": 10, "batch_size": 64, "hidden": [64, 32],
                  "sgd": {"learning_rate": 0.05, "weight_decay": 5e-4}},
        "fim_study": {"sample_counts": [1, 10, 100]},
    },
    "mnist-desk": {
        "dataset": {"kind": "mnist", "path": None, "train_limit": None},
        "train": {"t_mix": 0.1, "epochs": 20, "batch_size": 128, "hidden": [256, 128],
                  "sgd": {"learning_rate": 0.01, "weight_decay": 5e-4}},
    },
    "mnist-full": {
        "dataset": {"kind": "mnist", "path": None, "train_limit": None},
        "train": {"t_mix": 0.1, "epochs": 200, "batch_size": 128, "hidden": [256, 128],
                  "sgd": {"learning_rate": 0.01, "weight_decay": 5e-4}},
    },
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    profile: str
    raw: dict

    @classmethod
    def resolve(cls, profile: str | None = None, config_path=None,
                overrides: dict | None = None) -> "ExperimentConfig":
        file_cfg = {}
        if config_path is not None:
            path = Path(config_path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                file_cfg = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(file_cfg, dict):
                raise ConfigError(f"{path}: top level must be an object")
        overrides = overrides or {}
        name = overrides.get("profile") or profile or file_cfg.get("profile") or "quick"
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        raw = deep_merge(deep_merge(deep_merge(_BASE, PROFILES[name]), file_cfg), overrides)
        raw["profile"] = name
        cfg = cls(name, raw)
        cfg.validate()
        return cfg

    # --- accessors -------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    @property
    def workers(self) -> int:
        return int(self.raw["workers"])

    @property
    def num_classes(self) -> int:
        ds = self.raw["dataset"]
        return 10 if ds["kind"] == "mnist" else int(ds.get("num_classes", 3))

    def train_config(self, **changes) -> TrainConfig:
        t = dict(self.raw["train"])
        t.setdefault("seed", self.seed)
        t.update(changes)
        return TrainConfig.from_dict(t)

    def partition(self, classes=None) -> ClassPartition:
        classes = self.raw["forget"]["classes"] if classes is None else classes
        return ClassPartition.from_forget(classes, self.num_classes)

    def data_path(self) -> Path:
        p = self.raw["dataset"].get("path")
        return Path(p).expanduser() if p else default_data_dir()

    # --- validation ------------------------------------------------------

    def validate(self) -> None:
        raw = self.raw
        ds = raw.get("dataset", {})
        if ds.get("kind") not in ("mnist", "synthetic"):
            raise ConfigError(f"dataset.kind must be 'mnist' or 'synthetic', got {ds.get('kind')!r}")
        if ds["kind"] == "mnist":
            path = self.data_path()
            missing = [str(path / f) for files in MNIST_FILES.values() for f in files
                       if not (path / f).is_file()]
            if missing:
                raise ConfigError(f"MNIST files not found under {path}: {', '.join(missing)}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for key in ("checkpoint", "codebook"):
            if raw.get(key) and not Path(raw[key]).is_file():
                raise ConfigError(f"{key} file not found: {raw[key]}")
        try:
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train section: {exc}") from None
        f = raw["forget"]
        if not (f["lambda1"] > 0 and f["lambda2"] > 0 and f["epsilon"] > 0):
            raise ConfigError("lambda1, lambda2 and epsilon must be positive")
        try:
            self.partition()
        except ValueError as exc:
            raise ConfigError(f"invalid forget classes: {exc}") from None
        s = raw["sweep"]
        for key in ("lambda1", "lambda2"):
            grid = s[key]
            if not grid:
                raise ConfigError(f"sweep.{key} grid is empty")
            if any(not v > 0 for v in grid):
                raise ConfigError(f"sweep.{key} grid must be positive")
        if s["source"] not in ("mnemonic", "data"):
            raise ConfigError("sweep.source must be 'mnemonic' or 'data'")
        if s["scoring"] not in ("test", "probe"):
            raise ConfigError("sweep.scoring must be 'test' or 'probe'")
        if any(not 0 <= t <= 1 for t in raw["tmix"]["values"]) or not raw["tmix"]["values"]:
            raise ConfigError("tmix.values must be a nonempty list within [0, 1]")
        if any(n < 1 for n in raw["fim_study"]["sample_counts"]):
            raise ConfigError("fim_study.sample_counts must be positive")
        if any(not 0 <= r <= 1 for r in raw["backdoor"]["ratios"]):
            raise ConfigError("backdoor.ratios must lie within [0, 1]")
        for key, sub in (("mia", "class_id"), ("backdoor", "trigger_class")):
            c = raw[key][sub]
            if not 0 <= c < self.num_classes:
                raise ConfigError(f"{key}.{sub}={c} outside [0, {self.num_classes})")


# ---------------------------------------------------------------------------
# staging and manifests


def code_version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            version += f"+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version


class RunOutput:
    """Collects files in a staging directory; ``commit`` publishes them atomically-ish."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=self.out.parent))
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        if name == MANIFEST_NAME:
            raise ValueError("reserved file name")
        self.files.append(name)
        return self.stage / name

    def commit(self) -> list[Path]:
        self.out.mkdir(parents=True, exist_ok=True)
        placed = []
        for name in self.files:
            dst = self.out / name
            shutil.move(str(self.stage / name), dst)
            placed.append(dst)
        self.discard()
        return placed

    def discard(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    data = json.loads(path.read_text())
    if data.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a run manifest")
    return data


def append_manifest(out: Path, entry: dict) -> Path:
    path = Path(out) / MANIFEST_NAME
    data = read_manifest(path) if path.is_file() else {"format": MANIFEST_FORMAT, "runs": []}
    data["runs"].append(entry)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(data, indent=2, default=_json_default))
    tmp.replace(path)
    return path


def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, (Path,)):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def run_command(name: str, cfg: ExperimentConfig, body: Callable[[RunOutput], dict],
                inputs: dict | None = None) -> dict:
    """Run ``body`` against a fresh staging area and record it in the manifest.

    ``body`` returns the metrics dict. On any exception the staging area is
    removed and nothing in ``out`` changes.
    """
    run = RunOutput(cfg.out)
    start = time.perf_counter()
    try:
        metrics = body(run)
        wall = time.perf_counter() - start
        run.commit()
    except BaseException:
        run.discard()
        raise
    entry = {
        "command": name,
        "config": cfg.raw,
        "code_version": code_version(),
        "seeds": {"global": cfg.seed, "train": cfg.train_config().seed},
        "inputs": inputs or {},
        "files": list(run.files),
        "wall_time": wall,
        "metrics": metrics,
    }
    append_manifest(cfg.out, entry)
    return metrics


# ---------------------------------------------------------------------------
# loading


def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    ds = cfg.raw["dataset"]
    if ds["kind"] == "mnist":
        return load_mnist(cfg.data_path(), ds.get("train_limit"))
    return make_synthetic(num_classes=int(ds.get("num_classes", 3)),
                          per_class=int(ds.get("per_class", 100)), dim=int(ds.get("dim", 8)),
                          cluster_spread=float(ds.get("cluster_spread", 0.5)),
                          seed=int(ds.get("seed", cfg.seed)),
                          test_per_class=ds.get("test_per_class"))


def _require(cfg: ExperimentConfig, key: str) -> Path:
    value = cfg.raw.get(key)
    if not value:
        raise ConfigError(f"this command needs --{key}")
    return Path(value)


def load_model(cfg: ExperimentConfig, test_set: LabeledDataset):
    model = load_checkpoint(_require(cfg, "checkpoint"))
    if model.n_features != test_set.n_features or model.n_classes != test_set.num_classes:
        raise ShapeError(f"checkpoint dims {model.layer_dims} do not fit the dataset "
                         f"({test_set.n_features} features, {test_set.num_classes} classes)")
    return model


def load_codebook(cfg: ExperimentConfig, model) -> MnemonicCodebook:
    codebook = MnemonicCodebook.load(_require(cfg, "codebook"))
    if codebook.feature_dim != model.n_features:
        raise ShapeError(f"codebook dim {codebook.feature_dim} != model input {model.n_features}")
    if codebook.num_classes != model.n_classes:
        raise ShapeError(f"codebook has {codebook.num_classes} classes, model {model.n_classes}")
    return codebook


def make_codebook(cfg: ExperimentConfig, train: LabeledDataset) -> MnemonicCodebook:
    codes = cfg.raw["codes"]
    return generate_codebook(train.num_classes, train.n_features,
                             int(codes.get("codes_per_class", 1)),
                             int(codes.get("seed", cfg.seed)))


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    tc = cfg.train_config()

    def body(run: RunOutput) -> dict:
        codebook = make_codebook(cfg, train) if tc.t_mix > 0 else None
        model, record = train_with_codes(train, codebook, tc, test)
        save_checkpoint(model, run.path("model.npz"))
        if codebook is not None:
            codebook.save(run.path("codebook.npz"))
        record.write_json(run.path("train_record.json"))
        record.write_csv(run.path("train_record.csv"))
        metrics = {"test_accuracy": record.test_accuracy[-1], "final_loss": record.epoch_loss[-1],
                   "replacement_count": record.replacement_count, "steps": record.steps,
                   "param_digest": param_digest(model)}
        write_json(metrics, run.path("metrics.json"))
        return metrics

    return run_command("train", cfg, body)


def _forget_common(cfg: ExperimentConfig, name: str, with_data: bool) -> dict:
    train, test = load_data(cfg)
    model = load_model(cfg, test)
    codebook = None if with_data else load_codebook(cfg, model)
    partition = cfg.partition()
    f = cfg.raw["forget"]
    digest = param_digest(model)

    def body(run: RunOutput) -> dict:
        before = forgetting_capability(model, test, partition, stage="before")
        if with_data:
            forgotten, report = forget_with_data(model, train, partition, f["lambda1"],
                                                 f["lambda2"], f["samples_per_class"], cfg.seed,
                                                 f["epsilon"])
        else:
            forgotten, report = forget(model, codebook, partition, f["lambda1"], f["lambda2"],
                                       f["epsilon"])
        after = forgetting_capability(forgotten, test, partition, stage="after",
                                      forget_time=report.wall_time)
        after.forget_time = report.wall_time
        after.backprop_count = report.backprop_count
        if param_digest(model) != digest:
            raise RuntimeError("input model was modified")
        save_checkpoint(forgotten, run.path("forgotten.npz"))
        report.write_json(run.path("forget_report.json"))
        write_json({"before": before.to_dict(), "after": after.to_dict()}, run.path("eval.json"))
        return {"before": {"a_r": before.a_r, "e_f": before.e_f},
                "after": {"a_r": after.a_r, "e_f": after.e_f},
                "chosen_sign": report.to_dict()["chosen_sign"],
                "backprop_count": report.backprop_count,
                "forget_classes": sorted(partition.forget)}

    return run_command(name, cfg, body, inputs={"checkpoint": cfg.raw["checkpoint"],
                                                "codebook": cfg.raw.get("codebook")})


def cmd_forget(cfg: ExperimentConfig) -> dict:
    return _forget_common(cfg, "forget", with_data=False)


def cmd_forget_with_data(cfg: ExperimentConfig) -> dict:
    return _forget_common(cfg, "forget-with-data", with_data=True)


def best_grid_point(rows: list[dict]) -> dict:
    """argmax of A_R + E_F; ties prefer smaller lambda2, then smaller lambda1."""
    if not rows:
        raise ValueError("empty sweep")
    return min(rows, key=lambda r: (-r["score"], r["lambda2"], r["lambda1"]))


def sweep_lambdas(model, fim_f, fim_r, probe_X, probe_y, partition: ClassPartition,
                  test_set: LabeledDataset | None, lambda1_grid, lambda2_grid,
                  epsilon: float = DEFAULT_EPSILON, workers: int = 1) -> list[dict]:
    """Forget once per grid point from the same model and Fisher diagonals.

    Rows are scored on ``test_set`` when given, otherwise on the probe set.
    """
    points = [(float(l1), float(l2)) for l2 in lambda2_grid for l1 in lambda1_grid]

    def one(point):
        l1, l2 = point
        chosen, _, sign, _, _ = perturb_and_select(model, fim_f, fim_r, probe_X, probe_y,
                                                   partition, l1, l2, epsilon)
        if test_set is not None:
            rep = forgetting_capability(chosen, test_set, partition)
            a_r, e_f = rep.a_r, rep.e_f
        else:
            hit = predict(chosen, probe_X) == probe_y
            in_f = np.isin(probe_y, sorted(partition.forget))
            a_r, e_f = 100.0 * hit[~in_f].mean(), 100.0 - 100.0 * hit[in_f].mean()
        return {"lambda1": l1, "lambda2": l2, "a_r": float(a_r), "e_f": float(e_f),
                "score": float(a_r + e_f), "sign": "+" if sign > 0 else "-"}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(zip(points, pool.map(one, points)))
    else:
        results = {p: one(p) for p in points}
    return [results[p] for p in points]


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_sweep(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    model = load_model(cfg, test)
    s = cfg.raw["sweep"]
    partition = cfg.partition()
    if s["source"] == "mnemonic":
        codebook = load_codebook(cfg, model)
        fim_f = fim_from_codebook(model, codebook, partition.forget)
        fim_r = fim_from_codebook(model, codebook, partition.remain)
        probe_X, probe_y = codebook.as_dataset()
    else:
        X, y, _ = sample_per_class(train, partition.forget | partition.remain,
                                   s["samples_per_class"], cfg.seed)
        in_f = np.isin(y, sorted(partition.forget))
        fim_f = estimate_fim_diagonal(model, X[in_f], y[in_f], partition.forget)
        fim_r = estimate_fim_diagonal(model, X[~in_f], y[~in_f], partition.remain)
        probe_X, probe_y = X, y

    def body(run: RunOutput) -> dict:
        rows = sweep_lambdas(model, fim_f, fim_r, probe_X, probe_y, partition,
                             test if s["scoring"] == "test" else None, s["lambda1"], s["lambda2"],
                             cfg.raw["forget"]["epsilon"], cfg.workers)
        best = best_grid_point(rows)
        _write_rows(run.path("sweep.csv"), rows)
        write_json({"best": best, "source": s["source"], "scoring": s["scoring"]},
                   run.path("sweep_best.json"))
        return {"best": best, "points": len(rows)}

    return run_command("sweep", cfg, body, inputs={"checkpoint": cfg.raw["checkpoint"]})


def tmix_row(t_mix: float, cfg: ExperimentConfig, train, test) -> dict:
    tc = cfg.train_config(t_mix=t_mix)
    codebook = make_codebook(cfg, train)
    model, _ = train_with_codes(train, codebook if t_mix > 0 else None, tc)
    partition = cfg.partition()
    f = cfg.raw["forget"]
    forgotten, _ = forget(model, codebook, partition, f["lambda1"], f["lambda2"], f["epsilon"])
    rep = forgetting_capability(forgotten, test, partition)
    row = {"t_mix": t_mix, "test_accuracy": accuracy(model, test.inputs, test.labels),
           "a_r": rep.a_r, "e_f": rep.e_f, "fim_error": "N/A"}
    if t_mix > 0:
        oracle = fim_from_data(model, train, partition.forget)
        row["fim_error"] = fim_error(fim_from_codebook(model, codebook, partition.forget), oracle)
    return row


def cmd_tmix_study(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    values = [float(v) for v in cfg.raw["tmix"]["values"]]

    def body(run: RunOutput) -> dict:
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                rows = dict(zip(values, pool.map(lambda t: tmix_row(t, cfg, train, test), values)))
        else:
            rows = {t: tmix_row(t, cfg, train, test) for t in values}
        ordered = [rows[t] for t in values]
        _write_rows(run.path("tmix.csv"), ordered)
        write_json(ordered, run.path("tmix.json"))
        return {"rows": ordered}

    return run_command("tmix-study", cfg, body)


def cmd_fim_study(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    model = load_model(cfg, test)
    codebook = load_codebook(cfg, model) if cfg.raw.get("codebook") else None
    fs = cfg.raw["fim_study"]

    def body(run: RunOutput) -> dict:
        study = fim_approximation_study(model, train, codebook, fs["class_set"],
                                        fs["sample_counts"], fs["seeds"])
        study.write_csv(run.path("fim_study.csv"))
        write_json(study, run.path("fim_study.json"))
        return {"curve": study.curve(), "mnemonic_error": study.mnemonic_error}

    return run_command("fim-study", cfg, body, inputs={"checkpoint": cfg.raw["checkpoint"]})


def cmd_mia(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    model = load_model(cfg, test)
    class_id = int(cfg.raw["mia"]["class_id"])

    def body(run: RunOutput) -> dict:
        dist = loss_distribution(model, train, test, class_id)
        auc = rank_auc(dist.split("train"), dist.split("test"))
        with open(run.path("mia_losses.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "loss"])
            for tag, loss in zip(dist.membership, dist.losses):
                w.writerow([tag, repr(float(loss))])
        out = {"class_id": class_id, "auc": auc,
               "n_train": int((dist.membership == "train").sum()),
               "n_test": int((dist.membership == "test").sum())}
        write_json(out, run.path("mia.json"))
        return out

    return run_command("mia", cfg, body, inputs={"checkpoint": cfg.raw["checkpoint"]})


def cmd_backdoor(cfg: ExperimentConfig) -> dict:
    _, test = load_data(cfg)
    model = load_model(cfg, test)
    codebook = load_codebook(cfg, model)
    b = cfg.raw["backdoor"]

    def body(run: RunOutput) -> dict:
        acc = backdoor_probe(model, codebook, test, int(b["trigger_class"]), b["ratios"])
        rows = [{"ratio": r, "accuracy": a} for r, a in acc.items()]
        _write_rows(run.path("backdoor.csv"), rows)
        out = {"trigger_class": int(b["trigger_class"]), "accuracy": rows,
               "plain_accuracy": accuracy(model, test.inputs, test.labels)}
        write_json(out, run.path("backdoor.json"))
        return out

    return run_command("backdoor", cfg, body, inputs={"checkpoint": cfg.raw["checkpoint"]})


def cmd_laplace(cfg: ExperimentConfig) -> dict:
    train, test = load_data(cfg)
    model = load_model(cfg, test)
    codebook = load_codebook(cfg, model) if cfg.raw.get("codebook") else None
    t_mix = cfg.raw["laplace"]["t_mix"]
    if t_mix is None:
        t_mix = model.meta.get("t_mix", cfg.train_config().t_mix)

    def body(run: RunOutput) -> dict:
        diag = laplace_diagnostic(model, train, codebook, cfg.partition(), float(t_mix))
        write_json(diag, run.path("laplace.json"))
        return diag

    return run_command("laplace", cfg, body, inputs={"checkpoint": cfg.raw["checkpoint"]})


# ---------------------------------------------------------------------------
# reporting

ANALOGS = {
    "train": "test accuracy of a code-embedded model",
    "forget": "forgetting capability with codes (A_R, E_F)",
    "forget-with-data": "Fisher diagonals from training rows instead of codes",
    "sweep": "lambda grid search, best A_R + E_F",
    "tmix-study": "sensitivity to the replacement probability",
    "fim-study": "distance of estimated Fisher diagonals to the all-data one",
    "mia": "loss-threshold membership inference on the forgotten class",
    "backdoor": "codes mixed into test inputs as a trigger",
    "laplace": "per-layer gradient magnitudes at the trained point",
    "acceptance": "acceptance criterion",
}


def _flatten(d, prefix="") -> dict:
    flat = {}
    if isinstance(d, dict):
        for k, v in d.items():
            flat.update(_flatten(v, f"{prefix}{k}."))
    elif isinstance(d, list):
        if all(not isinstance(v, (dict, list)) for v in d):
            flat[prefix[:-1]] = json.dumps(d)
        else:
            for i, v in enumerate(d):
                flat.update(_flatten(v, f"{prefix}{i}."))
    else:
        flat[prefix[:-1]] = d
    return flat


def summarize(manifests: list[dict], base_dirs: list[Path]) -> tuple[list[dict], list[str]]:
    """One row per recorded run; metrics flattened into ``key=value`` pairs."""
    rows, warnings = [], []
    for manifest, base in zip(manifests, base_dirs):
        for i, run in enumerate(manifest.get("runs", [])):
            missing = [f for f in run.get("files", []) if not (base / f).is_file()]
            for f in missing:
                warnings.append(f"{base}: run {i} ({run['command']}) lists missing file {f}")
            flat = _flatten(run.get("metrics", {}))
            rows.append({"source": str(base), "run": i, "command": run["command"],
                         "analog": ANALOGS.get(run["command"], run["command"]),
                         "metrics": "; ".join(f"{k}={v}" for k, v in flat.items()),
                         "missing_files": len(missing)})
    return rows, warnings


def cmd_report(cfg: ExperimentConfig, manifest_paths: list) -> dict:
    manifests, bases = [], []
    for p in manifest_paths:
        p = Path(p)
        manifests.append(read_manifest(p))
        bases.append(p if p.is_dir() else p.parent)

    def body(run: RunOutput) -> dict:
        rows, warnings = summarize(manifests, bases)
        _write_rows(run.path("summary.csv"), rows)
        lines = ["# Run summary", ""]
        if warnings:
            lines += ["## Warnings", ""] + [f"- {w}" for w in warnings] + [""]
        if rows:
            lines += ["| command | analog | metrics |", "|---|---|---|"]
            lines += [f"| {r['command']} | {r['analog']} | {r['metrics']} |" for r in rows]
        run.path("summary.md").write_text("\n".join(lines) + "\n")
        for w in warnings:
            log.warning(w)
        return {"rows": len(rows), "warnings": warnings}

    return run_command("report", cfg, body, inputs={"manifests": [str(p) for p in manifest_paths]})


COMMANDS = {
    "train": cmd_train,
    "forget": cmd_forget,
    "forget-with-data": cmd_forget_with_data,
    "sweep": cmd_sweep,
    "tmix-study": cmd_tmix_study,
    "fim-study": cmd_fim_study,
    "mia": cmd_mia,
    "backdoor": cmd_backdoor,
    "laplace": cmd_laplace,
}
