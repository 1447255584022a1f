"""``mnemonic-unlearn`` command line.

Every subcommand accepts --config, --seed, --out, --profile and --workers.
Flags override the JSON config, which overrides the profile defaults.
Exit status is 0 on success and 2 when an error was reported.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .datasets import DATA_ENV_VAR, IdxFormatError
from .harness import COMMANDS, PROFILES, ConfigError, ExperimentConfig, cmd_report
from .nn import ShapeError

log = logging.getLogger("mnemonic_unlearn")


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--profile", choices=sorted(PROFILES),
                        help="built-in defaults (quick, mnist-desk, mnist-full)")
    common.add_argument("--workers", type=int, help="concurrent sweep / t_mix points")
    common.add_argument("--data-dir", help=f"MNIST directory (default: ${DATA_ENV_VAR} or ~/data/mnist)")
    common.add_argument("-v", "--verbose", action="store_true")

    model_in = argparse.ArgumentParser(add_help=False)
    model_in.add_argument("--checkpoint", help="model checkpoint (.npz)")
    model_in.add_argument("--codebook", help="codebook file (.npz)")

    forgetting = argparse.ArgumentParser(add_help=False)
    forgetting.add_argument("--forget-class", type=_int_list, dest="forget_classes",
                            help="comma-separated classes to forget")
    forgetting.add_argument("--lambda1", type=float)
    forgetting.add_argument("--lambda2", type=float)

    parser = argparse.ArgumentParser(prog="mnemonic-unlearn",
                                     description="One-shot class forgetting with mnemonic codes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model with code replacement")
    p.add_argument("--t-mix", type=float)
    p.add_argument("--epochs", type=int)

    sub.add_parser("forget", parents=[common, model_in, forgetting],
                   help="forget classes using the codebook")
    p = sub.add_parser("forget-with-data", parents=[common, model_in, forgetting],
                       help="forget classes using training rows")
    p.add_argument("--samples-per-class", type=int)

    p = sub.add_parser("sweep", parents=[common, model_in, forgetting], help="lambda grid search")
    p.add_argument("--source", choices=["mnemonic", "data"])
    p.add_argument("--lambda1-grid", type=_float_list)
    p.add_argument("--lambda2-grid", type=_float_list)

    p = sub.add_parser("tmix-study", parents=[common, forgetting], help="train across t_mix values")
    p.add_argument("--values", type=_float_list)

    p = sub.add_parser("fim-study", parents=[common, model_in], help="Fisher approximation curve")
    p.add_argument("--class-set", type=_int_list)
    p.add_argument("--sample-counts", type=_int_list)
    p.add_argument("--fim-seeds", type=_int_list)

    p = sub.add_parser("mia", parents=[common, model_in], help="loss-threshold membership AUC")
    p.add_argument("--class", type=int, dest="class_id")

    p = sub.add_parser("backdoor", parents=[common, model_in], help="code-mixing probe")
    p.add_argument("--trigger-class", type=int)
    p.add_argument("--ratios", type=_float_list)

    p = sub.add_parser("laplace", parents=[common, model_in, forgetting],
                       help="per-layer gradient magnitudes")
    p.add_argument("--t-mix", type=float)

    p = sub.add_parser("report", parents=[common], help="summarize run manifests")
    p.add_argument("manifests", nargs="*", help="manifest files or run directories")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    """Translate flags that were actually given into a nested config dict."""
    given = {k: v for k, v in vars(args).items() if v is not None}
    o: dict = {}

    def put(path: str, key: str):
        if key in given:
            node = o
            *parents, leaf = path.split(".")
            for part in parents:
                node = node.setdefault(part, {})
            node[leaf] = given[key]

    for key in ("seed", "out", "workers", "profile", "checkpoint", "codebook"):
        put(key, key)
    put("dataset.path", "data_dir")
    put("forget.classes", "forget_classes")
    put("forget.lambda1", "lambda1")
    put("forget.lambda2", "lambda2")
    put("forget.samples_per_class", "samples_per_class")
    put("sweep.samples_per_class", "samples_per_class")
    put("sweep.source", "source")
    put("sweep.lambda1", "lambda1_grid")
    put("sweep.lambda2", "lambda2_grid")
    put("tmix.values", "values")
    put("fim_study.class_set", "class_set")
    put("fim_study.sample_counts", "sample_counts")
    put("fim_study.seeds", "fim_seeds")
    put("mia.class_id", "class_id")
    put("backdoor.trigger_class", "trigger_class")
    put("backdoor.ratios", "ratios")
    put("train.epochs", "epochs")
    if args.command == "laplace":
        put("laplace.t_mix", "t_mix")
    else:
        put("train.t_mix", "t_mix")
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.resolve(args.profile, args.config, overrides_from_args(args))
        if args.command == "report":
            result = cmd_report(cfg, args.manifests)
        else:
            result = COMMANDS[args.command](cfg)
    except (ConfigError, ShapeError, IdxFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
