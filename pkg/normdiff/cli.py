"""
Command line entry point: ``normdiff {synth,train,sample,eval,report}``.

Configuration precedence, lowest first: the run directory's ``config.json``
snapshot, command line flags, then ``--config FILE``.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

import normdiff
from normdiff.config import EVALUATIONS, RunConfig
from normdiff.errors import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, NormdiffError, NumericalError
from normdiff.pipeline import CONFIG_FILE, cmd_eval, cmd_report, cmd_sample, cmd_synth, cmd_train
from normdiff.utils import configure_logging, normdiff_logger

LOG_FILE = "run.log"

# flag dest -> path inside RunConfig
FLAG_FIELDS = {
    "dataset": ("dataset",),
    "seed": ("seed",),
    "n_samples": ("synth", "n_samples"),
    "onset": ("synth", "mixture_onset_age"),
    "skew_shape": ("synth", "skew_shape"),
    "synth_seed": ("synth", "seed"),
    "backbone": ("backbone",),
    "epochs": ("optimizer", "epochs"),
    "batch_size": ("optimizer", "batch_size"),
    "lr": ("optimizer", "lr"),
    "weight_decay": ("optimizer", "weight_decay"),
    "grad_clip": ("optimizer", "grad_clip"),
    "T": ("schedule", "T"),
    "beta_start": ("schedule", "beta_start"),
    "beta_end": ("schedule", "beta_end"),
    "train_split": ("train_split",),
    "train_fraction": ("train_fraction",),
    "samples_per_cell": ("grid", "samples_per_cell"),
    "bin_width": ("grid", "bin_width"),
    "subject_draws": ("grid", "subject_draws"),
    "chunk_size": ("grid", "chunk_size"),
    "min_bin_count": ("evaluation", "min_bin_count"),
    "ks_permutations": ("evaluation", "ks_permutations"),
    "mantel_permutations": ("evaluation", "mantel_permutations"),
    "band_min_age": ("evaluation", "band_min_age"),
    "band_max_age": ("evaluation", "band_max_age"),
    "workers": ("evaluation", "workers"),
    "memorisation_samples": ("evaluation", "memorisation_samples"),
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--run-dir", dest="output_dir", type=Path, default=None, help="run directory")
    parser.add_argument("--config", type=Path, default=None, help="JSON RunConfig; overrides flags")
    parser.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="normdiff", description="Diffusion normative models for tabular phenotypes")
    parser.add_argument("--version", action="version", version=f"%(prog)s {normdiff.__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic cohort")
    _add_common(synth)
    synth.add_argument("--n-samples", type=int, default=None)
    synth.add_argument("--age-min", type=float, default=None)
    synth.add_argument("--age-max", type=float, default=None)
    synth.add_argument("--onset", type=float, default=None, help="mixture onset age")
    synth.add_argument("--skew-shape", type=float, default=None)
    synth.add_argument("--synth-seed", type=int, default=None)

    train = sub.add_parser("train", help="split, standardise and train a denoiser")
    _add_common(train)
    train.add_argument("--dataset", type=Path, default=None, help="cohort CSV (default: the run's cohort.csv)")
    train.add_argument("--backbone", choices=["mlp", "saint"], default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--weight-decay", type=float, default=None)
    train.add_argument("--grad-clip", type=float, default=None)
    train.add_argument("--T", type=int, default=None, help="diffusion steps")
    train.add_argument("--beta-start", type=float, default=None)
    train.add_argument("--beta-end", type=float, default=None)
    train.add_argument("--train-split", type=float, default=None)
    train.add_argument("--train-fraction", type=float, default=None)
    train.add_argument("--resume", action="store_true", help="continue from checkpoint.json")

    sample = sub.add_parser("sample", help="draw conditional samples on the covariate grid")
    _add_common(sample)
    sample.add_argument("--samples-per-cell", "-M", type=int, default=None)
    sample.add_argument("--bin-width", type=float, default=None)
    sample.add_argument("--subject-draws", type=int, default=None)
    sample.add_argument("--chunk-size", type=int, default=None)

    evaluate = sub.add_parser("eval", help="run the evaluation suite")
    _add_common(evaluate)
    evaluate.add_argument("--which", nargs="+", choices=list(EVALUATIONS) + ["all"], default=None)
    evaluate.add_argument("--oracle", action="store_true", help="evaluate the true synthetic conditionals")
    evaluate.add_argument("--samples-per-cell", "-M", type=int, default=None, help="oracle draws per cell")
    evaluate.add_argument("--bin-width", type=float, default=None)
    evaluate.add_argument("--min-bin-count", type=int, default=None)
    evaluate.add_argument("--ks-permutations", type=int, default=None)
    evaluate.add_argument("--mantel-permutations", type=int, default=None)
    evaluate.add_argument("--band-min-age", type=float, default=None)
    evaluate.add_argument("--band-max-age", type=float, default=None)
    evaluate.add_argument("--workers", type=int, default=None)
    evaluate.add_argument(
        "--memorisation-samples", choices=["subjects", "grid"], default=None,
        help="generated rows for the NN ratio: one per holdout subject (default) or the grid store",
    )

    report = sub.add_parser("report", help="print the headline table")
    _add_common(report)
    return parser


def _set(tree: Dict[str, Any], path, value: Any) -> None:
    for key in path[:-1]:
        node = tree.get(key)
        if not isinstance(node, dict):
            node = {}
            tree[key] = node
        tree = node
    tree[path[-1]] = value


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested RunConfig fields for every flag given on the command line."""
    tree: Dict[str, Any] = {}
    for dest, path in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set(tree, path, str(value) if isinstance(value, Path) else value)
    age_min, age_max = getattr(args, "age_min", None), getattr(args, "age_max", None)
    if age_min is not None or age_max is not None:
        _set(tree, ("synth", "age_range"), [
            age_min if age_min is not None else 45.0,
            age_max if age_max is not None else 82.0,
        ])
    which = getattr(args, "which", None)
    if which:
        _set(tree, ("evaluation", "which"), list(EVALUATIONS) if "all" in which else which)
    if args.command == "synth":
        synth = tree.setdefault("synth", {})
        if "seed" not in synth and args.seed is not None:
            synth["seed"] = args.seed
    return tree


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    Build the run configuration from snapshot, flags and config file.

    Raises:
        pydantic.ValidationError: If the merged configuration is invalid.
    """
    data: Dict[str, Any] = {}
    if args.output_dir is not None:
        snapshot = Path(args.output_dir) / CONFIG_FILE
        if snapshot.exists():
            data = json.loads(snapshot.read_text(encoding="utf-8"))
    data = _merge(data, flag_overrides(args))
    if args.output_dir is not None:
        data["output_dir"] = str(args.output_dir)
    if args.config is not None:
        data = _merge(data, json.loads(Path(args.config).read_text(encoding="utf-8")))
    return RunConfig.model_validate(data)


def run_command(args: argparse.Namespace, config: RunConfig) -> Any:
    if args.command == "synth":
        return cmd_synth(config)
    if args.command == "train":
        return cmd_train(config, resume=args.resume)
    if args.command == "sample":
        return cmd_sample(config)
    if args.command == "eval":
        return cmd_eval(config, oracle=args.oracle)
    table = cmd_report(config)
    print(table.to_string(index=False))
    return table


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one stage and map failures to exit codes 2 and 3."""
    parser = build_parser()
    args = parser.parse_args(argv)
    level = getattr(logging, args.log_level)
    configure_logging(level=level)
    try:
        config = resolve_config(args)
        run_dir = Path(config.output_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        configure_logging(level=level, log_file=run_dir / LOG_FILE)
        run_command(args, config)
    except NumericalError as exc:
        normdiff_logger.error(f"Numerical failure: {exc}")
        return EXIT_NUMERICAL
    except (ValidationError, NormdiffError, OSError, json.JSONDecodeError) as exc:
        normdiff_logger.error(f"Validation failure: {exc}")
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
