"""Command-line entry point wiring config, data, training, and diagnostics.

Subcommands
    synth      generate the synthetic two-domain dataset and export it
    train      episodic source-domain training -> checkpoint
    finetune   adapt a checkpoint on the designated target pool -> checkpoint
    eval       repeated split/finetune/evaluate protocol -> report JSON
    ablate     the labelled variant table -> CSV
    gradcheck  finite-difference verification of all gradient paths

Every command is deterministic given (config, seed); the dataset is
regenerated in-process from the config rather than read from a flag, and
reports embed the fully resolved configuration.

Exit codes: 0 success, 1 check/runtime failure, 2 usage or config error,
3 missing artifact (e.g. eval without a checkpoint).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import VARIANTS, Config, ConfigError, load_config
from .episodes import SynthSpec, export_dataset, generate_dataset, make_strict_split
from .evaluation import (ablation_suite, repeated_eval, worker_count,
                         write_ablation_csv, write_report)
from .gradcheck import run_gradcheck
from .tensors import FormatError, Rng
from .training import (TrainingDivergedError, finetune_target, load_checkpoint,
                       save_checkpoint, train_source)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING = 3


class MissingArtifactError(RuntimeError):
    """A required input artifact (checkpoint, config file) does not exist."""


# ------------------------------------------------------------------ plumbing


def _resolve_config(args: argparse.Namespace) -> Config:
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifactError(f"config file not found: {path}")
        config = load_config(path)
    else:
        config = Config()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.k is not None:
        overrides["k_shot"] = args.k
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.repeats is not None:
        overrides["eval_repeats"] = args.repeats
    if overrides:
        config = config.replace(**overrides)
    try:
        worker_count()
    except ValueError as exc:  # garbage FSSTI_THREADS is a usage problem
        raise ConfigError(str(exc)) from exc
    return config


def _dataset(config: Config):
    return generate_dataset(SynthSpec(
        seed=config.seed,
        image_size=config.image_size,
        images_per_category=config.images_per_category,
    ))


def _load_required_checkpoint(args: argparse.Namespace):
    if args.checkpoint is None:
        raise MissingArtifactError(
            f"'{args.command}' needs --checkpoint pointing at a trained model")
    path = Path(args.checkpoint)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _out(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out) if args.out is not None else Path(default)


# ------------------------------------------------------------------ commands


def cmd_synth(args: argparse.Namespace, config: Config) -> int:
    directory = _out(args, "dataset")
    export_dataset(_dataset(config), directory)
    print(directory / "manifest.json")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: Config) -> int:
    result = train_source(_dataset(config), config)
    path = _out(args, "checkpoint.fsti")
    save_checkpoint(result.checkpoint, path)
    final = result.losses[-1]["total"] if result.losses else float("nan")
    print(f"{path} (final source loss {final:.6f})")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace, config: Config) -> int:
    checkpoint = _load_required_checkpoint(args)
    pool, _ = make_strict_split(_dataset(config), config.k_shot,
                                Rng(config.seed).child("split"))
    result = finetune_target(checkpoint, pool, config)
    path = _out(args, "finetuned.fsti")
    save_checkpoint(result.checkpoint, path)
    final = result.losses[-1]["total"] if result.losses else float("nan")
    print(f"{path} (final finetune loss {final:.6f})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: Config) -> int:
    checkpoint = _load_required_checkpoint(args)
    report = repeated_eval(checkpoint, _dataset(config), config)
    path = _out(args, "report.json")
    write_report(report, path)
    print(f"{path} mean mIoU {report.mean:.4f} std {report.std:.4f} "
          f"over {len(report.seeds)} runs")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: Config) -> int:
    variants = [args.variant] if args.variant is not None else None
    include_source_only = args.variant in (None, "full")
    rows = ablation_suite(_dataset(config), config, variants=variants,
                          include_source_only=include_source_only)
    path = _out(args, "ablation.csv")
    write_ablation_csv(rows, path)
    for row in rows:
        print(f"{row.label:14s} mean={row.mean:.4f} std={row.std:.4f}")
    print(path)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: Config) -> int:
    results = run_gradcheck(seed=config.seed, sabotage=args.sabotage)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.suite:18s} {r.name:24s} max rel err {r.rel_err:.3e} "
              f"(threshold {r.threshold:.0e}) {status}")
    failures = [r for r in results if not r.passed]
    if failures:
        worst = max(failures, key=lambda r: r.rel_err / r.threshold)
        print(f"gradient check failed: {worst.name} in suite {worst.suite} "
              f"({worst.rel_err:.3e} > {worst.threshold:.0e})", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------- entry point


_COMMANDS = {
    "synth": (cmd_synth, "generate and export the synthetic dataset"),
    "train": (cmd_train, "train on the source domain, write a checkpoint"),
    "finetune": (cmd_finetune, "adapt a checkpoint on the target pool"),
    "eval": (cmd_eval, "repeated evaluation protocol, write a report"),
    "ablate": (cmd_ablate, "run labelled variants, write the ablation table"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient verification"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsstis",
        description="cross-domain few-shot segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (flat Config keys)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--k", type=int, help="supports per category (K-shot)")
        p.add_argument("--checkpoint", help="input checkpoint path")
        p.add_argument("--out", help="output path (command-specific default)")
        p.add_argument("--variant", choices=VARIANTS,
                       help="pipeline variant to run")
        p.add_argument("--repeats", type=int, help="evaluation repeats")
        if name == "gradcheck":
            p.add_argument("--sabotage", action="store_true",
                           help=argparse.SUPPRESS)
        p.set_defaults(func=func, sabotage=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage error, 0 on --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        config = _resolve_config(args)
        return args.func(args, config)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FormatError, TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    raise SystemExit(main())
