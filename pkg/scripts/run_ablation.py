#!/usr/bin/env python3
"""Run the labelled variant table on the benchmark and print the margins.

Produces the ablation CSV plus a summary of each variant's mean/std mIoU and
the full-pipeline margins over the reduced variants and the source-only
baseline.
"""

import argparse
import time
from pathlib import Path

from fsstis.episodes import generate_dataset
from fsstis.evaluation import (ablation_suite, benchmark_config,
                               benchmark_seeds, benchmark_spec,
                               write_ablation_csv)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="ablation.csv", help="CSV path")
    parser.add_argument("--variants", nargs="*",
                        default=["full", "no-ode", "no-fft", "no-rsp"],
                        help="variants to run (full is required for margins)")
    parser.add_argument("--quick", action="store_true",
                        help="tiny settings for a fast smoke run")
    args = parser.parse_args()

    config = benchmark_config()
    if args.quick:
        config = config.replace(channels=8, iterations_source=50,
                                iterations_finetune=20, eval_repeats=3,
                                images_per_category=6)

    start = time.time()
    dataset = generate_dataset(benchmark_spec(config.seed))
    rows = ablation_suite(dataset, config, seeds=benchmark_seeds(config),
                          variants=args.variants, include_source_only=True)
    write_ablation_csv(rows, Path(args.out))

    by_label = {}
    for row in rows:
        by_label[row.label] = row.mean
        print(f"{row.label:14s} mean={row.mean:.4f} std={row.std:.4f}")
    full = by_label.get("FSS-TIs")
    if full is not None:
        for label, mean in by_label.items():
            if label != "FSS-TIs":
                print(f"FSS-TIs - {label}: {(full - mean) * 100:+.2f} points")
    print(f"{Path(args.out)} written ({time.time() - start:.0f}s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
