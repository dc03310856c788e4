"""Command-line wrapper: one export job per invocation."""

from __future__ import annotations

import argparse
import sys

from .backbones import BackboneError, available
from .export import ExportError, ExportJob, export
from .formats import FormatError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fssexport",
        description="export backbone features of an image/mask directory "
                    "pair as FTNS/FMSK files plus a JSON manifest")
    parser.add_argument("--images", required=True, help="image directory")
    parser.add_argument("--masks", required=True, help="binary mask directory")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--backbone", default="resnet50", choices=available())
    parser.add_argument("--layer", default="layer3",
                        help="stage to tap (default layer3: 1024 channels)")
    parser.add_argument("--weights", default="auto",
                        choices=("auto", "pretrained", "seeded"))
    parser.add_argument("--seed", type=int, default=0,
                        help="init seed when weights are not pretrained")
    parser.add_argument("--workers", type=int, default=1)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    job = ExportJob(image_dir=args.images, mask_dir=args.masks,
                    output_dir=args.out, backbone=args.backbone,
                    layer=args.layer, weights=args.weights, seed=args.seed,
                    workers=args.workers)
    try:
        print(export(job))
    except (ExportError, BackboneError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
