#!/usr/bin/env python3
"""Project per-image feature means to 2-D, before and after the transform.

For every image in both domains, the backbone feature's channel-mean vector
is collected twice — raw, and after the spectral-ODE transform with trained
parameters — then projected onto the top two principal axes and written as a
labelled CSV (label,pc1,pc2). The printed centroid distances show how much
the transform shrinks the source/target gap.
"""

import argparse
from pathlib import Path

import numpy as np

from fsstis.episodes import generate_dataset
from fsstis.evaluation import (benchmark_config, benchmark_spec,
                               feature_mean_vector, pca_export)
from fsstis.training import (apply_checkpoint, build_model, load_checkpoint,
                             train_source)
from fsstis.ttis import TtisMode, transform


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint",
                        help="trained checkpoint (trains one when omitted)")
    parser.add_argument("--out", default="feature_space.csv", help="CSV path")
    parser.add_argument("--quick", action="store_true",
                        help="tiny settings for a fast smoke run")
    args = parser.parse_args()

    config = benchmark_config()
    if args.quick:
        config = config.replace(channels=8, iterations_source=50,
                                images_per_category=6)
    dataset = generate_dataset(benchmark_spec(config.seed))

    model = build_model(config)
    if args.checkpoint:
        apply_checkpoint(model, load_checkpoint(args.checkpoint))
    else:
        print("no --checkpoint given; training the source model first")
        apply_checkpoint(model, train_source(dataset, config).checkpoint)

    vectors, labels = [], []
    for domain in ("source", "target"):
        for sid in dataset.ids(domain=domain):
            feature = model.backbone.extract(
                dataset.fetch(sid, "analysis").image).data
            moved = transform(feature, model.params, model.grid,
                              TtisMode.EVAL_CLEAN, None)
            vectors.append(feature_mean_vector(feature))
            labels.append(f"{domain}/pre")
            vectors.append(feature_mean_vector(moved))
            labels.append(f"{domain}/post")

    coords = pca_export(np.asarray(vectors), labels, Path(args.out))

    def centroid(tag: str) -> np.ndarray:
        rows = [c for c, l in zip(coords, labels) if l == tag]
        return np.mean(rows, axis=0)

    gap_pre = float(np.linalg.norm(centroid("source/pre") - centroid("target/pre")))
    gap_post = float(np.linalg.norm(centroid("source/post") - centroid("target/post")))
    print(f"{Path(args.out)} written ({len(labels)} points)")
    print(f"domain-centroid distance in PC space: pre {gap_pre:.4f} -> "
          f"post {gap_post:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
