"""Run an export job: images + masks -> FTNS/FMSK files + manifest.

Per image, the backbone feature is written as FTNS and the paired binary
mask, downsampled to the feature grid, as FMSK. Unreadable or unpaired
inputs fail individually (the job continues and the summary lists them);
a feature-shape drift across images aborts the job naming the offender,
because a mixed-shape manifest is unusable downstream.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbones import IMAGENET_MEAN, IMAGENET_STD, build
from .formats import write_feature_file, write_mask_file

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


class ExportError(RuntimeError):
    """A job-level failure: nothing exportable, or inconsistent outputs."""


@dataclass(frozen=True)
class ExportJob:
    image_dir: Path
    mask_dir: Path
    output_dir: Path
    backbone: str = "resnet50"
    layer: str = "layer3"
    weights: str = "auto"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in ("image_dir", "mask_dir", "output_dir"):
            object.__setattr__(self, name, Path(getattr(self, name)))
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def _find_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_EXTENSIONS)


def _paired_mask(mask_dir: Path, stem: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        candidate = mask_dir / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no mask named {stem}.* in {mask_dir}")


def _load_image(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(IMAGENET_STD, dtype=np.float32)
    normalized = (rgb - mean) / std
    return torch.from_numpy(normalized.transpose(2, 0, 1)).unsqueeze(0)


def _load_binary_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        raw = np.asarray(img.convert("L"))
    values = set(np.unique(raw).tolist())
    if values <= {0, 1}:
        return raw.astype(np.uint8)
    if values <= {0, 255}:
        return (raw == 255).astype(np.uint8)
    raise ValueError(f"mask {path} is not binary (values {sorted(values)[:6]})")


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Reduce a full-resolution binary mask to the feature grid.

    Integer-factor grids use block means thresholded at 0.5; ragged ratios
    fall back to nearest-neighbor sampling at cell centers.
    """
    h, w = mask.shape
    gh, gw = grid
    if h % gh == 0 and w % gw == 0:
        blocks = mask.reshape(gh, h // gh, gw, w // gw).mean(axis=(1, 3))
        return (blocks >= 0.5).astype(np.uint8)
    rows = np.minimum(((np.arange(gh) + 0.5) * h / gh).astype(int), h - 1)
    cols = np.minimum(((np.arange(gw) + 0.5) * w / gw).astype(int), w - 1)
    return mask[np.ix_(rows, cols)].astype(np.uint8)


def export(job: ExportJob) -> Path:
    """Run the job; returns the manifest path."""
    images = _find_images(job.image_dir)
    if not images:
        raise ExportError(f"no images found in {job.image_dir}")
    extractor = build(job.backbone, job.layer, job.weights, job.seed)
    job.output_dir.mkdir(parents=True, exist_ok=True)

    def compute(path: Path):
        mask = _load_binary_mask(_paired_mask(job.mask_dir, path.stem))
        with torch.no_grad():
            feature = extractor(_load_image(path))[0].numpy().astype(np.float32)
        return feature, mask

    results: list[tuple[Path, object]] = []
    if job.workers > 1:
        with ThreadPoolExecutor(max_workers=job.workers) as pool:
            futures = [(p, pool.submit(compute, p)) for p in images]
            for path, future in futures:
                try:
                    results.append((path, future.result()))
                except Exception as exc:
                    results.append((path, exc))
    else:
        for path in images:
            try:
                results.append((path, compute(path)))
            except Exception as exc:
                results.append((path, exc))

    entries, failures = [], []
    reference: tuple | None = None
    reference_id = ""
    for path, outcome in results:
        if isinstance(outcome, Exception):
            failures.append((path.stem, f"{type(outcome).__name__}: {outcome}"))
            continue
        feature, mask = outcome
        if reference is None:
            reference, reference_id = feature.shape, path.stem
        elif feature.shape != reference:
            raise ExportError(
                f"feature shape drift: id {path.stem!r} produced "
                f"{feature.shape}, but id {reference_id!r} established "
                f"{reference}; aborting the job")
        grid_mask = downsample_mask(mask, feature.shape[1:])
        write_feature_file(feature, job.output_dir / f"{path.stem}.ftns")
        write_mask_file(grid_mask, job.output_dir / f"{path.stem}.fmsk")
        entries.append({"id": path.stem,
                        "feature_path": f"{path.stem}.ftns",
                        "mask_path": f"{path.stem}.fmsk"})

    if failures:
        print(f"fssexport: {len(failures)} of {len(results)} inputs failed:",
              file=sys.stderr)
        for name, reason in failures:
            print(f"  {name}: {reason}", file=sys.stderr)
    if not entries:
        raise ExportError("every input failed; nothing was exported")

    entries.sort(key=lambda e: e["id"])
    manifest_path = job.output_dir / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=1), encoding="utf-8")
    return manifest_path
