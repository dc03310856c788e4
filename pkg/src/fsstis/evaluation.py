"""Segmentation metrics, the repeated evaluation protocol, the ablation
harness, and the PCA feature-space CSV export.

The evaluation contract is strict about data access: fine-tuning sees only the
designated support pool, and test queries are fetched exclusively through the
dataset's logged `fetch` API, so every report can carry a machine-checked
audit of what was read and why.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import VARIANTS, Config
from .episodes import (
    Dataset,
    DomainStyle,
    FinetunePool,
    SynthSpec,
    make_strict_split,
)
from .fewshot import downsample_mask, match_query
from .autodiff import Tensor
from .tensors import Rng
from .training import (
    Checkpoint,
    _variant_pieces,
    apply_checkpoint,
    build_model,
    finetune_target,
    train_source,
)
from .ttis import TtisMode, transform

# Purposes a repeated evaluation run is allowed to fetch samples under.
SPLIT_PURPOSE = "finetune-pool"
QUERY_PURPOSE = "eval-query"

# ---------------------------------------------------------------- benchmark
#
# The pinned desk-scale benchmark: a fixed dataset recipe plus a fixed
# training configuration, calibrated so that the component-removal orderings
# are measurable within a laptop-CPU time budget.  The benchmark's target
# style is deliberately harsher than the generator default: its channel-2
# shift saturates against the [0, 1] clip, which is exactly the kind of
# distortion the spectral path handles better than the raw-feature path.

BENCHMARK_TARGET_STYLE = DomainStyle(
    gain=(0.50, 0.90, 0.55),
    bias=(0.40, -0.25, 0.35),
    low_freq_boost=3.5,
    noise_level=0.08,
)


def benchmark_spec(seed: int = 0) -> SynthSpec:
    return SynthSpec(seed=seed, image_size=64, images_per_category=20,
                     target_style=BENCHMARK_TARGET_STYLE)


def benchmark_config(**overrides) -> Config:
    base = dict(
        seed=0,
        image_size=64,
        channels=32,
        k_shot=1,
        iterations_source=1600,
        iterations_finetune=100,
        eval_repeats=20,
        images_per_category=20,
        absolute_regularizer=True,
    )
    base.update(overrides)
    return Config(**base)


def benchmark_seeds(config: Config) -> list[int]:
    return [101 + j for j in range(config.eval_repeats)]


# ------------------------------------------------------------------- metric


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Both masks empty counts as a perfect match (1.0): an all-background
    prediction on an all-background ground truth is correct.
    """
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(p & g))
    return inter / union


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class EvalReport:
    """One evaluation pass: per-category foreground IoU and their mean."""

    seed: int
    k: int
    pool_ids: tuple[str, ...]
    query_ids: tuple[str, ...]
    per_category: dict[int, float]
    miou: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "k": self.k,
            "miou": self.miou,
            "per_category": {str(c): v for c, v in sorted(self.per_category.items())},
            "pool_ids": list(self.pool_ids),
        }


@dataclass(frozen=True)
class RepeatedReport:
    """Aggregate over per-seed evaluation runs (mean and std of mIoU)."""

    seeds: tuple[int, ...]
    runs: tuple[EvalReport, ...]
    mean: float
    std: float
    per_category: dict[int, float]
    config: dict
    audit: dict | None = None

    def to_json_dict(self) -> dict:
        out = {
            "seeds": list(self.seeds),
            "per_run_miou": [r.miou for r in self.runs],
            "mean": self.mean,
            "std": self.std,
            "per_category": {str(c): v for c, v in sorted(self.per_category.items())},
            "config": dict(self.config),
            "runs": [r.to_dict() for r in self.runs],
        }
        if self.audit is not None:
            out["audit"] = self.audit
        return out


def write_report(report: RepeatedReport | dict, path) -> None:
    payload = report.to_json_dict() if isinstance(report, RepeatedReport) else report
    text = json.dumps(payload, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ----------------------------------------------------------------- evaluate


def evaluate(checkpoint: Checkpoint, pool: FinetunePool, test_ids: Sequence[str],
             dataset: Dataset, config: Config, *, seed: int | None = None) -> EvalReport:
    """Score a checkpoint on the test queries against pool supports only.

    Per category: foreground IoU averaged over that category's queries; the
    report mIoU is the mean of those per-category scores.  The feature
    transform runs in its clean evaluation mode (no perturbation draws), and
    supports come exclusively from the pool's stored copies.
    """
    test_ids = [str(t) for t in test_ids]
    if not test_ids:
        raise ValueError("empty test set")
    overlap = pool.ids & set(test_ids)
    if overlap:
        raise ValueError(
            f"test set overlaps the fine-tune pool: {sorted(overlap)[:3]}"
        )

    model = build_model(config)
    apply_checkpoint(model, checkpoint)
    tv = _variant_pieces(config.variant)[0]

    def clean(feature: Tensor) -> Tensor:
        return transform(feature, model.params, model.grid,
                         TtisMode.EVAL_CLEAN, None, tv)

    support_feats: dict[int, list[Tensor]] = {}
    support_masks: dict[int, list[np.ndarray]] = {}
    factor = None
    for category in pool.categories():
        feats, masks = [], []
        for entry in pool.entries_for(category):
            f = clean(model.backbone.extract(entry.image))
            if factor is None:
                factor = entry.mask.shape[-1] // f.data.shape[-1]
            feats.append(f)
            masks.append(downsample_mask(entry.mask, factor))
        support_feats[category] = feats
        support_masks[category] = masks

    scores: dict[int, list[float]] = {c: [] for c in pool.categories()}
    for tid in test_ids:
        sample = dataset.fetch(tid, QUERY_PURPOSE)
        if sample.category not in support_feats:
            raise ValueError(
                f"test sample {tid!r} has category {sample.category}, "
                f"which has no supports in the pool"
            )
        f_q = clean(model.backbone.extract(sample.image))
        match = match_query(support_feats[sample.category],
                            support_masks[sample.category],
                            f_q, config.alpha1, config.alpha2)
        gt = downsample_mask(sample.mask, factor)
        scores[sample.category].append(iou(match.mask, gt))

    per_category = {c: float(np.mean(vals)) for c, vals in scores.items() if vals}
    if not per_category:
        raise ValueError("no test queries matched any pool category")
    miou = float(np.mean(list(per_category.values())))
    return EvalReport(
        seed=config.seed if seed is None else int(seed),
        k=pool.k,
        pool_ids=tuple(sorted(pool.ids)),
        query_ids=tuple(test_ids),
        per_category=per_category,
        miou=miou,
    )


# -------------------------------------------------------------- repeat runs


def worker_count() -> int:
    """Worker cap from FSSTI_THREADS; unset or empty means sequential."""
    raw = os.environ.get("FSSTI_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"FSSTI_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def audit_access(log: Sequence[tuple[str, str]],
                 runs: Sequence[EvalReport]) -> dict:
    """Check a dataset access log slice against what the runs should read.

    Legitimate fetches during a repeated evaluation are exactly: each run's
    pool images once at split time, and each run's test queries once at
    evaluation time.  Anything else — an unexpected purpose (e.g. a fetch
    issued during fine-tuning), a pool image fetched as a query, or a
    mismatch between logged and reported fetch multisets — is a violation.
    """
    pool_fetches = sorted(sid for p, sid in log if p == SPLIT_PURPOSE)
    query_fetches = sorted(sid for p, sid in log if p == QUERY_PURPOSE)
    other_purposes = sorted({p for p, _ in log
                             if p not in (SPLIT_PURPOSE, QUERY_PURPOSE)})

    expected_pool = sorted(sid for r in runs for sid in r.pool_ids)
    expected_query = sorted(sid for r in runs for sid in r.query_ids)
    pool_as_query = sum(
        1 for r in runs for sid in r.query_ids if sid in set(r.pool_ids)
    )
    pool_mismatch = pool_fetches != expected_pool
    query_mismatch = query_fetches != expected_query

    violations = (len(other_purposes) + pool_as_query
                  + int(pool_mismatch) + int(query_mismatch))
    return {
        "checked_fetches": len(log),
        "non_protocol_purposes": other_purposes,
        "pool_images_as_queries": pool_as_query,
        "pool_fetch_mismatch": pool_mismatch,
        "query_fetch_mismatch": query_mismatch,
        "violations": violations,
    }


def repeated_eval(checkpoint: Checkpoint, dataset: Dataset, config: Config,
                  seeds: Sequence[int] | None = None, *,
                  finetune: bool = True,
                  sample_std: bool = True) -> RepeatedReport:
    """Run split -> fine-tune -> evaluate once per seed and aggregate.

    Each seed owns its RNG stream (split, fine-tune schedule, perturbations),
    so runs are independent and can execute in parallel; results are always
    aggregated in seed order.  `finetune=False` scores the given checkpoint
    directly on each seed's split (the source-only protocol).
    """
    if seeds is None:
        seeds = [config.seed + j for j in range(config.eval_repeats)]
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one evaluation seed")

    log_mark = len(dataset.access_log)

    def _run(seed: int) -> EvalReport:
        pool, test_ids = make_strict_split(dataset, config.k_shot,
                                           Rng(seed).child("split"))
        run_cfg = config.replace(seed=seed)
        ckpt = checkpoint
        if finetune:
            ckpt = finetune_target(checkpoint, pool, run_cfg).checkpoint
        return evaluate(ckpt, pool, test_ids, dataset, run_cfg, seed=seed)

    workers = worker_count()
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            runs = list(pool_exec.map(_run, seeds))
    else:
        runs = [_run(s) for s in seeds]

    audit = audit_access(dataset.access_log[log_mark:], runs)
    return aggregate_runs(runs, config, sample_std=sample_std, audit=audit)


def aggregate_runs(runs: Sequence[EvalReport], config: Config, *,
                   sample_std: bool = True,
                   audit: dict | None = None) -> RepeatedReport:
    """Mean/std over the per-run mIoUs plus per-category averages."""
    if not runs:
        raise ValueError("no runs to aggregate")
    mious = [r.miou for r in runs]
    mean = float(np.mean(mious))
    if len(set(mious)) == 1:
        std = 0.0
    elif sample_std and len(mious) > 1:
        std = float(np.std(mious, ddof=1))
    else:
        std = float(np.std(mious))
    categories = sorted({c for r in runs for c in r.per_category})
    per_category = {
        c: float(np.mean([r.per_category[c] for r in runs if c in r.per_category]))
        for c in categories
    }
    return RepeatedReport(
        seeds=tuple(r.seed for r in runs),
        runs=tuple(runs),
        mean=mean,
        std=std,
        per_category=per_category,
        config=config.to_dict(),
        audit=audit,
    )


# ----------------------------------------------------------------- ablation


ABLATION_LABELS = {
    "full": "FSS-TIs",
    "no-ode": "FSS-TIs-ODE",
    "no-fft": "FSS-TIs-FFT",
    "no-rsp": "FSS-TIs-RSP",
    "no-reg": "FSS-TIs-LR",
    "no-dsloss": "FSS-TIs-Lds",
}
SOURCE_ONLY_LABEL = "FSS-TIs-SO"


@dataclass(frozen=True)
class AblationRow:
    label: str
    variant: str
    finetuned: bool
    report: RepeatedReport

    @property
    def mean(self) -> float:
        return self.report.mean

    @property
    def std(self) -> float:
        return self.report.std

    @property
    def per_run(self) -> tuple[float, ...]:
        return tuple(r.miou for r in self.report.runs)


def ablation_suite(dataset: Dataset, config: Config,
                   seeds: Sequence[int] | None = None,
                   variants: Sequence[str] | None = None,
                   include_source_only: bool = True) -> list[AblationRow]:
    """Train and repeatedly evaluate every variant on the same seeds.

    Seeds are shared across rows, so the per-seed splits are identical and
    the comparison is paired.  The source-only row scores the full variant's
    source checkpoint without fine-tuning.
    """
    if variants is None:
        variants = list(VARIANTS)
    if seeds is None:
        seeds = [config.seed + j for j in range(config.eval_repeats)]
    seeds = [int(s) for s in seeds]

    rows: list[AblationRow] = []
    for variant in variants:
        if variant not in ABLATION_LABELS:
            raise ValueError(f"unknown ablation variant {variant!r}")
        cfg = config.replace(variant=variant)
        ckpt = train_source(dataset, cfg).checkpoint
        report = repeated_eval(ckpt, dataset, cfg, seeds=seeds)
        rows.append(AblationRow(label=ABLATION_LABELS[variant], variant=variant,
                                finetuned=True, report=report))
        if variant == "full" and include_source_only:
            report_so = repeated_eval(ckpt, dataset, cfg, seeds=seeds,
                                      finetune=False)
            rows.append(AblationRow(label=SOURCE_ONLY_LABEL, variant=variant,
                                    finetuned=False, report=report_so))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    if not rows:
        raise ValueError("no ablation rows to write")
    n_runs = max(len(row.per_run) for row in rows)
    header = ["label", "variant", "finetuned", "mean", "std"]
    header += [f"run{i + 1}" for i in range(n_runs)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            record = [row.label, row.variant, str(row.finetuned).lower(),
                      row.mean, row.std]
            record += list(row.per_run)
            writer.writerow(record)


def ablation_rows_to_dict(rows: Sequence[AblationRow]) -> dict:
    return {
        "rows": [
            {
                "label": row.label,
                "variant": row.variant,
                "finetuned": row.finetuned,
                "report": row.report.to_json_dict(),
            }
            for row in rows
        ]
    }


# ---------------------------------------------------------------- PCA export


def feature_mean_vector(feature) -> np.ndarray:
    """Spatial mean of a (C, h, w) feature map: one C-vector per image."""
    arr = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, h, w) feature map, got shape {arr.shape}")
    return arr.mean(axis=(1, 2))


def _project_out(v: np.ndarray, basis: Sequence[np.ndarray]) -> np.ndarray:
    for b in basis:
        v = v - float(v @ b) * b
    return v


def _power_iteration(mat: np.ndarray, orthogonal_to: Sequence[np.ndarray] = (),
                     tol: float = 1e-9, max_iter: int = 10_000):
    """Dominant eigenpair of a symmetric PSD matrix on the subspace
    orthogonal to the given unit vectors.

    The start vector is deterministic: the matrix column with the largest
    norm after deflation (it always carries a component of the dominant
    remaining eigenvector), falling back to standard basis vectors when the
    deflated matrix is numerically zero (eigenvalue 0; any remaining
    direction is valid).
    """
    basis = [np.asarray(b, dtype=np.float64) for b in orthogonal_to]
    c = mat.shape[0]
    candidates = [_project_out(mat[:, j].astype(np.float64), basis)
                  for j in range(c)]
    norms = [float(np.linalg.norm(v)) for v in candidates]
    best = int(np.argmax(norms))
    if norms[best] <= 1e-12:
        for i in range(c):
            e = np.zeros(c)
            e[i] = 1.0
            e = _project_out(e, basis)
            ne = float(np.linalg.norm(e))
            if ne > 1e-12:
                return e / ne, 0.0
        raise ValueError("no direction remains after deflation")

    v = candidates[best] / norms[best]
    for _ in range(max_iter):
        w = _project_out(mat @ v, basis)
        nw = float(np.linalg.norm(w))
        if nw <= 1e-300:
            break
        w = w / nw
        if float(w @ v) < 0.0:
            w = -w
        converged = float(np.linalg.norm(w - v)) <= tol
        v = w
        if converged:
            break
    lam = float(v @ (mat @ v))
    return v, lam


def pca_top2(vectors) -> tuple[np.ndarray, np.ndarray]:
    """Top-2 principal directions and coordinates of row vectors.

    Returns (coords of shape (n, 2), directions of shape (2, c)).
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a matrix of row vectors, got shape {x.shape}")
    n, c = x.shape
    if n < 3:
        raise ValueError(f"need at least 3 vectors, got {n}")
    if c < 2:
        raise ValueError(f"need at least 2 dimensions, got {c}")
    centered = x - x.mean(axis=0)
    if not np.any(np.abs(centered) > 0.0):
        raise ValueError("rank-0 data: all vectors are identical")
    cov = (centered.T @ centered) / (n - 1)
    v1, _ = _power_iteration(cov)
    v2, _ = _power_iteration(cov, orthogonal_to=[v1])
    coords = np.stack([centered @ v1, centered @ v2], axis=1)
    return coords, np.stack([v1, v2])


def pca_export(vectors, labels: Sequence[str], path) -> np.ndarray:
    """Write "label,pc1,pc2" CSV rows of the top-2 PCA projection."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = [str(s) for s in labels]
    if x.ndim == 2 and len(labels) != x.shape[0]:
        raise ValueError(f"{len(labels)} labels for {x.shape[0]} vectors")
    coords, _ = pca_top2(x)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "pc1", "pc2"])
        for label, (a, b) in zip(labels, coords):
            writer.writerow([label, float(a), float(b)])
    return coords
