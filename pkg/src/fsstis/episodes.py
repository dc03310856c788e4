"""Synthetic cross-domain dataset, episodic sampling, and the strict K-shot split.

Each image contains one analytic foreground shape (disk, square, triangle,
ring, cross, bar) over a smooth textured background. Source images use shape
categories 0-2, target images 3-5, and the two domains are rendered with
deliberately different styles along three knobs: a per-channel color affine,
a boost of the lowest 25% of DFT amplitude frequencies, and additive noise.
Masks come from the analytic shape, so they are exact.

Image ids follow "<domain>_cat<k>_<idx>"; every read goes through
`Dataset.fetch`, which records (purpose, id) so tests can audit which samples
each pipeline phase touched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fewshot import downsample_mask
from .tensors import (
    BinaryMask,
    FeatureMap,
    Rng,
    read_feature_file,
    read_mask_file,
    write_feature_file,
    write_mask_file,
)

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross", "bar")
SOURCE_CATEGORIES = (0, 1, 2)
TARGET_CATEGORIES = (3, 4, 5)

FG_FRACTION_MIN = 0.05
FG_FRACTION_MAX = 0.6
_MAX_PAINT_ATTEMPTS = 200

# Fixed per-category foreground palette: every image of a category shares a
# base color (plus per-image jitter), so a category's few designated supports
# are genuinely informative about its other images.
CATEGORY_COLORS = {
    0: (0.85, 0.25, 0.25),
    1: (0.25, 0.80, 0.30),
    2: (0.25, 0.35, 0.85),
    3: (0.85, 0.75, 0.25),
    4: (0.80, 0.30, 0.80),
    5: (0.25, 0.80, 0.80),
}


@dataclass(frozen=True)
class DomainStyle:
    """The three style knobs that separate the two domains."""

    gain: tuple[float, float, float]
    bias: tuple[float, float, float]
    low_freq_boost: float
    noise_level: float


SOURCE_STYLE = DomainStyle(gain=(1.0, 1.0, 1.0), bias=(0.0, 0.0, 0.0),
                           low_freq_boost=1.0, noise_level=0.01)
TARGET_STYLE = DomainStyle(gain=(0.50, 0.90, 0.55), bias=(0.40, -0.25, -0.18),
                           low_freq_boost=3.5, noise_level=0.08)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic two-domain dataset."""

    seed: int
    image_size: int = 64
    images_per_category: int = 40
    source_style: DomainStyle = SOURCE_STYLE
    target_style: DomainStyle = TARGET_STYLE

    def __post_init__(self):
        if self.image_size % 8 or self.image_size < 32:
            raise ValueError("image_size must be >= 32 and divisible by 8")
        if self.images_per_category < 2:
            raise ValueError("need at least 2 images per category")
        s, t = self.source_style, self.target_style
        if (s.gain, s.bias) == (t.gain, t.bias):
            raise ValueError("domain styles must differ in the color affine")
        if s.low_freq_boost == t.low_freq_boost:
            raise ValueError("domain styles must differ in the low-frequency boost")
        if s.noise_level == t.noise_level:
            raise ValueError("domain styles must differ in the noise level")


# ------------------------------------------------------------ shape painters


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size]
    return ys.astype(np.float64), xs.astype(np.float64)


def _paint_disk(size, cy, cx, r):
    ys, xs = _grid(size)
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r


def _paint_square(size, cy, cx, r):
    ys, xs = _grid(size)
    return (np.abs(ys - cy) <= r) & (np.abs(xs - cx) <= r)


def _paint_triangle(size, cy, cx, r):
    ys, xs = _grid(size)
    inside_rows = (ys >= cy - r) & (ys <= cy + r)
    return inside_rows & (np.abs(xs - cx) <= (ys - (cy - r)) / 2.0)


def _paint_ring(size, cy, cx, r):
    ys, xs = _grid(size)
    d2 = (ys - cy) ** 2 + (xs - cx) ** 2
    return ((0.55 * r) ** 2 <= d2) & (d2 <= r * r)


def _paint_cross(size, cy, cx, r):
    ys, xs = _grid(size)
    w = max(3.0, r / 3.0)
    horiz = (np.abs(ys - cy) <= w) & (np.abs(xs - cx) <= r)
    vert = (np.abs(xs - cx) <= w) & (np.abs(ys - cy) <= r)
    return horiz | vert


def _paint_bar(size, cy, cx, r):
    ys, xs = _grid(size)
    w = max(4.0, r / 4.0)
    return (np.abs(ys - cy) <= w) & (np.abs(xs - cx) <= r)


_PAINTERS = (_paint_disk, _paint_square, _paint_triangle, _paint_ring,
             _paint_cross, _paint_bar)
# half-extent ranges at image size 64, scaled linearly for other sizes
_SCALE_RANGES = ((11, 24), (9, 21), (14, 26), (14, 26), (13, 26), (16, 30))


def _paint_category(category: int, size: int, rng: Rng) -> np.ndarray:
    painter = _PAINTERS[category]
    lo, hi = (v * size / 64.0 for v in _SCALE_RANGES[category])
    total = size * size
    for _ in range(_MAX_PAINT_ATTEMPTS):
        r = lo + (hi - lo) * float(rng.uniform())
        margin = r + 2.0
        if 2 * margin >= size:
            continue
        cy = margin + (size - 2 * margin) * float(rng.uniform())
        cx = margin + (size - 2 * margin) * float(rng.uniform())
        mask = painter(size, cy, cx, r).astype(np.uint8)
        frac = mask.sum() / total
        if not (FG_FRACTION_MIN <= frac <= FG_FRACTION_MAX):
            continue
        down = downsample_mask(mask, 8)
        if down.sum() == 0 or down.sum() == down.size:
            continue
        return mask
    raise RuntimeError(f"could not place a valid {SHAPE_NAMES[category]} shape")


# ------------------------------------------------------------- image styling


def _smooth_field(size: int, rng: Rng) -> np.ndarray:
    """A unit-variance low-frequency random field."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    mask = np.sqrt(fy * fy + fx * fx) <= 0.1
    n = int(mask.sum())
    re = rng.normal(size=n)
    im = rng.normal(size=n)
    spectrum = np.zeros((size, size), dtype=np.complex128)
    spectrum[mask] = re + 1j * im
    fld = np.fft.ifft2(spectrum).real
    return fld / max(fld.std(), 1e-12)


def _low_frequency_radial_mask(size: int) -> np.ndarray:
    """Lowest 25% of frequencies by radial magnitude, excluding the DC bin.

    The DC coefficient is the channel mean; boosting it would fight the color
    affine knob instead of adding low-frequency structure.
    """
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radial = np.sqrt(fy * fy + fx * fx)
    return (radial <= np.quantile(radial.ravel(), 0.25)) & (radial > 0)


def _apply_style(img: np.ndarray, style: DomainStyle, rng: Rng) -> np.ndarray:
    gain = np.asarray(style.gain)[:, None, None]
    bias = np.asarray(style.bias)[:, None, None]
    out = gain * img + bias
    low = _low_frequency_radial_mask(img.shape[1])
    for c in range(out.shape[0]):
        spectrum = np.fft.fft2(out[c])
        spectrum[low] *= style.low_freq_boost
        out[c] = np.fft.ifft2(spectrum).real
    out = out + style.noise_level * rng.normal(size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_dataset(spec: SynthSpec) -> "Dataset":
    samples: dict[str, Sample] = {}
    root = Rng(spec.seed)
    for category in SOURCE_CATEGORIES + TARGET_CATEGORIES:
        domain = "source" if category in SOURCE_CATEGORIES else "target"
        style = spec.source_style if domain == "source" else spec.target_style
        for idx in range(spec.images_per_category):
            sample_id = f"{domain}_cat{category}_{idx}"
            rng = root.child(f"image:{sample_id}")
            mask = _paint_category(category, spec.image_size, rng.child("geometry"))
            crng = rng.child("colors")
            # Foreground color is category-linked (jittered around a fixed
            # palette entry), mirroring the within-category appearance
            # coherence of real segmentation targets; the background color is
            # drawn per image, pushed away from the foreground channel-wise.
            base = np.asarray(CATEGORY_COLORS[category])
            fg = np.clip(base + 0.07 * (2.0 * crng.uniform(size=3) - 1.0), 0.05, 0.95)
            delta = 0.25 + 0.2 * crng.uniform(size=3)
            away = np.where(fg > 0.5, -1.0, 1.0)
            bg = np.clip(fg + away * delta, 0.05, 0.95)
            trng = rng.child("texture")
            texture = np.stack(
                [_smooth_field(spec.image_size, trng) for _ in range(3)]
            )
            img = np.where(mask[None].astype(bool), fg[:, None, None], bg[:, None, None])
            img = img + 0.05 * texture
            img = _apply_style(img, style, rng.child("style-noise"))
            samples[sample_id] = Sample(
                sample_id=sample_id,
                domain=domain,
                category=category,
                image=img,
                mask=mask,
            )
    return Dataset(spec=spec, samples=samples)


# ------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class Sample:
    sample_id: str
    domain: str
    category: int
    image: np.ndarray  # (3, S, S) float64 in [0, 1]
    mask: np.ndarray   # (S, S) uint8


class Dataset:
    """Sample store with an access log keyed by fetch purpose."""

    def __init__(self, spec: SynthSpec | None, samples: dict[str, Sample]):
        self.spec = spec
        self._samples = dict(samples)
        self.access_log: list[tuple[str, str]] = []

    def __len__(self) -> int:
        return len(self._samples)

    def ids(self, domain: str | None = None, category: int | None = None) -> list[str]:
        out = []
        for sid in sorted(self._samples):
            s = self._samples[sid]
            if domain is not None and s.domain != domain:
                continue
            if category is not None and s.category != category:
                continue
            out.append(sid)
        return out

    def categories(self, domain: str) -> list[int]:
        return sorted({s.category for s in self._samples.values() if s.domain == domain})

    def category_of(self, sample_id: str) -> int:
        return self._samples[sample_id].category

    def fetch(self, sample_id: str, purpose: str) -> Sample:
        if sample_id not in self._samples:
            raise KeyError(f"unknown sample id {sample_id!r}")
        self.access_log.append((purpose, sample_id))
        return self._samples[sample_id]

    def reset_log(self) -> None:
        self.access_log = []


# ------------------------------------------------------------------ episodes


@dataclass(frozen=True)
class Episode:
    category: int
    domain: str
    support_ids: tuple[str, ...]
    query_id: str
    supports: tuple[tuple[np.ndarray, np.ndarray], ...]  # (image, mask) pairs
    query: tuple[np.ndarray, np.ndarray]


def sample_episode(dataset: Dataset, domain: str, category: int, k: int,
                   rng: Rng, purpose: str = "train") -> Episode:
    ids = dataset.ids(domain=domain, category=category)
    if len(ids) < k + 1:
        raise ValueError(
            f"category {category} in domain {domain!r} has {len(ids)} images; "
            f"need at least {k + 1}"
        )
    picks = rng.choice_without_replacement(len(ids), k + 1)
    chosen = [ids[int(i)] for i in picks]
    support_ids, query_id = chosen[:k], chosen[k]
    supports = tuple(
        (s.image, s.mask) for s in (dataset.fetch(i, purpose) for i in support_ids)
    )
    q = dataset.fetch(query_id, purpose)
    return Episode(
        category=category,
        domain=domain,
        support_ids=tuple(support_ids),
        query_id=query_id,
        supports=supports,
        query=(q.image, q.mask),
    )


@dataclass(frozen=True)
class PoolEntry:
    sample_id: str
    image: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class FinetunePool:
    """Exactly K designated support samples per novel category.

    The (image, mask) pairs are copied in at construction, so fine-tuning can
    run against the pool object alone and provably touch nothing else.
    """

    k: int
    entries: tuple[tuple[int, tuple[PoolEntry, ...]], ...]

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(e.sample_id for _, es in self.entries for e in es)

    def categories(self) -> list[int]:
        return [c for c, _ in self.entries]

    def ids_for(self, category: int) -> tuple[str, ...]:
        return tuple(e.sample_id for e in self.entries_for(category))

    def entries_for(self, category: int) -> tuple[PoolEntry, ...]:
        for c, es in self.entries:
            if c == category:
                return es
        raise KeyError(f"category {category} not in pool")


def make_strict_split(dataset: Dataset, k: int, rng: Rng) -> tuple[FinetunePool, list[str]]:
    """K pool supports per target category; everything else becomes test queries."""
    entries = []
    test_ids: list[str] = []
    for category in dataset.categories("target"):
        ids = dataset.ids(domain="target", category=category)
        if len(ids) <= k:
            raise ValueError(
                f"target category {category} has {len(ids)} images; need more than K={k}"
            )
        picks = set(int(i) for i in rng.choice_without_replacement(len(ids), k))
        pool = []
        for i in sorted(picks):
            s = dataset.fetch(ids[i], "finetune-pool")
            pool.append(PoolEntry(sample_id=s.sample_id, image=s.image, mask=s.mask))
        entries.append((category, tuple(pool)))
        test_ids.extend(ids[i] for i in range(len(ids)) if i not in picks)
    return FinetunePool(k=k, entries=tuple(entries)), test_ids


# ------------------------------------------------------------- export/import


def export_dataset(dataset: Dataset, directory, ids: list[str] | None = None) -> None:
    """Write images as feature files (C=3) plus masks and a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for sid in ids if ids is not None else dataset.ids():
        sample = dataset.fetch(sid, "export")
        fpath, mpath = f"{sid}.ftns", f"{sid}.fmsk"
        write_feature_file(FeatureMap(sample.image), directory / fpath)
        write_mask_file(BinaryMask(sample.mask), directory / mpath)
        manifest.append({"id": sid, "feature_path": fpath, "mask_path": mpath})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1),
                                             encoding="utf-8")


def parse_sample_id(sample_id: str) -> tuple[str, int]:
    """Split "<domain>_cat<k>_<idx>" into (domain, category)."""
    head = sample_id.rsplit("_", 1)[0]
    domain, _, cat = head.rpartition("_")
    if not domain or not cat.startswith("cat"):
        raise ValueError(f"cannot parse sample id {sample_id!r}")
    return domain, int(cat[3:])


def load_dataset(directory) -> Dataset:
    """Rebuild a Dataset from an exported directory (manifest + feature/mask files)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    samples = {}
    for entry in manifest:
        sid = entry["id"]
        domain, category = parse_sample_id(sid)
        feature = read_feature_file(directory / entry["feature_path"])
        mask = read_mask_file(directory / entry["mask_path"])
        samples[sid] = Sample(
            sample_id=sid,
            domain=domain,
            category=category,
            image=feature.values,
            mask=mask.values,
        )
    return Dataset(spec=None, samples=samples)
