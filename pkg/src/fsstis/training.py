"""Loss stack, SGD-with-momentum, source training, and strict fine-tuning.

The total training objective is the sum of four terms:

  L_ds    cross-entropy of the query prediction built from the pre-transform
          (domain-specific) support prototypes;
  L_da_q  cross-entropy of both post-transform query predictions (the
          support-prototype-only one and the combined one);
  L_da_s  cross-entropy of each support image predicted from its own combined
          prototypes, summed over shots;
  L_R     the signed parameter regularizer
          det(M_amp) - 1 + det(M_phase) - 1 + mean(V_amp) + mean(V_phase).

The regularizer is implemented exactly as written (signed). Because the
signed form rewards det -> -inf, training asserts det(M) stays inside
[0.1, 10] and aborts with a diagnostic otherwise; a config flag switches to
the guarded |det-1| + |mean| alternative.

Fine-tuning touches only the FinetunePool object: supports come from the
pool and queries are synthesized from pool supports by random flip /
rotation / 2x2 grid-shuffle augmentation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import ConvBackbone, TrainScope
from .config import Config
from .episodes import Dataset, Episode, FinetunePool, sample_episode
from .fewshot import PredictionPair, downsample_mask, match_query
from .tensors import FORMAT_VERSION, FormatError, Rng, decode_feature, encode_feature
from .ttis import TimeGrid, TransformVariant, TtisMode, TtisParams, transform

CHECKPOINT_MAGIC = b"FSTI"
DET_GUARD_LOW = 0.1
DET_GUARD_HIGH = 10.0


class TrainingDivergedError(RuntimeError):
    """Raised when the signed regularizer drives det(M) out of safe range."""


# -------------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    l_ds: Tensor
    l_da_q: Tensor
    l_da_s: Tensor
    l_r: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "l_ds": float(self.l_ds.data),
            "l_da_q": float(self.l_da_q.data),
            "l_da_s": float(self.l_da_s.data),
            "l_r": float(self.l_r.data),
            "total": float(self.total.data),
        }


def bce_on_similarities(pair: PredictionPair, mask: np.ndarray, tau: float) -> Tensor:
    """Mean cross entropy of the two-way softmax over (tau*fg, tau*bg) scores.

    The two-way softmax reduces to sigmoid(tau * (fg - bg)), which makes the
    loss invariant to adding any constant to both similarity maps.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != pair.fg.shape:
        raise ValueError(f"mask {mask.shape} does not match prediction {pair.fg.shape}")
    p = ad.sigmoid((pair.fg - pair.bg) * tau)
    p = ad.clip(p, 1e-7, 1.0 - 1e-7)
    losses = -(ad.log(p) * mask + ad.log(1.0 - p) * (1.0 - mask))
    return ad.tmean(losses)


def _abs(t: Tensor) -> Tensor:
    return ad.relu(t) + ad.relu(-t)


def reg_loss(params: TtisParams, absolute: bool = False) -> Tensor:
    """det(M_a)-1 + det(M_p)-1 + mean(V_a) + mean(V_p), signed as written.

    `absolute=True` selects the guarded |det-1| + |mean| alternative, which
    is bounded below at the same zero point.
    """
    det_a = ad.det(params.m_amp) - 1.0
    det_p = ad.det(params.m_phase) - 1.0
    mean_a = ad.tmean(params.v_amp)
    mean_p = ad.tmean(params.v_phase)
    if absolute:
        return _abs(det_a) + _abs(det_p) + _abs(mean_a) + _abs(mean_p)
    return det_a + det_p + mean_a + mean_p


def _variant_pieces(variant: str) -> tuple[TransformVariant, TtisMode, bool, bool]:
    """Map a config variant string to (transform variant, train mode, gates)."""
    tv = TransformVariant.FULL
    mode = TtisMode.TRAIN_PERTURBED
    use_reg = True
    use_ds = True
    if variant == "no-ode":
        tv = TransformVariant.NO_ODE
    elif variant == "no-fft":
        tv = TransformVariant.NO_FFT
    elif variant == "no-rsp":
        mode = TtisMode.EVAL_CLEAN
    elif variant == "no-reg":
        use_reg = False
    elif variant == "no-dsloss":
        use_ds = False
    elif variant != "full":
        raise ValueError(f"unknown variant {variant!r}")
    return tv, mode, use_reg, use_ds


def source_loss(episode: Episode, backbone, params: TtisParams, grid: TimeGrid,
                rng: Rng | None, tau: float, alpha1: float, alpha2: float,
                variant: str = "full", absolute_reg: bool = False) -> LossBreakdown:
    """The four-term episodic training loss on one episode."""
    tv, mode, use_reg, use_ds = _variant_pieces(variant)

    f_supports = [backbone.extract(img) for img, _ in episode.supports]
    f_query = backbone.extract(episode.query[0])
    factor = episode.supports[0][1].shape[-1] // f_supports[0].shape[-1]
    support_masks = [downsample_mask(m, factor) for _, m in episode.supports]
    query_mask = downsample_mask(episode.query[1], factor)

    # domain-specific term: pre-transform features, support prototypes only
    if use_ds:
        ds_match = match_query(f_supports, support_masks, f_query, alpha1, alpha2)
        l_ds = bce_on_similarities(ds_match.support_pair, query_mask, tau)
    else:
        l_ds = ad.as_tensor(0.0)

    # domain-agnostic terms: transformed features (supports first, then query,
    # so the perturbation draws are reproducible)
    da_supports = [transform(f, params, grid, mode, rng, tv) for f in f_supports]
    da_query = transform(f_query, params, grid, mode, rng, tv)

    match = match_query(da_supports, support_masks, da_query, alpha1, alpha2)
    l_da_q = (bce_on_similarities(match.support_pair, query_mask, tau)
              + bce_on_similarities(match.combined_pair, query_mask, tau))

    l_da_s = ad.as_tensor(0.0)
    for k in range(len(da_supports)):
        self_match = match_query(da_supports, support_masks, da_supports[k],
                                 alpha1, alpha2)
        l_da_s = l_da_s + bce_on_similarities(self_match.combined_pair,
                                              support_masks[k], tau)

    l_r = reg_loss(params, absolute_reg) if use_reg else ad.as_tensor(0.0)
    total = l_ds + l_da_q + l_da_s + l_r
    return LossBreakdown(l_ds=l_ds, l_da_q=l_da_q, l_da_s=l_da_s, l_r=l_r, total=total)


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(named: dict[str, Tensor], grads: dict[str, np.ndarray],
             state: OptimState) -> None:
    """buffer <- momentum*buffer + grad; weight <- weight - lr*buffer."""
    for name in sorted(named):
        t = named[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape {g.shape} != {t.data.shape} for {name}")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(t.data)
        buf = state.momentum * buf + g
        state.buffers[name] = buf
        t.data -= state.lr * buf


def zero_grads(named: dict[str, Tensor]) -> None:
    for t in named.values():
        t.grad = None


def collect_grads(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in named.items()
    }


# -------------------------------------------------------------- augmentation


def _spatial_flip(arr: np.ndarray, flip: int) -> np.ndarray:
    if flip == 1:
        return np.flip(arr, axis=-1)
    if flip == 2:
        return np.flip(arr, axis=-2)
    return arr


def _grid_shuffle(arr: np.ndarray, perm: np.ndarray) -> np.ndarray:
    h, w = arr.shape[-2], arr.shape[-1]
    hh, hw = h // 2, w // 2
    cells = [
        arr[..., :hh, :hw], arr[..., :hh, hw:],
        arr[..., hh:, :hw], arr[..., hh:, hw:],
    ]
    top = np.concatenate([cells[perm[0]], cells[perm[1]]], axis=-1)
    bottom = np.concatenate([cells[perm[2]], cells[perm[3]]], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def apply_augment(img: np.ndarray, mask: np.ndarray, flip: int, rot: int,
                  perm: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """One fixed member of the augmentation group, applied to both arrays."""
    out_i, out_m = _spatial_flip(img, flip), _spatial_flip(mask, flip)
    if rot:
        out_i = np.rot90(out_i, k=rot, axes=(-2, -1))
        out_m = np.rot90(out_m, k=rot, axes=(-2, -1))
    if perm is not None:
        out_i, out_m = _grid_shuffle(out_i, perm), _grid_shuffle(out_m, perm)
    return np.ascontiguousarray(out_i), np.ascontiguousarray(out_m)


def augment_for_query(img: np.ndarray, mask: np.ndarray,
                      rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Random flip x rotation x optional 2x2 grid shuffle, same op on the mask."""
    if img.shape[-1] != img.shape[-2]:
        raise ValueError("augmentation expects square images")
    flip = int(rng.integers(0, 3))
    rot = int(rng.integers(0, 4))
    shuffle = int(rng.integers(0, 2))
    perm = rng.permutation(4) if shuffle else None
    return apply_augment(img, mask, flip, rot, perm)


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]


def _canonical_3d(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 1:
        return arr.reshape(1, 1, -1)
    if arr.ndim == 2:
        return arr.reshape((1,) + arr.shape)
    if arr.ndim == 3:
        return arr
    if arr.ndim == 4:
        o, i, kh, kw = arr.shape
        return arr.reshape(o, i, kh * kw)
    raise ValueError(f"cannot canonicalize a {arr.ndim}-D tensor for storage")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            blob = encode_feature(_canonical_3d(np.asarray(ckpt.tensors[name])))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: too short for a checkpoint header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, got {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} unsupported")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 4 > len(blob):
            raise FormatError(f"{path}: truncated record header")
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        if offset + 20 > len(blob):
            raise FormatError(f"{path}: truncated payload header for {name!r}")
        _, c, h, w = struct.unpack_from("<IIII", blob, offset + 4)
        size = 20 + 4 * c * h * w
        tensors[name] = decode_feature(blob[offset:offset + size],
                                       context=f"{path}:{name}")
        offset += size
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return Checkpoint(tensors=tensors)


# ------------------------------------------------------------ model assembly


@dataclass
class ModelBundle:
    backbone: ConvBackbone
    params: TtisParams
    grid: TimeGrid

    def tensors(self) -> dict[str, Tensor]:
        return {**self.backbone.tensors(), **self.params.tensors()}

    def trainable_tensors(self) -> dict[str, Tensor]:
        out = dict(self.backbone.trainable_tensors())
        for name, t in self.params.tensors().items():
            out[name] = t
        return out

    def snapshot(self) -> Checkpoint:
        return Checkpoint({n: t.data.copy() for n, t in self.tensors().items()})


def build_model(config: Config) -> ModelBundle:
    return ModelBundle(
        backbone=ConvBackbone(seed=config.seed, out_channels=config.channels),
        params=TtisParams.initial(config.channels),
        grid=TimeGrid(config.n_intervals, config.interval_h),
    )


def apply_checkpoint(model: ModelBundle, ckpt: Checkpoint) -> None:
    targets = model.tensors()
    missing = sorted(set(targets) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(targets))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, t in targets.items():
        stored = np.asarray(ckpt.tensors[name])
        if stored.size != t.data.size:
            raise ValueError(
                f"checkpoint tensor {name!r} has {stored.size} values, expected {t.data.size}"
            )
        t.data[...] = stored.reshape(t.data.shape)


def _check_dets(params: TtisParams, iteration: int) -> None:
    for label, m in (("amplitude", params.m_amp), ("phase", params.m_phase)):
        d = float(np.linalg.det(m.data))
        if not (DET_GUARD_LOW <= d <= DET_GUARD_HIGH) or not np.isfinite(d):
            raise TrainingDivergedError(
                f"det of the {label} mixing matrix is {d:.6g} at iteration "
                f"{iteration}; the signed regularizer has driven it outside "
                f"[{DET_GUARD_LOW}, {DET_GUARD_HIGH}]. Consider the "
                f"absolute_regularizer config option or a smaller learning rate."
            )


# -------------------------------------------------------------- training loops


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[dict[str, float]]


def train_source(dataset: Dataset, config: Config) -> TrainResult:
    """Episodic source-domain training over random source categories."""
    categories = dataset.categories("source")
    if not categories:
        raise ValueError("dataset has no source-domain images")
    model = build_model(config)
    model.backbone.set_trainable(TrainScope.ALL)

    root = Rng(config.seed)
    rng_cat = root.child("source-categories")
    rng_episode = root.child("source-episodes")
    rng_alpha = root.child("source-alpha")
    state = OptimState(lr=config.lr_source, momentum=config.momentum)
    losses: list[dict[str, float]] = []

    for iteration in range(config.iterations_source):
        category = categories[int(rng_cat.integers(0, len(categories)))]
        episode = sample_episode(dataset, "source", category, config.k_shot,
                                 rng_episode, purpose="source-train")
        breakdown = source_loss(episode, model.backbone, model.params, model.grid,
                                rng_alpha, config.tau, config.alpha1, config.alpha2,
                                variant=config.variant,
                                absolute_reg=config.absolute_regularizer)
        trainables = model.trainable_tensors()
        zero_grads(model.tensors())
        breakdown.total.backward()
        sgd_step(trainables, collect_grads(trainables), state)
        _check_dets(model.params, iteration)
        losses.append(breakdown.values())

    return TrainResult(checkpoint=model.snapshot(), losses=losses)


def _validate_pool(pool: FinetunePool) -> None:
    if not pool.entries:
        raise ValueError("fine-tune pool is empty")
    for category, entries in pool.entries:
        if len(entries) != pool.k:
            raise ValueError(
                f"pool category {category} holds {len(entries)} supports, expected K={pool.k}"
            )


def finetune_target(checkpoint: Checkpoint, pool: FinetunePool,
                    config: Config) -> TrainResult:
    """Fine-tune the last backbone layer + transform parameters on the pool only."""
    _validate_pool(pool)
    model = build_model(config)
    apply_checkpoint(model, checkpoint)
    model.backbone.set_trainable(TrainScope.LAST_LAYER_ONLY)

    root = Rng(config.seed).child("finetune")
    rng_cat = root.child("categories")
    rng_pick = root.child("query-pick")
    rng_aug = root.child("augment")
    rng_alpha = root.child("alpha")
    state = OptimState(lr=config.lr_finetune, momentum=config.momentum)
    categories = pool.categories()
    losses: list[dict[str, float]] = []

    for iteration in range(config.iterations_finetune):
        category = categories[int(rng_cat.integers(0, len(categories)))]
        entries = pool.entries_for(category)
        supports = tuple((e.image, e.mask) for e in entries)
        source = entries[int(rng_pick.integers(0, len(entries)))]
        q_img, q_mask = augment_for_query(source.image, source.mask, rng_aug)
        episode = Episode(
            category=category,
            domain="target",
            support_ids=tuple(e.sample_id for e in entries),
            query_id=f"augmented:{source.sample_id}",
            supports=supports,
            query=(q_img, q_mask),
        )
        breakdown = source_loss(episode, model.backbone, model.params, model.grid,
                                rng_alpha, config.tau, config.alpha1, config.alpha2,
                                variant=config.variant,
                                absolute_reg=config.absolute_regularizer)
        trainables = model.trainable_tensors()
        zero_grads(model.tensors())
        breakdown.total.backward()
        sgd_step(trainables, collect_grads(trainables), state)
        _check_dets(model.params, iteration)
        losses.append(breakdown.values())

    return TrainResult(checkpoint=model.snapshot(), losses=losses)
