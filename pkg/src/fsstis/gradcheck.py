"""Finite-difference verification of every gradient path.

Three suites, mirroring how gradients are consumed in training:

* ``transform-params`` — the spectral transform in isolation; analytic
  gradients of a weighted-sum readout w.r.t. every transform parameter and
  the input feature, against central differences (tight threshold).
* ``backbone-params`` — the convolutional feature extractor in isolation.
* ``composed-loss`` — the full episodic loss (extraction, transform,
  matching, all four terms) w.r.t. the transform parameters and the
  fine-tunable backbone tensors (looser threshold: longer float chains).

Large tensors are spot-checked on a seeded sample of entries; small tensors
are checked exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import ConvBackbone, TrainScope
from .episodes import SynthSpec, generate_dataset, sample_episode
from .tensors import Rng
from .training import source_loss, zero_grads
from .ttis import TimeGrid, TtisMode, TtisParams, transform

ISOLATED_THRESHOLD = 1e-4
COMPOSED_THRESHOLD = 1e-3
FD_STEP = 1e-6
MAX_ENTRIES = 48


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.rel_err <= self.threshold


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-10)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _entry_sample(shape: tuple[int, ...], rng: Rng) -> np.ndarray:
    """Seeded flat indices to probe: all of them for small tensors."""
    size = int(np.prod(shape))
    if size <= MAX_ENTRIES:
        return np.arange(size)
    return np.sort(rng.choice_without_replacement(size, MAX_ENTRIES))


def _fd_entries(fn, tensor: Tensor, entries: np.ndarray,
                step: float = FD_STEP) -> np.ndarray:
    """Central differences of fn() w.r.t. the given flat entries of tensor.

    The tensor's buffer is perturbed in place and restored, so fn can close
    over the live model.
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros(entries.size)
    for pos, idx in enumerate(entries):
        original = flat[idx]
        flat[idx] = original + step
        hi = fn()
        flat[idx] = original - step
        lo = fn()
        flat[idx] = original
        out[pos] = (hi - lo) / (2.0 * step)
    return out


def _check_tensors(suite: str, named: dict[str, Tensor], fn_value,
                   fn_forward, threshold: float, rng: Rng,
                   sabotage: bool = False) -> list[CheckResult]:
    """Compare backward-pass gradients of fn_value() against differences."""
    zero_grads(named)
    value = fn_value()
    value.backward()
    results = []
    for pos, (name, tensor) in enumerate(sorted(named.items())):
        analytic = tensor.grad.reshape(-1).copy()
        if sabotage and pos == 0:
            analytic = -analytic
        entries = _entry_sample(tensor.shape, rng.child(f"entries:{name}"))
        numeric = _fd_entries(fn_forward, tensor, entries)
        results.append(CheckResult(
            suite=suite,
            name=name,
            rel_err=_rel_err(analytic[entries], numeric),
            threshold=threshold,
        ))
    return results


def _random_params(channels: int, rng: Rng) -> TtisParams:
    return TtisParams(
        m_amp=Tensor(np.eye(channels) + 0.1 * rng.normal(size=(channels, channels)),
                     requires_grad=True),
        v_amp=Tensor(0.1 * rng.normal(size=channels), requires_grad=True),
        m_phase=Tensor(np.eye(channels) + 0.1 * rng.normal(size=(channels, channels)),
                       requires_grad=True),
        v_phase=Tensor(0.1 * rng.normal(size=channels), requires_grad=True),
    )


def transform_param_suite(seed: int, sabotage: bool = False) -> list[CheckResult]:
    rng = Rng(seed).child("transform-suite")
    c, h, w = 5, 4, 4
    x = Tensor(rng.normal(size=(c, h, w)), requires_grad=True)
    readout = rng.normal(size=(c, h, w))
    grid = TimeGrid(n_intervals=3, h=0.01)
    params = _random_params(c, rng.child("params"))

    def value() -> Tensor:
        out = transform(x, params, grid, TtisMode.EVAL_CLEAN, None)
        return ad.tsum(out * readout)

    named = dict(params.tensors())
    named["input"] = x
    return _check_tensors("transform-params", named, value,
                          lambda: float(value().data), ISOLATED_THRESHOLD,
                          rng.child("probe"), sabotage=sabotage)


def backbone_suite(seed: int) -> list[CheckResult]:
    rng = Rng(seed).child("backbone-suite")
    image = rng.uniform(size=(3, 16, 16))
    backbone = ConvBackbone(seed=seed, out_channels=8)
    backbone.set_trainable(TrainScope.ALL)
    feature_shape = backbone.extract(image).shape
    readout = rng.normal(size=feature_shape)

    def value() -> Tensor:
        return ad.tsum(backbone.extract(image) * readout)

    return _check_tensors("backbone-params", backbone.tensors(), value,
                          lambda: float(value().data), ISOLATED_THRESHOLD,
                          rng.child("probe"))


def composed_loss_suite(seed: int) -> list[CheckResult]:
    rng = Rng(seed).child("composed-suite")
    dataset = generate_dataset(SynthSpec(seed=seed, image_size=32,
                                         images_per_category=2))
    episode = sample_episode(dataset, "source", 0, 1,
                             Rng(seed).child("episode"), purpose="gradcheck")
    backbone = ConvBackbone(seed=seed + 1, out_channels=8)
    backbone.set_trainable(TrainScope.LAST_LAYER_ONLY)
    params = _random_params(8, rng.child("params"))
    grid = TimeGrid(n_intervals=3, h=0.01)

    def value() -> Tensor:
        # a fresh stream per call fixes the perturbation draws, so finite
        # differences see the same mixing coefficients as the backward pass
        alpha_rng = Rng(seed).child("alpha")
        return source_loss(episode, backbone, params, grid, alpha_rng,
                           tau=10.0, alpha1=0.5, alpha2=0.5).total

    named = dict(params.tensors())
    named.update(backbone.trainable_tensors())
    return _check_tensors("composed-loss", named, value,
                          lambda: float(value().data), COMPOSED_THRESHOLD,
                          rng.child("probe"))


def run_gradcheck(seed: int = 0, sabotage: bool = False) -> list[CheckResult]:
    """All suites; `sabotage` flips one analytic gradient (detector test)."""
    results = transform_param_suite(seed, sabotage=sabotage)
    results += backbone_suite(seed)
    results += composed_loss_suite(seed)
    return results
