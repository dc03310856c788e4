"""Spectral ODE transform of feature maps over tiny time intervals.

A feature map is split into per-channel DFT amplitude and phase; each part
is pushed through the solution of dX/dt = X - q(t), q = M @ X + V*delta(X),
discretized by the trapezoid rule over an n-interval grid of width h, then
recombined. Training mode additionally re-statisticizes the input spectrum
with a random mixing coefficient before the first interval's correction
terms; evaluation mode consumes no randomness at all.

Everything here runs on autodiff Tensors so that gradients flow to the
transform parameters and to the input feature; plain ndarrays are accepted
and returned for convenience.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .spectral import decompose_t, reconstruct_t
from .tensors import Rng

SIGMA_FLOOR = 1e-6


class TtisMode(Enum):
    TRAIN_PERTURBED = "train_perturbed"
    EVAL_CLEAN = "eval_clean"


class TransformVariant(Enum):
    FULL = "full"
    NO_ODE = "no-ode"  # one affine application of q, no interval stepping
    NO_FFT = "no-fft"  # interval stepping on the raw feature map


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = t_0 + i*h, i = 1..n_intervals."""

    n_intervals: int = 10
    h: float = 0.01

    def __post_init__(self):
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        if not (self.h > 0.0):
            raise ValueError("h must be positive")


@dataclass
class TtisParams:
    """Learnable transform parameters: one (M, V) pair per spectral part."""

    m_amp: Tensor
    v_amp: Tensor
    m_phase: Tensor
    v_phase: Tensor

    @classmethod
    def initial(cls, channels: int, trainable: bool = True) -> "TtisParams":
        """Identity mixing, zero pooling weights: the transform starts near e^(n h) * id."""
        mk = lambda a: Tensor(a, requires_grad=trainable)
        return cls(
            m_amp=mk(np.eye(channels)),
            v_amp=mk(np.zeros(channels)),
            m_phase=mk(np.eye(channels)),
            v_phase=mk(np.zeros(channels)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "ttis.m_amp": self.m_amp,
            "ttis.v_amp": self.v_amp,
            "ttis.m_phase": self.m_phase,
            "ttis.v_phase": self.v_phase,
        }

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors().values() if t.requires_grad]

    @property
    def channels(self) -> int:
        return self.m_amp.shape[0]


@dataclass
class TtisState:
    """Recurrence state after interval i: (X_hat(t_i), X_hat(t_{i-1}))."""

    current: Tensor
    previous: Tensor
    index: int


def perturb_spectrum(x, alpha: float):
    """Per-channel re-statisticization toward target mean 2*alpha*mu, std 2*(1-alpha)*sigma.

    alpha = 0.5 reproduces the input; the normalizing divisor is floored at
    1e-6 so constant channels pass through as their (scaled) mean. Statistics
    are population moments over the spatial axes and stay differentiable.
    """
    x = as_tensor(x)
    mu = ad.tmean(x, axis=(1, 2), keepdims=True)
    centered = x - mu
    sigma = ad.sqrt(ad.tmean(centered * centered, axis=(1, 2), keepdims=True))
    normalized = centered / ad.clip_min(sigma, SIGMA_FLOOR)
    return normalized * (sigma * (2.0 * (1.0 - alpha))) + mu * (2.0 * alpha)


def delta(x):
    """Per-channel average pooling of (spatial max - value); shape (C,)."""
    x = as_tensor(x)
    return ad.tmean(ad.max_spatial(x) - x, axis=(1, 2))


def _affine_q(x: Tensor, m: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Returns (M @ x, V * delta(x) broadcast to x's shape components)."""
    c, h, w = x.shape
    mixed = ad.matmul(m, x.reshape(c, h * w)).reshape(c, h, w)
    pooled = (v * delta(x)).reshape(c, 1, 1)
    return mixed, pooled


def first_interval_step(a1, m: Tensor, v: Tensor, h: float, alpha: float, mode: TtisMode) -> Tensor:
    """One trapezoid step over [t_0, t_1] with X(t_0) = 0.

    X_hat(t_1) = e^h A_1 - (h/2) M A_r - (h/2) V*delta(A_r), where A_r is the
    perturbed spectrum in training mode and A_1 itself in eval mode.
    """
    a1, m, v = as_tensor(a1), as_tensor(m), as_tensor(v)
    if m.shape[0] != a1.shape[0]:
        raise ValueError(f"params mix {m.shape[0]} channels, spectrum has {a1.shape[0]}")
    ar = perturb_spectrum(a1, alpha) if mode is TtisMode.TRAIN_PERTURBED else a1
    mixed, pooled = _affine_q(ar, m, v)
    return a1 * math.exp(h) - mixed * (h / 2.0) - pooled * (h / 2.0)


def subsequent_interval_step(state: TtisState, m: Tensor, v: Tensor, h: float) -> TtisState:
    """Trapezoid step over [t_{i-1}, t_i] driven by the two previous states.

    X_hat(t_i) = e^h X_hat(t_{i-1})
               - (h/2) e^h M (e^{-h} X_hat(t_{i-1}) + X_hat(t_{i-2}))
               - (h/2) e^h V*(e^{-h} delta(X_hat(t_{i-1})) + delta(X_hat(t_{i-2})))
    """
    if state.index < 1:
        raise ValueError("subsequent steps need a completed first interval")
    eh, emh = math.exp(h), math.exp(-h)
    m, v = as_tensor(m), as_tensor(v)
    prev, prev_prev = state.current, state.previous
    c, hh, ww = prev.shape
    combined = prev * emh + prev_prev
    mixed = ad.matmul(m, combined.reshape(c, hh * ww)).reshape(c, hh, ww)
    pooled = (v * (delta(prev) * emh + delta(prev_prev))).reshape(c, 1, 1)
    nxt = prev * eh - mixed * (eh * h / 2.0) - pooled * (eh * h / 2.0)
    return TtisState(current=nxt, previous=prev, index=state.index + 1)


def _run_intervals(x1: Tensor, m: Tensor, v: Tensor, grid: TimeGrid, alpha: float, mode: TtisMode) -> Tensor:
    first = first_interval_step(x1, m, v, grid.h, alpha, mode)
    state = TtisState(current=first, previous=x1, index=1)
    for _ in range(2, grid.n_intervals + 1):
        state = subsequent_interval_step(state, m, v, grid.h)
    return state.current


def transform(
    f,
    params: TtisParams,
    grid: TimeGrid,
    mode: TtisMode = TtisMode.EVAL_CLEAN,
    rng: Rng | None = None,
    variant: TransformVariant = TransformVariant.FULL,
):
    """Full feature transform; ndarray in -> ndarray out, Tensor in -> Tensor out.

    A single mixing coefficient alpha is drawn per call and shared by the
    amplitude and phase paths. EVAL_CLEAN draws nothing.
    """
    want_array = not isinstance(f, Tensor)
    x = as_tensor(f)
    if mode is TtisMode.TRAIN_PERTURBED:
        if rng is None:
            raise ValueError("training mode needs an Rng for the mixing coefficient")
        alpha = float(rng.uniform())
    else:
        alpha = 0.5  # unused: eval mode never perturbs

    if variant is TransformVariant.NO_FFT:
        out = _run_intervals(x, params.m_amp, params.v_amp, grid, alpha, mode)
    else:
        amp, phase = decompose_t(x)
        if variant is TransformVariant.NO_ODE:
            out_amp = _single_affine(amp, params.m_amp, params.v_amp, alpha, mode)
            out_phase = _single_affine(phase, params.m_phase, params.v_phase, alpha, mode)
        else:
            out_amp = _run_intervals(amp, params.m_amp, params.v_amp, grid, alpha, mode)
            out_phase = _run_intervals(phase, params.m_phase, params.v_phase, grid, alpha, mode)
        out = reconstruct_t(out_amp, out_phase)
    return out.data if want_array else out


def _single_affine(x: Tensor, m: Tensor, v: Tensor, alpha: float, mode: TtisMode) -> Tensor:
    """Ablation path: one application of q itself, no interval stepping."""
    xr = perturb_spectrum(x, alpha) if mode is TtisMode.TRAIN_PERTURBED else x
    mixed, pooled = _affine_q(xr, m, v)
    return mixed + pooled


def transform_with_grad(
    f: np.ndarray,
    params: TtisParams,
    grid: TimeGrid,
    mode: TtisMode,
    rng: Rng | None,
    upstream: np.ndarray,
    variant: TransformVariant = TransformVariant.FULL,
):
    """Forward plus one backward sweep seeded with `upstream`.

    Returns (output, grads) with grads keyed 'm_amp', 'v_amp', 'm_phase',
    'v_phase', 'f'. Parameter tensors' .grad fields are left untouched.
    """
    x = Tensor(np.asarray(f, dtype=np.float64), requires_grad=True)
    shadow = TtisParams(
        m_amp=Tensor(params.m_amp.data, requires_grad=True),
        v_amp=Tensor(params.v_amp.data, requires_grad=True),
        m_phase=Tensor(params.m_phase.data, requires_grad=True),
        v_phase=Tensor(params.v_phase.data, requires_grad=True),
    )
    out = transform(x, shadow, grid, mode, rng, variant)
    out.backward(upstream)
    grads = {k.split(".", 1)[1]: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in shadow.tensors().items()}
    grads["f"] = x.grad if x.grad is not None else np.zeros_like(x.data)
    return out.data, grads
