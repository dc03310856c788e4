"""Amplitude/phase decomposition of feature maps and its exact reconstruction.

`decompose` maps a real (C,H,W) array to the per-channel 2-D DFT amplitude
and phase; `reconstruct` inverts it and keeps only the real part of the
inverse DFT, exposing the discarded imaginary magnitude as a diagnostic.
Both are also available as differentiable ops on `autodiff.Tensor`s; the
adjoints are derived from the DFT matrix being symmetric:

    d/dx  Re-part:  dL/dx = Re( H*W * ifft2(gRe + i*gIm) )
    d/dy  of fft2^-1 composition: GS = fft2(gy) / (H*W)

Zero-amplitude bins have undefined phase; numpy's angle returns 0 there and
the backward pass sends those bins zero gradient.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, accumulate, as_tensor, make_op


def fft2(x: np.ndarray) -> np.ndarray:
    """Per-channel 2-D DFT over the trailing two axes, unnormalized."""
    return np.fft.fft2(x, axes=(-2, -1))


def ifft2(x: np.ndarray) -> np.ndarray:
    """Per-channel inverse 2-D DFT over the trailing two axes (1/(H*W) scaling)."""
    return np.fft.ifft2(x, axes=(-2, -1))


def decompose(f: np.ndarray):
    """Real (C,H,W) -> (amplitude, phase), each (C,H,W) float64."""
    spectrum = fft2(np.asarray(f, dtype=np.float64))
    return np.abs(spectrum), np.angle(spectrum)


def reconstruct(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """(amplitude, phase) -> real (C,H,W); drops the imaginary residue."""
    return np.real(ifft2(amplitude * np.exp(1j * phase)))


def reconstruction_residue(amplitude: np.ndarray, phase: np.ndarray) -> float:
    """Max |imaginary part| discarded by `reconstruct`; ~0 for consistent inputs."""
    return float(np.abs(np.imag(ifft2(amplitude * np.exp(1j * phase)))).max())


def decompose_t(f: Tensor):
    """Differentiable decomposition; returns (amplitude, phase) tensors."""
    f = as_tensor(f)
    spectrum = fft2(f.data)
    re, im = spectrum.real, spectrum.imag
    amp = np.abs(spectrum)
    phase = np.angle(spectrum)
    n = f.data.shape[-2] * f.data.shape[-1]
    safe = np.where(amp == 0.0, 1.0, amp)
    zero = amp == 0.0

    def bw_amp(out):
        g_re = np.where(zero, 0.0, out.grad * re / safe)
        g_im = np.where(zero, 0.0, out.grad * im / safe)
        accumulate(f, np.real(ifft2(g_re + 1j * g_im)) * n)

    def bw_phase(out):
        g_re = np.where(zero, 0.0, -out.grad * im / (safe * safe))
        g_im = np.where(zero, 0.0, out.grad * re / (safe * safe))
        accumulate(f, np.real(ifft2(g_re + 1j * g_im)) * n)

    return make_op(amp, (f,), bw_amp), make_op(phase, (f,), bw_phase)


def reconstruct_t(amplitude: Tensor, phase: Tensor) -> Tensor:
    """Differentiable reconstruction; real part of the inverse DFT."""
    amplitude, phase = as_tensor(amplitude), as_tensor(phase)
    a, p = amplitude.data, phase.data
    y = np.real(ifft2(a * np.exp(1j * p)))
    n = a.shape[-2] * a.shape[-1]

    def bw(out):
        gs = fft2(out.grad) / n
        cos_p, sin_p = np.cos(p), np.sin(p)
        accumulate(amplitude, gs.real * cos_p + gs.imag * sin_p)
        accumulate(phase, a * (gs.imag * cos_p - gs.real * sin_p))

    return make_op(y, (amplitude, phase), bw)
