"""Phase-constrained magnitude (PCM) loss.

For an estimate ``s_hat`` of speech ``s`` in mixture ``y`` the implied noise
estimate is ``y - s_hat``. The loss averages a spectral L1 term on speech
and on noise::

    L_sm(a, a_hat) = mean_{t,f} | |A_r| - |Â_r| | + | |A_i| - |Â_i| |
    pcm = w * L_sm(s, s_hat) + (1 - w) * L_sm(n, n_hat)

with ``A_r``/``A_i`` the real/imaginary parts of a one-sided windowed STFT.
The STFT is a constant-matrix DFT so gradients are plain matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import dsp
from .audio_io import AudioBuffer
from .autodiff import Tensor, ops


@dataclass(frozen=True)
class LossConfig:
    fft_size: int = 512
    hop: int = 256
    window: str = dsp.HAMMING_PERIODIC
    speech_weight: float = 0.5
    reduction: str = "mean"  # or "sum" over time-frequency bins
    variant: str = "pcm"  # or "magnitude" (|X| instead of |Re|, |Im|)

    def __post_init__(self):
        dsp._check_fft(self.fft_size, self.hop, self.fft_size)
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.variant not in ("pcm", "magnitude"):
            raise ValueError(f"unknown loss variant {self.variant!r}")


@lru_cache(maxsize=8)
def dft_basis(fft_size: int, window: str, dtype: str = "float64") -> tuple[np.ndarray, np.ndarray]:
    """Windowed real-DFT bases ``(cos, -sin)`` of shape ``(fft_size, fft_size // 2 + 1)``."""
    n = np.arange(fft_size)[:, None]
    k = np.arange(fft_size // 2 + 1)[None, :]
    phase = 2.0 * np.pi * ((n * k) % fft_size) / fft_size
    w = dsp.get_window(window, fft_size)[:, None]
    real = (w * np.cos(phase)).astype(dtype)
    imag = (-w * np.sin(phase)).astype(dtype)
    real.setflags(write=False)
    imag.setflags(write=False)
    return real, imag


def spectrum(x: Tensor, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Real and imaginary STFT parts of a ``(B, M)`` batch, each ``(B, T, F)``."""
    real, imag = dft_basis(cfg.fft_size, cfg.window, str(x.dtype))
    frames = ops.frame(x, cfg.fft_size, cfg.hop)
    return ops.matmul(frames, Tensor(real)), ops.matmul(frames, Tensor(imag))


def _spectral_l1(ref: Tensor, est: Tensor, cfg: LossConfig) -> Tensor:
    rr, ri = spectrum(ref, cfg)
    er, ei = spectrum(est, cfg)
    if cfg.variant == "magnitude":
        def mag(r, i):
            return ops.exp(ops.scale(ops.log(ops.add(ops.add(ops.mul(r, r), ops.mul(i, i)),
                                                     Tensor(np.full(r.shape, 1e-12, r.dtype)))), 0.5))
        diff = ops.abs(ops.sub(mag(rr, ri), mag(er, ei)))
    else:
        diff = ops.add(ops.abs(ops.sub(ops.abs(rr), ops.abs(er))),
                       ops.abs(ops.sub(ops.abs(ri), ops.abs(ei))))
    b, t, f = diff.shape
    total = ops.sum(diff)
    return ops.scale(total, 1.0 / (b * t * f) if cfg.reduction == "mean" else 1.0 / b)


def pcm_loss_tensor(s_hat: Tensor, s, y, cfg: LossConfig = LossConfig()) -> Tensor:
    """Batch PCM loss; ``s_hat``, ``s`` and ``y`` are ``(B, M)``. Differentiable in ``s_hat``."""
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=s_hat.dtype))
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=s_hat.dtype))
    if not (s_hat.shape == s.shape == y.shape):
        raise ValueError(f"length mismatch: {s_hat.shape}, {s.shape}, {y.shape}")
    n = Tensor(y.data - s.data)
    n_hat = ops.sub(y, s_hat)
    w = cfg.speech_weight
    return ops.add(ops.scale(_spectral_l1(s, s_hat, cfg), w),
                   ops.scale(_spectral_l1(n, n_hat, cfg), 1.0 - w))


def pcm_loss(s_hat: AudioBuffer, s: AudioBuffer, y: AudioBuffer, cfg: LossConfig = LossConfig()) -> float:
    if not (len(s_hat) == len(s) == len(y)):
        raise ValueError(f"length mismatch: {len(s_hat)}, {len(s)}, {len(y)}")
    loss = pcm_loss_tensor(Tensor(s_hat.samples[None]), s.samples[None], y.samples[None], cfg)
    return float(loss.data)
