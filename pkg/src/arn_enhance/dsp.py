"""Framing, overlap-add, STFT and log-Mel features.

The array helpers (``frame_array``, ``ola_sum``) work on any leading batch
dimensions and are shared with the differentiable ops in
:mod:`arn_enhance.autodiff`.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioBuffer

HAMMING_PERIODIC = "hamming_periodic"
RECTANGULAR = "rectangular"
WINDOWS = (HAMMING_PERIODIC, RECTANGULAR)

LOG_FLOOR = math.exp(-40.0)
FEATURE_MAGIC = b"ARNF"


def num_frames(length: int, frame_len: int, hop: int) -> int:
    if length <= frame_len:
        return 1
    return -(-(length - frame_len) // hop) + 1


def padded_length(length: int, frame_len: int, hop: int) -> int:
    return (num_frames(length, frame_len, hop) - 1) * hop + frame_len


def _check_geometry(frame_len: int, hop: int) -> None:
    if frame_len <= 0:
        raise ValueError(f"frame length must be positive, got {frame_len}")
    if hop <= 0 or hop > frame_len:
        raise ValueError(f"hop must satisfy 0 < hop <= frame length, got hop={hop}, L={frame_len}")


def frame_array(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Chunk the last axis of *x* into ``(..., T, frame_len)`` frames.

    The tail is zero-padded so every sample is covered. Returns a copy.
    """
    _check_geometry(frame_len, hop)
    m = x.shape[-1]
    if m == 0:
        raise ValueError("cannot frame an empty signal")
    pad = padded_length(m, frame_len, hop) - m
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,), dtype=x.dtype)], axis=-1)
    view = np.lib.stride_tricks.sliding_window_view(x, frame_len, axis=-1)
    return np.ascontiguousarray(view[..., ::hop, :])


def ola_sum(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    """Sum overlapping frames back onto a time axis truncated to *length*.

    No normalization; the adjoint of :func:`frame_array`.
    """
    t, frame_len = frames.shape[-2:]
    _check_geometry(frame_len, hop)
    parts = -(-frame_len // hop)
    blocks = np.zeros(frames.shape[:-2] + (t + parts - 1, hop), dtype=frames.dtype)
    for j in range(parts):
        lo = j * hop
        hi = min(lo + hop, frame_len)
        blocks[..., j : j + t, : hi - lo] += frames[..., :, lo:hi]
    out = blocks.reshape(frames.shape[:-2] + (-1,))
    if out.shape[-1] < length:
        raise ValueError(f"{t} frames cannot cover {length} samples")
    return out[..., :length]


def overlap_counts(num: int, frame_len: int, hop: int, length: int) -> np.ndarray:
    return ola_sum(np.ones((num, frame_len)), hop, length)


@dataclass(frozen=True)
class FrameMatrix:
    frames: np.ndarray
    frame_len: int
    hop: int
    orig_len: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.frame_len:
            raise ValueError(f"frames must be T x {self.frame_len}, got {self.frames.shape}")
        _check_geometry(self.frame_len, self.hop)
        expected = num_frames(self.orig_len, self.frame_len, self.hop)
        if self.frames.shape[0] != expected:
            raise ValueError(f"expected {expected} frames for M={self.orig_len}, got {self.frames.shape[0]}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def frame_signal(x: AudioBuffer, frame_len: int, hop: int) -> FrameMatrix:
    return FrameMatrix(frame_array(x.samples, frame_len, hop), frame_len, hop, len(x))


def overlap_add(fm: FrameMatrix, sample_rate: int = 16000) -> AudioBuffer:
    """Count-normalized overlap-add: each sample is the mean of the frames covering it."""
    total = ola_sum(fm.frames, fm.hop, fm.orig_len)
    counts = overlap_counts(fm.num_frames, fm.frame_len, fm.hop, fm.orig_len)
    return AudioBuffer(total / counts, sample_rate)


def get_window(name: str, length: int) -> np.ndarray:
    if name == HAMMING_PERIODIC:
        n = np.arange(length)
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / length)
    if name == RECTANGULAR:
        return np.ones(length)
    raise ValueError(f"unknown window {name!r}; expected one of {WINDOWS}")


def _check_fft(fft_size: int, hop: int, frame_len: int) -> None:
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if frame_len > fft_size:
        raise ValueError(f"frame length {frame_len} exceeds fft_size {fft_size}")
    _check_geometry(frame_len, hop)


@dataclass(frozen=True)
class Spectrogram:
    real: np.ndarray
    imag: np.ndarray
    fft_size: int
    hop: int
    window: str = HAMMING_PERIODIC
    frame_len: int | None = None

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError("real and imaginary parts differ in shape")
        if self.real.shape[-1] != self.fft_size // 2 + 1:
            raise ValueError(f"expected {self.fft_size // 2 + 1} bins, got {self.real.shape[-1]}")
        if self.frame_len is None:
            object.__setattr__(self, "frame_len", self.fft_size)

    @property
    def power(self) -> np.ndarray:
        return self.real**2 + self.imag**2


def stft(
    x: AudioBuffer,
    fft_size: int = 512,
    hop: int = 256,
    window: str = HAMMING_PERIODIC,
    frame_len: int | None = None,
) -> Spectrogram:
    frame_len = fft_size if frame_len is None else frame_len
    _check_fft(fft_size, hop, frame_len)
    frames = frame_array(x.samples, frame_len, hop) * get_window(window, frame_len)
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)
    return Spectrogram(spec.real.copy(), spec.imag.copy(), fft_size, hop, window, frame_len)


def istft(spec: Spectrogram, orig_len: int, sample_rate: int = 16000) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`."""
    frame_len = spec.frame_len
    _check_fft(spec.fft_size, spec.hop, frame_len)
    w = get_window(spec.window, frame_len)
    frames = np.fft.irfft(spec.real + 1j * spec.imag, n=spec.fft_size, axis=-1)[:, :frame_len]
    num = ola_sum(frames * w, spec.hop, orig_len)
    den = ola_sum(np.tile(w * w, (frames.shape[0], 1)), spec.hop, orig_len)
    if np.any(den < 1e-8):
        raise ValueError("non-invertible framing: squared window sum below 1e-8")
    return AudioBuffer(num / den, sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = 80,
    fft_size: int = 512,
    sample_rate: int = 16000,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular HTK-mel filters as an ``(fft_size // 2 + 1, n_mels)`` matrix.

    Triangles are linear in mel, evaluated at each FFT bin's mel value.
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(fft_size // 2 + 1) * sample_rate / fft_size)
    left, centre, right = edges[:-2], edges[1:-1], edges[2:]
    up = (bin_mel[:, None] - left) / (centre - left)
    down = (right - bin_mel[:, None]) / (right - centre)
    return np.maximum(0.0, np.minimum(up, down))


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 80
    frame_len: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = HAMMING_PERIODIC
    fmin: float = 0.0
    fmax: float = 8000.0
    delta_width: int = 2
    normalize_deltas: bool = False


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    mean_normalized: bool = True

    @property
    def shape(self):
        return self.values.shape


def log_mel_spectrogram(x: AudioBuffer, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Un-normalized ``T x n_mels`` natural-log mel energies."""
    if x.sample_rate != 16000:
        raise ValueError(f"log-Mel features expect 16 kHz input, got {x.sample_rate}")
    if len(x) < cfg.frame_len:
        raise ValueError(f"utterance of {len(x)} samples is shorter than one frame ({cfg.frame_len})")
    spec = stft(x, cfg.fft_size, cfg.hop, cfg.window, cfg.frame_len)
    fb = mel_filterbank(cfg.n_mels, cfg.fft_size, x.sample_rate, cfg.fmin, cfg.fmax)
    return np.log(spec.power @ fb + LOG_FLOOR)


def deltas(feats: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over the frame axis with edge frames replicated."""
    t = feats.shape[0]
    padded = np.concatenate([np.repeat(feats[:1], width, 0), feats, np.repeat(feats[-1:], width, 0)])
    num = sum(k * (padded[width + k : width + k + t] - padded[width - k : width - k + t]) for k in range(1, width + 1))
    return num / (2.0 * sum(k * k for k in range(1, width + 1)))


def log_mel_features(x: AudioBuffer, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    static = log_mel_spectrogram(x, cfg)
    static = static - static.mean(axis=0)
    d1 = deltas(static, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    if cfg.normalize_deltas:
        d1 = d1 - d1.mean(axis=0)
        d2 = d2 - d2.mean(axis=0)
    return FeatureMatrix(np.concatenate([static, d1, d2], axis=1))


def write_features(feats: FeatureMatrix, path) -> None:
    values = np.ascontiguousarray(feats.values, dtype="<f4")
    t, d = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", t, d) + values.tobytes())


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    t, d = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * t * d:
        raise ValueError(f"{path}: expected {t}x{d} values, file size {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=12).reshape(t, d)
    return FeatureMatrix(values.copy())


def rms(x) -> float:
    samples = x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(samples**2)))


def rms_normalize(x: AudioBuffer, target_rms: float) -> AudioBuffer:
    level = rms(x)
    if level == 0.0:
        raise ValueError("zero-energy signal")
    return x.with_samples(x.samples * (target_rms / level))
