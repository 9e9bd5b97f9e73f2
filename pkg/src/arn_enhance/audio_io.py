"""Mono 16-bit PCM WAV reading and writing.

Samples are held as float64 in [-1, 1]. Reading divides int16 values by
32768; writing clamps to [-1, 1], multiplies by 32768, rounds half away
from zero and saturates at the int16 limits, so a read/write round trip
moves no sample by more than 1/32768.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np


class WavError(ValueError):
    """Base class for WAV decoding failures."""


class MalformedWavError(WavError):
    pass


class UnsupportedFormatError(WavError):
    """Raised for valid RIFF files this module does not handle."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000
    path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioBuffer must be 1-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioBuffer samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


def quantize(samples) -> np.ndarray:
    """Float samples to int16: clamp, scale, round half away from zero, saturate."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32768.0
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def dequantize(pcm) -> np.ndarray:
    return np.asarray(pcm, dtype=np.float64) / 32768.0


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> AudioBuffer:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWavError("not a RIFF/WAVE file")
    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedWavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            pcm = body
    if fmt is None:
        raise MalformedWavError("missing fmt chunk")
    if pcm is None:
        raise MalformedWavError("missing data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1:
        raise UnsupportedFormatError(f"unsupported compression (format tag {tag})")
    if channels != 1:
        raise UnsupportedFormatError(f"unsupported channel count {channels}")
    if bits != 16:
        raise UnsupportedFormatError(f"unsupported bit depth {bits}")
    if rate == 0:
        raise MalformedWavError("sample rate is zero")
    n = len(pcm) // 2
    return AudioBuffer(dequantize(np.frombuffer(pcm[: 2 * n], dtype="<i2")), rate)


def encode_wav(buf: AudioBuffer) -> bytes:
    pcm = quantize(buf.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, 1, 1, buf.sample_rate, buf.sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )
    return header + pcm


def read_wav(path) -> AudioBuffer:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = decode_wav(data)
    return AudioBuffer(buf.samples, buf.sample_rate, path=os.fspath(path))


def write_wav(buf: AudioBuffer, path) -> None:
    data = encode_wav(buf)
    with open(path, "wb") as fh:
        fh.write(data)


def list_wavs(directory) -> list[str]:
    """Sorted ``.wav`` file names (not paths) in *directory*."""
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(".wav"))
