"""Additive speech + noise mixing at controlled SNR, and corpus generation.

Mixtures follow ``y = s + n``. Speech is scaled to hit the requested SNR
against the noise, then the whole triple is rescaled jointly so the
mixture has the target RMS; both steps preserve the SNR and the additive
identity.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .audio_io import AudioBuffer, list_wavs, read_wav, write_wav
from .dsp import rms

DEFAULT_SNR_RANGES = ((-7.0, 0.0), (0.0, 10.0))
MANIFEST_FORMAT = "arn-corpus-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class MixturePair:
    clean: AudioBuffer
    noise: AudioBuffer
    mixture: AudioBuffer
    snr_db: float
    seed: int | None = None

    @property
    def realized_snr(self) -> float:
        return 20.0 * math.log10(rms(self.clean) / rms(self.noise))


def sample_snr(rng: np.random.Generator, ranges=DEFAULT_SNR_RANGES) -> float:
    """Pick one of the ranges with equal probability, then draw uniformly inside it."""
    lo, hi = ranges[int(rng.integers(len(ranges)))]
    return float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class SnrPolicy:
    fixed: float | None = None
    ranges: tuple = DEFAULT_SNR_RANGES

    def draw(self, rng: np.random.Generator) -> float:
        return self.fixed if self.fixed is not None else sample_snr(rng, self.ranges)

    def to_dict(self) -> dict:
        if self.fixed is not None:
            return {"kind": "fixed", "snr_db": self.fixed}
        return {"kind": "ranges", "ranges": [list(r) for r in self.ranges]}

    @classmethod
    def from_dict(cls, d: dict) -> "SnrPolicy":
        if d["kind"] == "fixed":
            return cls(fixed=float(d["snr_db"]))
        return cls(ranges=tuple(tuple(map(float, r)) for r in d["ranges"]))


def mix_arrays(s: np.ndarray, n: np.ndarray, snr_db: float, target_rms: float | None = 0.05):
    """Return scaled ``(s, n, y)`` arrays with ``y = s + n`` at *snr_db*."""
    if s.shape != n.shape:
        raise ValueError(f"speech and noise lengths differ: {s.shape} vs {n.shape}")
    rs, rn = rms(s), rms(n)
    if rs == 0.0:
        raise ValueError("zero-energy speech")
    if rn == 0.0:
        raise ValueError("zero-energy noise")
    s = s * ((rn / rs) * 10.0 ** (snr_db / 20.0))
    y = s + n
    if target_rms is not None:
        k = target_rms / rms(y)
        s, n = s * k, n * k
        y = s + n
    return s, n, y


def mix_at_snr(s: AudioBuffer, n: AudioBuffer, snr_db: float, target_rms: float | None = 0.05,
               seed: int | None = None) -> MixturePair:
    if s.sample_rate != n.sample_rate:
        raise ValueError("speech and noise sample rates differ")
    cs, cn, y = mix_arrays(s.samples, n.samples, snr_db, target_rms)
    return MixturePair(s.with_samples(cs), s.with_samples(cn), s.with_samples(y), float(snr_db), seed)


def fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator, loop: bool = True):
    """Random contiguous crop of *noise*, or a looped copy from a random phase if too short.

    Returns ``(segment, offset)``.
    """
    if len(noise) == 0:
        raise ValueError("empty noise signal")
    if len(noise) >= length:
        offset = int(rng.integers(0, len(noise) - length + 1))
        return noise[offset : offset + length], offset
    if not loop:
        raise ValueError(f"noise of {len(noise)} samples is shorter than utterance ({length}) and looping is off")
    offset = int(rng.integers(0, len(noise)))
    return np.take(noise, np.arange(offset, offset + length), mode="wrap"), offset


def synth_speech_like(seed: int, duration_s: float, sample_rate: int = 16000) -> AudioBuffer:
    """Harmonic, amplitude-modulated, pause-separated stand-in for speech.

    3-8 harmonics of a fundamental wandering in 90-300 Hz, syllabic
    modulation at 2-8 Hz, voiced runs of at most 0.9 s separated by exact
    silences of 80-250 ms. Peak-normalized to 0.5.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    total = int(round(duration_s * sample_rate))
    out = np.zeros(total)
    pos = int(rng.uniform(0.0, 0.1) * sample_rate)
    ramp = int(0.01 * sample_rate)
    while pos < total:
        voiced = int(rng.uniform(0.15, 0.9) * sample_rate)
        seg_len = min(voiced, total - pos)
        t = np.arange(seg_len) / sample_rate
        base = rng.uniform(100.0, 250.0)
        drift = rng.uniform(-0.25, 0.25) * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t + rng.uniform(0, 2 * np.pi))
        walk = np.cumsum(rng.normal(0.0, 0.002, seg_len))
        f0 = np.clip(base * np.exp(drift + walk), 90.0, 300.0)
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        n_harm = int(rng.integers(3, 9))
        seg = np.zeros(seg_len)
        for k in range(1, n_harm + 1):
            amp = rng.uniform(0.5, 1.0) / k
            seg += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        rate = rng.uniform(2.0, 8.0)
        seg *= 0.55 - 0.45 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        r = min(ramp, seg_len // 2)
        if r:
            taper = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            seg[:r] *= taper
            seg[seg_len - r :] *= taper[::-1]
        out[pos : pos + seg_len] = seg
        pos += seg_len + int(rng.uniform(0.08, 0.25) * sample_rate)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return AudioBuffer(out, sample_rate)


NOISE_KINDS = ("white", "pink", "brown")


def synth_noise(seed: int, duration_s: float, kind: str = "white", sample_rate: int = 16000) -> AudioBuffer:
    """Stationary Gaussian noise with a 1/f^alpha spectrum (white, pink or brown)."""
    alpha = {"white": 0.0, "pink": 1.0, "brown": 2.0}.get(kind)
    if alpha is None:
        raise ValueError(f"unknown noise kind {kind!r}")
    rng = np.random.default_rng(seed)
    total = int(round(duration_s * sample_rate))
    x = rng.standard_normal(total)
    if alpha:
        spec = np.fft.rfft(x)
        f = np.fft.rfftfreq(total, 1.0 / sample_rate)
        f[0] = f[1] if total > 1 else 1.0
        x = np.fft.irfft(spec / f ** (alpha / 2.0), n=total)
    x /= np.max(np.abs(x))
    return AudioBuffer(0.5 * x, sample_rate)


@dataclass
class CorpusManifest:
    entries: list
    target_rms: float
    snr_policy: SnrPolicy
    seed: int
    loop_noise: bool = True

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "target_rms": self.target_rms,
            "loop_noise": self.loop_noise,
            "snr_policy": self.snr_policy.to_dict(),
            "entries": self.entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise ValueError("not a corpus manifest")
        return cls(d["entries"], float(d["target_rms"]), SnrPolicy.from_dict(d["snr_policy"]),
                   int(d["seed"]), bool(d.get("loop_noise", True)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def mix_entry(entry: dict, manifest: CorpusManifest, clean_dir, noise_dir) -> MixturePair:
    """Rebuild one manifest entry from its source files."""
    s = read_wav(os.path.join(clean_dir, entry["clean"]))
    n = read_wav(os.path.join(noise_dir, entry["noise"]))
    length, offset = entry["length"], entry["noise_offset"]
    if len(n) >= length:
        seg = n.samples[offset : offset + length]
    elif manifest.loop_noise:
        seg = np.take(n.samples, np.arange(offset, offset + length), mode="wrap")
    else:
        raise ValueError(f"noise {entry['noise']} shorter than utterance and looping is off")
    return mix_at_snr(s, n.with_samples(seg), entry["snr_db"], manifest.target_rms, entry["seed"])


def build_corpus(clean_dir, noise_dir, count: int, seed: int, out_dir,
                 snr_policy: SnrPolicy = SnrPolicy(), target_rms: float = 0.05,
                 loop_noise: bool = True) -> CorpusManifest:
    """Mix *count* random (utterance, noise segment, SNR) triples into ``out_dir``.

    Writes ``clean/``, ``noise/`` and ``noisy/`` WAVs plus ``manifest.json``.
    Entry ``i`` draws from its own generator seeded by ``(seed, i)``.
    """
    cleans = list_wavs(clean_dir)
    noises = list_wavs(noise_dir)
    if count > 0 and (not cleans or not noises):
        raise ValueError("clean and noise directories must contain WAV files")
    sub = {k: os.path.join(out_dir, k) for k in ("clean", "noise", "noisy")}
    os.makedirs(out_dir, exist_ok=True)
    if count > 0:
        for d in sub.values():
            os.makedirs(d, exist_ok=True)
    cache: dict[str, AudioBuffer] = {}

    def load(directory, name):
        key = os.path.join(directory, name)
        if key not in cache:
            cache[key] = read_wav(key)
        return cache[key]

    manifest = CorpusManifest([], target_rms, snr_policy, seed, loop_noise)
    for i in range(count):
        rng = entry_rng(seed, i)
        clean_name = cleans[int(rng.integers(len(cleans)))]
        noise_name = noises[int(rng.integers(len(noises)))]
        s = load(clean_dir, clean_name)
        n = load(noise_dir, noise_name)
        if s.sample_rate != n.sample_rate:
            raise ValueError(f"{clean_name} and {noise_name} have different sample rates")
        _, offset = fit_noise(n.samples, len(s), rng, loop_noise)
        snr = snr_policy.draw(rng)
        entry = {"id": f"{i:05d}", "clean": clean_name, "noise": noise_name, "noise_offset": offset,
                 "snr_db": snr, "seed": int(seed), "length": len(s)}
        pair = mix_entry(entry, manifest, clean_dir, noise_dir)
        name = entry["id"] + ".wav"
        write_wav(pair.clean, os.path.join(sub["clean"], name))
        write_wav(pair.noise, os.path.join(sub["noise"], name))
        write_wav(pair.mixture, os.path.join(sub["noisy"], name))
        manifest.entries.append(entry)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


class DynamicMixer:
    """Draws freshly mixed fixed-length training pairs from in-memory material."""

    def __init__(self, cleans, noises, length: int, snr_policy: SnrPolicy = SnrPolicy(),
                 target_rms: float = 0.05):
        self.cleans = [np.asarray(c.samples if isinstance(c, AudioBuffer) else c, dtype=np.float64) for c in cleans]
        self.noises = [np.asarray(n.samples if isinstance(n, AudioBuffer) else n, dtype=np.float64) for n in noises]
        if not self.cleans or not self.noises:
            raise ValueError("need at least one clean and one noise signal")
        self.length = length
        self.snr_policy = snr_policy
        self.target_rms = target_rms

    def draw(self, rng: np.random.Generator):
        """One ``(s, n, y)`` triple of ``length`` samples."""
        for _ in range(100):
            clean = self.cleans[int(rng.integers(len(self.cleans)))]
            s, _ = fit_noise(clean, self.length, rng)
            if rms(s) > 1e-4:
                break
        else:
            raise ValueError("could not find a non-silent speech segment")
        n, _ = fit_noise(self.noises[int(rng.integers(len(self.noises)))], self.length, rng)
        return mix_arrays(s, n, self.snr_policy.draw(rng), self.target_rms)

    def batch(self, rng: np.random.Generator, size: int):
        triples = [self.draw(rng) for _ in range(size)]
        return tuple(np.stack(parts) for parts in zip(*triples))
