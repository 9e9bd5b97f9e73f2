"""Evaluation metrics: STOI, SNR and WER, plus per-SNR-bin aggregation."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal

from .audio_io import AudioBuffer

EPS = np.finfo(np.float64).eps

# Classic STOI constants (Taal et al. 2011 and its reference MATLAB code).
STOI_CONSTANTS = {
    "sample_rate": 10000,  # Hz, internal rate
    "frame_len": 256,  # samples, Hann window
    "hop": 128,
    "fft_size": 512,
    "num_bands": 15,  # one-third octave bands
    "min_center_freq": 150.0,  # Hz, centre of the lowest band
    "segment_frames": 30,  # 384 ms envelope segments
    "sdr_lower_bound_db": -15.0,  # clipping bound beta
    "dynamic_range_db": 40.0,  # silent-frame threshold below the loudest clean frame
}

# Windowed-sinc resampler used to reach the STOI rate.
RESAMPLER = {"kaiser_beta": 14.77, "cutoff_fraction": 0.9, "half_len_per_factor": 40}


@lru_cache(maxsize=16)
def _resample_filter(up: int, down: int) -> np.ndarray:
    factor = max(up, down)
    numtaps = 2 * RESAMPLER["half_len_per_factor"] * factor + 1
    cutoff = RESAMPLER["cutoff_fraction"] / factor
    taps = signal.firwin(numtaps, cutoff, window=("kaiser", RESAMPLER["kaiser_beta"]))
    return taps


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Polyphase resampling with a Kaiser-windowed sinc low-pass."""
    if rate_in == rate_out:
        return np.asarray(x, dtype=np.float64)
    ratio = Fraction(rate_out, rate_in)
    up, down = ratio.numerator, ratio.denominator
    return signal.resample_poly(x, up, down, window=_resample_filter(up, down))


def _hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def third_octave_matrix(sample_rate: int, fft_size: int, num_bands: int, min_freq: float) -> np.ndarray:
    """``num_bands x (fft_size//2 + 1)`` 0/1 band-membership matrix."""
    f = np.linspace(0, sample_rate, fft_size + 1)[: fft_size // 2 + 1]
    k = np.arange(num_bands)
    lows = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    highs = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        lo = int(np.argmin((f - lows[i]) ** 2))
        hi = int(np.argmin((f - highs[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _frame_starts(length: int, frame_len: int, hop: int) -> range:
    return range(0, length - frame_len, hop)


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float, frame_len: int, hop: int):
    """Drop frames where the clean signal is more than *dyn_range* dB below its loudest frame.

    Kept frames are windowed and overlap-added back into contiguous signals.
    """
    w = _hann(frame_len)
    starts = list(_frame_starts(len(x), frame_len, hop))
    if not starts:
        return x[:0], y[:0]
    xf = np.array([w * x[i : i + frame_len] for i in starts])
    yf = np.array([w * y[i : i + frame_len] for i in starts])
    with np.errstate(divide="ignore"):
        energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1))
    keep = (energy - np.max(energy) + dyn_range) > 0
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    out_len = (n - 1) * hop + frame_len
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for j in range(n):
        xs[j * hop : j * hop + frame_len] += xf[j]
        ys[j * hop : j * hop + frame_len] += yf[j]
    return xs, ys


def _stft_frames(x: np.ndarray, frame_len: int, hop: int, fft_size: int) -> np.ndarray:
    w = _hann(frame_len)
    starts = list(_frame_starts(len(x), frame_len, hop))
    frames = np.array([w * x[i : i + frame_len] for i in starts]).reshape(len(starts), frame_len)
    return np.fft.rfft(frames, n=fft_size, axis=1)


class StoiError(ValueError):
    pass


def stoi(clean, processed, sample_rate: int | None = None) -> float:
    """Short-time objective intelligibility of *processed* against *clean*."""
    if isinstance(clean, AudioBuffer):
        sample_rate = clean.sample_rate if sample_rate is None else sample_rate
        if isinstance(processed, AudioBuffer) and processed.sample_rate != clean.sample_rate:
            raise StoiError("sample rates differ")
        clean = clean.samples
    if isinstance(processed, AudioBuffer):
        processed = processed.samples
    if sample_rate is None:
        raise StoiError("sample_rate is required for raw arrays")
    x = np.asarray(clean, dtype=np.float64)
    y = np.asarray(processed, dtype=np.float64)
    if x.shape != y.shape:
        raise StoiError(f"length mismatch: {x.shape} vs {y.shape}")
    if sample_rate < STOI_CONSTANTS["sample_rate"]:
        raise StoiError(f"sample rate {sample_rate} below {STOI_CONSTANTS['sample_rate']} Hz")
    c = STOI_CONSTANTS
    fs = c["sample_rate"]
    x = resample(x, sample_rate, fs)
    y = resample(y, sample_rate, fs)
    x, y = remove_silent_frames(x, y, c["dynamic_range_db"], c["frame_len"], c["hop"])
    seg = c["segment_frames"]
    if len(x) <= c["frame_len"]:
        raise StoiError("signal too short for STOI")
    X = _stft_frames(x, c["frame_len"], c["hop"], c["fft_size"])
    Y = _stft_frames(y, c["frame_len"], c["hop"], c["fft_size"])
    if X.shape[0] < seg:
        raise StoiError(f"need at least {seg} non-silent frames, got {X.shape[0]}")
    obm = third_octave_matrix(fs, c["fft_size"], c["num_bands"], c["min_center_freq"])
    x_tob = np.sqrt(obm @ (np.abs(X) ** 2).T)  # bands x frames
    y_tob = np.sqrt(obm @ (np.abs(Y) ** 2).T)
    n_frames = x_tob.shape[1]
    idx = np.arange(seg)[None, :] + np.arange(n_frames - seg + 1)[:, None]
    xs = x_tob[:, idx].transpose(1, 0, 2)  # segments x bands x seg
    ys = y_tob[:, idx].transpose(1, 0, 2)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + EPS)
    clip = 10.0 ** (-c["sdr_lower_bound_db"] / 20.0)
    yp = np.minimum(ys * alpha, xs * (1.0 + clip))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = yp - yp.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + EPS
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + EPS
    return float(np.mean(np.sum(xc * yc, axis=2)))


def snr_db(ref, est) -> float:
    """``10 log10(sum ref^2 / sum (ref - est)^2)``; ``inf`` when ``est == ref``."""
    r = ref.samples if isinstance(ref, AudioBuffer) else np.asarray(ref, dtype=np.float64)
    e = est.samples if isinstance(est, AudioBuffer) else np.asarray(est, dtype=np.float64)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {e.shape}")
    p_ref = float(np.sum(r * r))
    if p_ref == 0.0:
        raise ValueError("reference has zero energy")
    p_err = float(np.sum((r - e) ** 2))
    if p_err == 0.0:
        return math.inf
    return 10.0 * math.log10(p_ref / p_err)


@dataclass(frozen=True)
class WerResult:
    rate: float
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def align(ref, hyp) -> WerResult:
    """Levenshtein alignment with unit costs.

    The backtrace prefers substitution, then insertion, then deletion when
    several moves reach the same cost.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("empty reference")
    n, m = len(ref), len(hyp)
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev, row, r = d[-1], [i], ref[i - 1]
        for j in range(1, m + 1):
            row.append(min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1))
        d.append(row)
    i, j = n, m
    subs = dels = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return WerResult((subs + dels + ins) / n, subs, dels, ins, n)


def wer(ref, hyp) -> float:
    """Word error rate; strings are split on whitespace."""
    if isinstance(ref, str):
        ref = ref.split()
    if isinstance(hyp, str):
        hyp = hyp.split()
    return align(ref, hyp).rate


def read_transcripts(path) -> "OrderedDict[str, list[str]]":
    """``id word word ...`` per line."""
    out: OrderedDict[str, list[str]] = OrderedDict()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] in out:
                raise ValueError(f"{path}:{lineno}: duplicate utterance id {parts[0]!r}")
            out[parts[0]] = parts[1:]
    return out


def corpus_wer(refs: dict, hyps: dict) -> WerResult:
    """Pooled WER: total edits over total reference words."""
    missing = set(refs) - set(hyps)
    if missing:
        raise ValueError(f"hypotheses missing for {len(missing)} utterances, e.g. {sorted(missing)[0]!r}")
    s = d = i = n = 0
    for key, ref in refs.items():
        r = align(ref, hyps[key])
        s, d, i, n = s + r.substitutions, d + r.deletions, i + r.insertions, n + r.ref_len
    return WerResult((s + d + i) / n, s, d, i, n)


ALL_BINS = "all"


@dataclass
class MetricsReport:
    """Per-utterance metrics grouped by SNR bin; aggregates are plain means."""

    records: list = field(default_factory=list)

    def add(self, utt_id: str, snr_bin, stoi_value: float, snr_out: float,
            stoi_mixture: float | None = None, snr_in: float | None = None, pcm: float | None = None) -> None:
        self.records.append({"id": utt_id, "snr_bin": snr_bin, "stoi": stoi_value, "snr_out": snr_out,
                             "stoi_mixture": stoi_mixture, "snr_in": snr_in, "pcm": pcm})

    def bins(self) -> list:
        keys = {r["snr_bin"] for r in self.records}
        numeric = sorted(k for k in keys if isinstance(k, (int, float)))
        return numeric + sorted(k for k in keys if not isinstance(k, (int, float)))

    def _mean(self, key, snr_bin=None) -> float:
        vals = [r[key] for r in self.records
                if (snr_bin is None or r["snr_bin"] == snr_bin) and r[key] is not None]
        return float(np.mean(vals)) if vals else math.nan

    def aggregate(self, key: str = "stoi") -> "OrderedDict":
        out = OrderedDict((b, self._mean(key, b)) for b in self.bins())
        out["avg"] = self._mean(key)
        return out

    @property
    def has_mixture(self) -> bool:
        return any(r["stoi_mixture"] is not None for r in self.records)

    def write(self, path) -> None:
        """Tab-separated report: per-bin summary rows, then per-utterance rows."""
        bins = self.bins()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["# summary"])
            w.writerow(["metric", "system"] + [_bin_label(b) for b in bins] + ["avg"])
            rows = [("stoi", "processed", "stoi"), ("snr_db", "processed", "snr_out")]
            if self.has_mixture:
                rows = [("stoi", "mixture", "stoi_mixture")] + rows + [("snr_db", "mixture", "snr_in")]
            if any(r["pcm"] is not None for r in self.records):
                rows.append(("pcm", "processed", "pcm"))
            for metric, system, key in rows:
                agg = self.aggregate(key)
                w.writerow([metric, system] + [_fmt(agg[b]) for b in bins] + [_fmt(agg["avg"])])
            w.writerow([])
            w.writerow(["# utterances"])
            w.writerow(["id", "snr_bin", "stoi", "snr_out", "stoi_mixture", "snr_in", "pcm"])
            for r in self.records:
                w.writerow([r["id"], _bin_label(r["snr_bin"]), _fmt(r["stoi"]), _fmt(r["snr_out"]),
                            _fmt(r["stoi_mixture"]), _fmt(r["snr_in"]), _fmt(r["pcm"])])

    @classmethod
    def read(cls, path) -> "MetricsReport":
        report = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
        start = rows.index(["# utterances"]) + 2
        for row in rows[start:]:
            if not row:
                continue
            utt, b, st, so, sm, si, pc = row
            report.add(utt, _parse_bin(b), _parse(st), _parse(so), _parse(sm), _parse(si), _parse(pc))
        return report


def _bin_label(b) -> str:
    return f"{b:g}" if isinstance(b, (int, float)) else str(b)


def _parse_bin(s: str):
    try:
        return float(s)
    except ValueError:
        return s


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _parse(s: str):
    return float(s) if s else None
