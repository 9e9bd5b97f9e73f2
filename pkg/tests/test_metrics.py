import itertools
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arn_enhance import metrics, mixer
from arn_enhance.audio_io import AudioBuffer
from arn_enhance.metrics import MetricsReport, StoiError, align, corpus_wer, snr_db, stoi, wer

SNRS = (-6, -3, 0, 3, 6, 9)


def noisy_pair(seed, snr, kind="white", dur=2.0, sr=16000):
    s = mixer.synth_speech_like(seed, dur, sr)
    n = mixer.synth_noise(seed + 1000, dur, kind, sr)
    return mixer.mix_at_snr(s, n, snr)


# --- STOI ---------------------------------------------------------------

def test_matches_pystoi_at_native_rate():
    pystoi = pytest.importorskip("pystoi")
    for seed, snr in ((0, -5), (1, 0), (2, 5)):
        p = noisy_pair(seed, snr, dur=2.0, sr=10000)
        x, y = p.clean.samples, p.mixture.samples
        assert stoi(x, y, 10000) == pytest.approx(pystoi.stoi(x, y, 10000), abs=1e-6)


def test_close_to_pystoi_with_resampling():
    pystoi = pytest.importorskip("pystoi")
    p = noisy_pair(3, 0)
    x, y = p.clean.samples, p.mixture.samples
    # resampling filters differ slightly between implementations
    assert stoi(x, y, 16000) == pytest.approx(pystoi.stoi(x, y, 16000), abs=0.03)


def test_identity_and_scale():
    p = noisy_pair(4, 0)
    assert stoi(p.clean, p.clean) == pytest.approx(1.0, abs=1e-9)
    a = stoi(p.clean, p.mixture)
    assert stoi(p.clean, p.mixture.with_samples(3.0 * p.mixture.samples)) == pytest.approx(a, abs=1e-9)
    assert 0 < a < 1


def test_monotone_in_snr():
    scores = np.array([[stoi(noisy_pair(seed, snr).clean, noisy_pair(seed, snr).mixture) for snr in SNRS]
                       for seed in range(10)])
    assert np.all(np.diff(scores.mean(axis=0)) > 0)
    assert np.mean(np.diff(scores, axis=1) > 0) >= 0.9


def test_stoi_errors():
    x = np.random.default_rng(0).standard_normal(16000)
    with pytest.raises(StoiError, match="length mismatch"):
        stoi(x, x[:-1], 16000)
    with pytest.raises(StoiError, match="sample_rate"):
        stoi(x, x)
    with pytest.raises(StoiError, match="below"):
        stoi(x, x, 8000)
    with pytest.raises(StoiError):
        stoi(x[:2000], x[:2000], 16000)  # too few frames for one segment
    with pytest.raises(StoiError, match="differ"):
        stoi(AudioBuffer(x, 16000), AudioBuffer(x, 22050))


def test_third_octave_matrix():
    m = metrics.third_octave_matrix(10000, 512, 15, 150)
    assert m.shape == (15, 257)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert np.all(m.sum(axis=0) <= 1)  # bands do not overlap
    assert np.all(m.sum(axis=1) > 0)


def test_resample_preserves_tone():
    t = np.arange(16000) / 16000
    y = metrics.resample(np.sin(2 * np.pi * 440 * t), 16000, 10000)
    ref = np.sin(2 * np.pi * 440 * np.arange(10000) / 10000)
    assert len(y) == 10000
    assert np.max(np.abs(y[500:-500] - ref[500:-500])) < 1e-3


# --- SNR ------------------------------------------------------------------

def test_snr_examples(rng):
    x = rng.standard_normal(1000)
    assert snr_db(x, x) == math.inf
    assert snr_db(x, 1.1 * x) == pytest.approx(20.0, abs=1e-12)
    assert snr_db(x, np.zeros_like(x)) == pytest.approx(0.0, abs=1e-12)
    assert snr_db(x, x + 0.1 * x[::-1]) == pytest.approx(
        10 * np.log10(np.sum(x**2) / np.sum((0.1 * x[::-1]) ** 2)), abs=1e-12)
    with pytest.raises(ValueError, match="zero energy"):
        snr_db(np.zeros(4), np.ones(4))
    with pytest.raises(ValueError, match="length"):
        snr_db(x, x[:-1])


# --- WER ------------------------------------------------------------------

def test_wer_examples():
    assert wer("a b c", "a b c") == 0
    r = align("a b c".split(), "a x c".split())
    assert (r.substitutions, r.insertions, r.deletions) == (1, 0, 0)
    r = align("a b".split(), "a b c".split())
    assert (r.substitutions, r.insertions, r.deletions) == (0, 1, 0)
    r = align("a b c".split(), "a c".split())
    assert (r.substitutions, r.insertions, r.deletions) == (0, 0, 1)
    r = align("a b".split(), "b a".split())
    assert (r.substitutions, r.insertions, r.deletions) == (2, 0, 0)
    assert wer("a b", "") == 1.0
    assert wer("a", "b c d") == 3.0  # WER can exceed one
    with pytest.raises(ValueError, match="empty reference"):
        wer("", "a")


@lru_cache(maxsize=None)
def distance(a: str, b: str) -> int:
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(distance(a[1:], b[1:]) + (a[0] != b[0]), distance(a, b[1:]) + 1, distance(a[1:], b) + 1)


def test_wer_exhaustive_small_alphabet():
    words = [""] + ["".join(p) for k in range(1, 5) for p in itertools.product("abc", repeat=k)]
    for ref in words[1:]:
        for hyp in words:
            r = align(list(ref), list(hyp))
            assert r.errors == distance(ref, hyp), (ref, hyp)
            assert r.ref_len - r.deletions + r.insertions == len(hyp)
            assert r.rate == r.errors / len(ref)


@settings(max_examples=200, deadline=None)
@given(st.text("abc", min_size=1, max_size=6), st.text("abc", max_size=6))
def test_wer_matches_recursive_distance(ref, hyp):
    assert align(list(ref), list(hyp)).errors == distance(ref, hyp)


def test_corpus_wer(tmp_path):
    (tmp_path / "ref.txt").write_text("u1 the cat sat\nu2 on the mat\n\n")
    (tmp_path / "hyp.txt").write_text("u2 on mat\nu1 the hat sat down\n")
    refs = metrics.read_transcripts(tmp_path / "ref.txt")
    hyps = metrics.read_transcripts(tmp_path / "hyp.txt")
    r = corpus_wer(refs, hyps)
    assert (r.substitutions, r.deletions, r.insertions, r.ref_len) == (1, 1, 1, 6)
    assert r.rate == pytest.approx(0.5)
    with pytest.raises(ValueError, match="missing"):
        corpus_wer(refs, {"u1": ["x"]})
    (tmp_path / "dup.txt").write_text("u1 a\nu1 b\n")
    with pytest.raises(ValueError, match="duplicate"):
        metrics.read_transcripts(tmp_path / "dup.txt")


# --- report ---------------------------------------------------------------

def test_report_round_trip(tmp_path):
    rep = MetricsReport()
    rep.add("a", -6.0, 0.5, 1.0, 0.4, -6.0)
    rep.add("b", -6.0, 0.7, 3.0, 0.5, -6.0)
    rep.add("c", 3.0, 0.9, 10.0, 0.8, 3.0)
    agg = rep.aggregate()
    assert list(agg) == [-6.0, 3.0, "avg"]
    assert agg[-6.0] == pytest.approx(0.6) and agg["avg"] == pytest.approx(0.7)
    rep.write(tmp_path / "r.tsv")
    text = (tmp_path / "r.tsv").read_text()
    assert text.startswith("# summary\nmetric\tsystem\t-6\t3\tavg\nstoi\tmixture\t")
    back = MetricsReport.read(tmp_path / "r.tsv")
    assert back.records == rep.records


def test_report_without_mixture(tmp_path):
    rep = MetricsReport()
    rep.add("x", "all", 0.5, 2.0)
    rep.write(tmp_path / "r.tsv")
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[2].startswith("stoi\tprocessed\t0.5")
    assert not any(line.startswith("stoi\tmixture") for line in lines)
    assert MetricsReport.read(tmp_path / "r.tsv").records == rep.records
