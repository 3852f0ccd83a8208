from __future__ import annotations

import math
import time

import numpy as np
import pytest
from scipy.fft import dct

from replayguard import _accel
from replayguard import cepstral as C
from replayguard.audio_io import Waveform

SMALL_CQT = C.CqtConfig(f_min=250.0)


def noise(n=16000, seed=0, scale=0.1):
    return Waveform(np.random.default_rng(seed).standard_normal(n) * scale)


# --- filterbanks -----------------------------------------------------------


def test_linear_centres():
    fb = C.build_filterbank("linear", 20, 1024, 16000)
    np.testing.assert_allclose(fb.centers, 8000 * np.arange(1, 21) / 21)


@pytest.mark.parametrize("kind", C.FILTERBANK_KINDS)
def test_filters_are_triangular(kind):
    fb = C.build_filterbank(kind, 20, 1024, 16000)
    assert fb.weights.shape == (20, 513)
    assert np.all(fb.weights >= 0)
    assert np.all(np.diff(fb.centers) > 0)
    for row in fb.weights:
        nz = np.flatnonzero(row)
        peak = np.argmax(row)
        # rises to one peak then falls
        assert np.all(np.diff(row[nz[0] : peak + 1]) >= 0)
        assert np.all(np.diff(row[peak : nz[-1] + 1]) <= 0)


def test_mel_rows_peak_normalise_to_one():
    fb = C.build_filterbank("mel", 20, 1024, 16000)
    sums = fb.weights.sum(1)
    assert np.all(sums > 0)
    np.testing.assert_allclose((fb.weights / fb.weights.max(1, keepdims=True)).max(1), 1.0)


def test_mel_centres_equally_spaced_in_mel():
    fb = C.build_filterbank("mel", 20, 1024, 16000)
    m = 2595 * np.log10(1 + fb.edges / 700)
    np.testing.assert_allclose(np.diff(m), np.diff(m)[0])


def test_inverted_mel_mirrors_mel():
    mel = C.build_filterbank("mel", 20, 1024, 16000)
    imel = C.build_filterbank("inverted_mel", 20, 1024, 16000)
    # bin k sits at k*fs/n_fft, so f -> 8000 - f maps bin k onto bin 512 - k
    np.testing.assert_allclose(imel.weights, mel.weights[::-1, ::-1], atol=1e-12)
    # dense at the top of the band
    assert np.diff(imel.centers)[-1] < np.diff(imel.centers)[0]


def test_mirror_property_on_spectra():
    rng = np.random.default_rng(1)
    S = rng.uniform(0, 1, 513)
    mel = C.build_filterbank("mel", 20, 1024, 16000)
    imel = C.build_filterbank("inverted_mel", 20, 1024, 16000)
    np.testing.assert_allclose(imel.apply(S), mel.apply(S[::-1])[::-1], atol=1e-12)


def test_filterbank_monotone():
    fb = C.build_filterbank("linear", 20, 1024, 16000)
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, 513)
    assert np.all(fb.apply(a + rng.uniform(0, 1, 513)) >= fb.apply(a))


@pytest.mark.parametrize("lo,hi", [(-1, 8000), (100, 100), (0, 9000)])
def test_filterbank_band_checks(lo, hi):
    with pytest.raises(ValueError):
        C.build_filterbank("linear", 20, 1024, 16000, lo, hi)


def test_dct_is_orthonormal_and_matches_scipy():
    M = C.dct_matrix(20, 20)
    np.testing.assert_allclose(M.T @ M, np.eye(20), atol=1e-10)
    x = np.random.default_rng(3).standard_normal(20)
    np.testing.assert_allclose(M @ x, dct(x, type=2, norm="ortho"), atol=1e-12)


# --- deltas ----------------------------------------------------------------


def brute_deltas(c, W):
    D, L = c.shape
    out = np.zeros_like(c)
    den = 2 * sum(n * n for n in range(1, W + 1))
    for t in range(L):
        for n in range(1, W + 1):
            out[:, t] += n * (c[:, min(t + n, L - 1)] - c[:, max(t - n, 0)])
    return out / den


def test_deltas_of_constant_are_zero():
    out = C.add_deltas(np.full((3, 8), 2.5))
    assert out.shape == (9, 8)
    assert np.all(out[3:] == 0)


def test_deltas_of_ramp():
    c = np.tile(np.arange(12.0), (2, 1))
    out = C.add_deltas(c, 2)
    np.testing.assert_allclose(out[2:4, 4:8], 1.0)
    np.testing.assert_allclose(out[4:6, 4:8], 0.0, atol=1e-12)


def test_deltas_match_direct_formula():
    c = np.random.default_rng(4).standard_normal((20, 10))
    out = C.add_deltas(c, 2)
    d1 = brute_deltas(c, 2)
    np.testing.assert_allclose(out[20:40], d1, atol=1e-12)
    np.testing.assert_allclose(out[40:], brute_deltas(d1, 2), atol=1e-12)


def test_deltas_single_frame():
    assert np.all(C.add_deltas(np.ones((4, 1)))[4:] == 0)


# --- LFCC / IMFCC ----------------------------------------------------------


def straight_line_cepstra(x, kind):
    """Independent loop-based pipeline: frame, window, |FFT|^2, filterbank, log, DCT."""
    frames = [x[s : s + 400] * np.hamming(400) for s in range(0, len(x) - 399, 160)]
    nyq = 8000.0
    if kind == "lfcc":
        pts = [nyq * i / 21 for i in range(22)]
    else:
        mel = lambda f: 2595 * math.log10(1 + f / 700)  # noqa: E731
        imel = lambda m: 700 * (10 ** (m / 2595) - 1)  # noqa: E731
        pts = [nyq - imel(mel(nyq) * i / 21) for i in range(22)][::-1]
    freqs = [k * 16000 / 1024 for k in range(513)]
    out = []
    for fr in frames:
        P = np.abs(np.fft.rfft(fr, 1024)) ** 2
        E = []
        for j in range(20):
            lo, mid, hi = pts[j], pts[j + 1], pts[j + 2]
            e = 0.0
            for k, f in enumerate(freqs):
                if lo < f < hi:
                    e += P[k] * ((f - lo) / (mid - lo) if f <= mid else (hi - f) / (hi - mid))
            E.append(math.log(e + 1e-10))
        c = [
            sum(E[n] * math.cos(math.pi * q * (2 * n + 1) / 40) for n in range(20)) * math.sqrt((1 if q == 0 else 2) / 20)
            for q in range(20)
        ]
        out.append(c)
    return np.array(out).T


@pytest.mark.parametrize("kind", ["lfcc", "imfcc"])
def test_cepstra_match_straight_line_pipeline(kind):
    w = noise(3200, seed=5)
    got = C.cepstra(w, kind)
    assert got.shape == (1, 60, 18)
    np.testing.assert_allclose(got[0, :20], straight_line_cepstra(w.samples, kind), atol=1e-6)


def test_lfcc_and_imfcc_differ():
    w = noise(3200)
    assert not np.allclose(C.cepstra(w, "lfcc"), C.cepstra(w, "imfcc"))


def test_cepstra_of_silence():
    for kind in ("lfcc", "imfcc"):
        c = C.cepstra(Waveform(np.zeros(1600)), kind)
        assert np.all(np.isfinite(c))
        np.testing.assert_allclose(c[0, 0], math.sqrt(20) * math.log(1e-10))
        np.testing.assert_allclose(c[0, 1:20], 0.0, atol=1e-9)


def test_cepstra_without_deltas():
    assert C.cepstra(noise(1600), "lfcc", C.CepstraConfig(with_deltas=False)).shape == (1, 20, 8)


# --- CQT / CQCC ------------------------------------------------------------


def test_cqt_bin_layout_defaults():
    cfg = C.CqtConfig()
    freqs, lengths = C.cqt_bins(cfg, 16000)
    assert len(freqs) == 96 * 9
    assert freqs[0] == pytest.approx(8000 / 512)
    np.testing.assert_allclose(freqs[96::96] / freqs[:-96:96], 2.0)
    q_fs = cfg.Q * 16000
    assert np.all(lengths * freqs >= q_fs - 1e-6)
    assert np.all((lengths - 1) * freqs < q_fs)


def test_cqt_bin_count_other_range():
    freqs, _ = C.cqt_bins(C.CqtConfig(f_min=31.25), 16000)
    assert len(freqs) == round(96 * math.log2(8000 / 31.25))


def test_cqt_sine_peaks_at_its_bin():
    freqs, _ = C.cqt_bins(SMALL_CQT, 16000)
    for k in (0, 77, 300):
        x = np.sin(2 * np.pi * freqs[k] * np.arange(16000) / 16000)
        mag = np.abs(C.cqt(Waveform(x), SMALL_CQT))
        assert np.all(mag.argmax(0) == k)


def test_cqt_matches_direct_inner_product():
    w = noise(16000, seed=6)
    X = C.cqt(w, SMALL_CQT)
    freqs, lengths = C.cqt_bins(SMALL_CQT, 16000)
    centre = lengths.max() // 2 + 160 * 4
    for k in (0, 150, 479):
        n = lengths[k]
        start = centre - n // 2
        win = np.hanning(n + 2)[1:-1]
        ref = sum(w.samples[start + i] * win[i] * np.exp(-2j * np.pi * freqs[k] * i / 16000) for i in range(n)) / win.sum()
        assert X[k, 4] == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_cqt_backends_agree(monkeypatch):
    w = noise(16000, seed=7)
    fast = C.cqt(w, SMALL_CQT)
    monkeypatch.setattr(_accel, "USE_NUMBA", False)
    slow = C.cqt(w, SMALL_CQT)
    np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_cqt_too_short_reports_minimum():
    with pytest.raises(ValueError, match=r"8\.\d+ s minimum"):
        C.cqt(noise(16000), C.CqtConfig())


def test_cqt_config_checks():
    with pytest.raises(ValueError):
        C.cqt_bins(C.CqtConfig(f_min=9000.0), 16000)
    with pytest.raises(ValueError):
        C.cqt_bins(C.CqtConfig(bins_per_octave=0), 16000)


def test_cqcc_dims_and_silence():
    c = C.cqcc(noise(16000), SMALL_CQT)
    assert c.shape[:2] == (1, 90)
    z = C.cqcc(Waveform(np.zeros(16000)), SMALL_CQT)
    assert np.all(np.isfinite(z))
    assert np.all(z[0, 0] != 0)
    np.testing.assert_allclose(z[0, 1:30], 0.0, atol=1e-9)


def test_cqcc_gain_moves_only_c0():
    # a tiny floor keeps the log exactly additive in the gain
    cfg = C.CqtConfig(f_min=250.0, log_eps=1e-30)
    w = noise(16000, seed=8)
    a = C.cqcc(w, cfg)
    b = C.cqcc(Waveform(w.samples * 3.0), cfg)
    assert np.all(np.abs(b[0, 0] - a[0, 0]) > 1.0)
    np.testing.assert_allclose(b[0, 1:30], a[0, 1:30], atol=1e-9)


def test_uniform_grid_spacing():
    freqs, _ = C.cqt_bins(SMALL_CQT, 16000)
    g = C.uniform_grid(freqs, 250.0, 16)
    np.testing.assert_allclose(np.diff(g), 250.0 / 16)
    assert g[0] == freqs[0] and g[-1] <= freqs[-1]


def test_cqt_time_budget():
    # ten seconds of audio at the default 864-bin layout; guards against pathological slowness
    w = Waveform(np.random.default_rng(4).standard_normal(160000) * 0.1)
    C.cqt(Waveform(w.samples[:16000]), C.CqtConfig(f_min=250.0))  # compile outside the timed call
    t = time.perf_counter()
    assert C.cqt(w).shape[0] == 864
    assert time.perf_counter() - t < 20.0
