"""Filterbank cepstra (LFCC, IMFCC) and constant-Q cepstral coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit
from .audio_io import Waveform
from .spectral import StftConfig, stft_frames

FILTERBANK_KINDS = ("linear", "mel", "inverted_mel")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class Filterbank:
    kind: str
    weights: np.ndarray  # (n_filters, n_fft // 2 + 1)
    centers: np.ndarray
    edges: np.ndarray  # n_filters + 2 points: left edge, centres, right edge
    f_low: float
    f_high: float

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]

    def apply(self, power: np.ndarray) -> np.ndarray:
        """Filter energies for power spectra with bins on the last axis."""
        return power @ self.weights.T


def _triangles(points: np.ndarray, bin_freqs: np.ndarray) -> np.ndarray:
    lo, mid, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    f = bin_freqs[None, :]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def build_filterbank(kind: str, n_filters: int = 20, n_fft: int = 1024, sample_rate: int = 16000,
                     f_low: float = 0.0, f_high: float | None = None) -> Filterbank:
    """Triangular filterbank on a linear, mel or inverted-mel frequency axis.

    The inverted-mel bank mirrors the mel bank across the band, f -> f_low + f_high - f,
    so its filters are narrow and dense at high frequencies.
    """
    if f_high is None:
        f_high = sample_rate / 2.0
    if kind not in FILTERBANK_KINDS:
        raise ValueError(f"unknown filterbank kind {kind!r}; expected one of {FILTERBANK_KINDS}")
    if not 0 <= f_low < f_high <= sample_rate / 2.0:
        raise ValueError(f"need 0 <= f_low < f_high <= {sample_rate / 2}, got [{f_low}, {f_high}]")
    if n_filters < 1:
        raise ValueError("n_filters must be positive")
    if kind == "linear":
        points = np.linspace(f_low, f_high, n_filters + 2)
    else:
        points = mel_to_hz(np.linspace(hz_to_mel(f_low), hz_to_mel(f_high), n_filters + 2))
        if kind == "inverted_mel":
            points = (f_low + f_high - points)[::-1]
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    weights = _triangles(points, bin_freqs)
    return Filterbank(kind, weights, points[1:-1].copy(), points, float(f_low), float(f_high))


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """First ``n_out`` rows of the orthonormal DCT-II matrix of size ``n_in``."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    M = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    M[0] /= np.sqrt(2.0)
    return M


def add_deltas(static: np.ndarray, window: int = 2) -> np.ndarray:
    """Stack [static; delta; delta-delta] along the coefficient axis.

    ``static`` is (D, L) or (1, D, L); deltas use the regression formula with
    edge frames replicated.
    """
    squeeze = static.ndim == 3
    c = static[0] if squeeze else static
    d1 = deltas(c, window)
    d2 = deltas(d1, window)
    out = np.concatenate([c, d1, d2], axis=0)
    return out[None] if squeeze else out


def deltas(c: np.ndarray, window: int = 2) -> np.ndarray:
    L = c.shape[1]
    padded = np.pad(c, ((0, 0), (window, window)), mode="edge")
    num = np.zeros_like(c, dtype=np.float64)
    for n in range(1, window + 1):
        num += n * (padded[:, window + n : window + n + L] - padded[:, window - n : window - n + L])
    return num / (2.0 * sum(n * n for n in range(1, window + 1)))


@dataclass(frozen=True)
class CepstraConfig:
    n_static: int = 20
    n_filters: int = 20
    with_deltas: bool = True
    delta_window: int = 2
    f_low: float = 0.0
    f_high: float | None = None


_CEPSTRA_BANKS = {"lfcc": "linear", "imfcc": "inverted_mel", "mfcc": "mel"}


def cepstra(w: Waveform, kind: str = "lfcc", cfg: CepstraConfig = CepstraConfig(),
            stft_cfg: StftConfig = StftConfig()) -> np.ndarray:
    """LFCC or IMFCC, shape (1, n_static * 3, L) with deltas."""
    if kind not in _CEPSTRA_BANKS:
        raise ValueError(f"unknown cepstral kind {kind!r}")
    fb = build_filterbank(_CEPSTRA_BANKS[kind], cfg.n_filters, stft_cfg.n_fft, w.sample_rate, cfg.f_low, cfg.f_high)
    X = stft_frames(w, stft_cfg)
    power = X.real**2 + X.imag**2
    logE = np.log(fb.apply(power) + stft_cfg.log_floor_eps)
    static = dct_matrix(cfg.n_static, fb.n_filters) @ logE.T
    out = add_deltas(static, cfg.delta_window) if cfg.with_deltas else static
    return out[None]


# ---------------------------------------------------------------------------
# Constant-Q transform, evaluated directly (one windowed inner product per
# bin and frame).


@dataclass(frozen=True)
class CqtConfig:
    bins_per_octave: int = 96
    f_min: float | None = None  # default f_max / 2**9
    f_max: float | None = None  # default Nyquist
    resample_period: int = 16
    n_ceps: int = 29  # plus the 0th coefficient
    hop_ms: float = 10.0
    log_eps: float = 1e-10
    with_deltas: bool = True
    delta_window: int = 2

    def band(self, sample_rate: int):
        f_max = sample_rate / 2.0 if self.f_max is None else float(self.f_max)
        f_min = f_max / 2.0**9 if self.f_min is None else float(self.f_min)
        if not 0 < f_min < f_max <= sample_rate / 2.0:
            raise ValueError(f"need 0 < f_min < f_max <= {sample_rate / 2}, got [{f_min}, {f_max}]")
        if self.bins_per_octave <= 0:
            raise ValueError("bins_per_octave must be positive")
        return f_min, f_max

    @property
    def Q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)


def cqt_bins(cfg: CqtConfig, sample_rate: int):
    """Centre frequencies f_k and window lengths N_k = ceil(Q fs / f_k)."""
    f_min, f_max = cfg.band(sample_rate)
    K = int(round(cfg.bins_per_octave * math.log2(f_max / f_min)))
    freqs = f_min * 2.0 ** (np.arange(K) / cfg.bins_per_octave)
    lengths = np.ceil(cfg.Q * sample_rate / freqs).astype(np.int64)
    return freqs, lengths


@njit(fastmath=True)
def _cqt_direct_nb(x, kre, kim, offsets, lengths, starts, out_re, out_im):
    K = lengths.shape[0]
    L = starts.shape[1]
    for k in range(K):
        o = offsets[k]
        n = lengths[k]
        for t in range(L):
            s = starts[k, t]
            ar = 0.0
            ai = 0.0
            for i in range(n):
                v = x[s + i]
                ar += v * kre[o + i]
                ai += v * kim[o + i]
            out_re[k, t] = ar
            out_im[k, t] = ai


def cqt(w: Waveform, cfg: CqtConfig = CqtConfig()) -> np.ndarray:
    """Complex CQT coefficients, shape (K, L); frames 10 ms apart.

    Every bin's Hann-windowed kernel is centred on the same frame centre; the
    first centre sits half the longest window into the signal.
    """
    sr = w.sample_rate
    freqs, lengths = cqt_bins(cfg, sr)
    n_max = int(lengths.max())
    if len(w) < n_max:
        raise ValueError(
            f"utterance has {len(w)} samples but the {freqs[0]:.2f} Hz bin needs a "
            f"{n_max}-sample window ({n_max / sr:.3f} s minimum)"
        )
    hop = int(round(sr * cfg.hop_ms / 1000.0))
    L = 1 + (len(w) - n_max) // hop
    centres = n_max // 2 + hop * np.arange(L)
    starts = centres[None, :] - (lengths // 2)[:, None]
    kernels = []
    for f, n in zip(freqs, lengths):
        win = np.hanning(n + 2)[1:-1]  # strictly positive taps
        kernels.append(win / win.sum() * np.exp(-2j * np.pi * f * np.arange(n) / sr))
    x = w.samples
    if _accel.USE_NUMBA:
        flat = np.concatenate(kernels)
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        re = np.empty((len(freqs), L))
        im = np.empty((len(freqs), L))
        _cqt_direct_nb(x, flat.real.copy(), flat.imag.copy(), offsets, lengths, np.ascontiguousarray(starts), re, im)
        return re + 1j * im
    out = np.empty((len(freqs), L), dtype=np.complex128)
    for k, ker in enumerate(kernels):
        segs = sliding_window_view(x, lengths[k])[starts[k]]
        out[k] = segs @ ker
    return out


def uniform_grid(freqs: np.ndarray, f_min: float, period: int) -> np.ndarray:
    """Linear frequency grid with step f_min / period, covering the CQT bins."""
    step = f_min / period
    n = int(np.floor((freqs[-1] - freqs[0]) / step + 1e-9)) + 1
    return freqs[0] + step * np.arange(n)


def cqcc(w: Waveform, cfg: CqtConfig = CqtConfig()) -> np.ndarray:
    """Constant-Q cepstral coefficients, shape (1, (n_ceps + 1) * 3, L) with deltas."""
    C = cqt(w, cfg)
    logp = np.log(C.real**2 + C.imag**2 + cfg.log_eps)
    freqs, _ = cqt_bins(cfg, w.sample_rate)
    f_min, _ = cfg.band(w.sample_rate)
    grid = uniform_grid(freqs, f_min, cfg.resample_period)
    # linear interpolation of each frame's log spectrum onto the uniform grid
    idx = np.clip(np.searchsorted(freqs, grid, side="right") - 1, 0, len(freqs) - 2)
    a = (grid - freqs[idx]) / (freqs[idx + 1] - freqs[idx])
    resampled = logp[idx] * (1.0 - a)[:, None] + logp[idx + 1] * a[:, None]
    static = dct_matrix(cfg.n_ceps + 1, len(grid)) @ resampled
    out = add_deltas(static, cfg.delta_window) if cfg.with_deltas else static
    return out[None]
