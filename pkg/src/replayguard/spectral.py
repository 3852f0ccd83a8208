"""Short-time spectra and the magnitude / phase grams built on them.

Feature tensors are plain float arrays of shape (channels, bins, frames).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import Waveform

N_GRAM_BINS = 512


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    frame_len_ms: float = 25.0
    hop_ms: float = 10.0
    window: str = "hamming"
    log_floor_eps: float = 1e-10
    # group-delay denominator floor, relative to the frame's peak power
    gd_rel_eps: float = 1e-8

    def frame_len(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.frame_len_ms / 1000.0))

    def hop(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.hop_ms / 1000.0))

    def taps(self, n: int) -> np.ndarray:
        if self.window == "hamming":
            return np.hamming(n)
        if self.window == "hann":
            return np.hanning(n)
        if self.window in ("rect", "rectangular", "boxcar"):
            return np.ones(n)
        raise ValueError(f"unknown window {self.window!r}")


def n_frames(n_samples: int, frame: int, hop: int) -> int:
    return 1 + (n_samples - frame) // hop


def frame_signal(w: Waveform, cfg: StftConfig) -> np.ndarray:
    """(L, frame_len) matrix of windowed frames; a partial tail frame is dropped."""
    frame, hop = cfg.frame_len(w.sample_rate), cfg.hop(w.sample_rate)
    if frame > cfg.n_fft:
        raise ValueError(f"frame of {frame} samples exceeds n_fft={cfg.n_fft}")
    if len(w) < frame:
        raise ValueError(f"waveform has {len(w)} samples, shorter than one {frame}-sample frame")
    frames = sliding_window_view(w.samples, frame)[::hop]
    return frames * cfg.taps(frame)


def stft_frames(w: Waveform, cfg: StftConfig = StftConfig(), ramp: bool = False) -> np.ndarray:
    """Complex half-spectra (L, n_fft/2 + 1) of the windowed frames.

    With ``ramp`` each windowed frame is multiplied by its local sample index
    n = 0, 1, ... before the DFT, which gives the transform of n x(n).
    """
    frames = frame_signal(w, cfg)
    if ramp:
        frames = frames * np.arange(frames.shape[1])
    return np.fft.rfft(frames, n=cfg.n_fft, axis=1)


def _gram_bins(spec: np.ndarray) -> np.ndarray:
    # drop DC, keep bins 1..512, frames on the last axis
    return spec[:, 1 : N_GRAM_BINS + 1].T


def stft_gram(w: Waveform, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Log power spectrogram, shape (1, 512, L)."""
    X = stft_frames(w, cfg)
    power = X.real**2 + X.imag**2
    return np.log(_gram_bins(power) + cfg.log_floor_eps)[None]


def group_delay(X: np.ndarray, Y: np.ndarray, rel_eps: float = 1e-8) -> np.ndarray:
    """Group delay from the spectra of x(n) and n x(n), frame-wise on axis 0."""
    power = X.real**2 + X.imag**2
    floor = rel_eps * power.max(axis=-1, keepdims=True)
    den = np.maximum(power, np.maximum(floor, np.finfo(np.float64).tiny))
    return (X.real * Y.real + X.imag * Y.imag) / den


def gd_gram(w: Waveform, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Group-delay gram, shape (1, 512, L)."""
    frames = frame_signal(w, cfg)
    X = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    Y = np.fft.rfft(frames * np.arange(frames.shape[1]), n=cfg.n_fft, axis=1)
    tau = group_delay(X, Y, cfg.gd_rel_eps)
    return _gram_bins(tau)[None]


def joint_gram(stft: np.ndarray, gd: np.ndarray) -> np.ndarray:
    """Stack a 1-channel STFT gram and GD gram into a 2-channel tensor."""
    if stft.ndim != 3 or gd.ndim != 3 or stft.shape[0] != 1 or gd.shape[0] != 1:
        raise ValueError(f"expected two (1, D, L) grams, got {stft.shape} and {gd.shape}")
    if stft.shape != gd.shape:
        raise ValueError(f"gram shapes differ: {stft.shape} vs {gd.shape}")
    return np.concatenate([stft, gd], axis=0)


def joint_gram_of(w: Waveform, cfg: StftConfig = StftConfig()) -> np.ndarray:
    return joint_gram(stft_gram(w, cfg), gd_gram(w, cfg))


# ---------------------------------------------------------------------------
# ASPF feature files: magic, u32 version, u32 C, u32 D, u32 L, then C*D*L
# little-endian float32 in (channel, bin, frame) order.

_FEAT_MAGIC = b"ASPF"
_FEAT_VERSION = 1


class FeatureFileError(ValueError):
    pass


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 3:
        raise ValueError(f"features must be (C, D, L), got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("refusing to write non-finite features")
    C, D, L = feats.shape
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC + struct.pack("<4I", _FEAT_VERSION, C, D, L))
        f.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such feature file: {path}")
    raw = path.read_bytes()
    if raw[:4] != _FEAT_MAGIC or len(raw) < 20:
        raise FeatureFileError(f"{path}: not an ASPF feature file")
    version, C, D, L = struct.unpack("<4I", raw[4:20])
    if version != _FEAT_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=20)
    if body.size != C * D * L:
        raise FeatureFileError(f"{path}: expected {C * D * L} values, found {body.size}")
    return body.reshape(C, D, L).astype(np.float32)
