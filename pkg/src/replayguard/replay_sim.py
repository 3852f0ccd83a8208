"""Synthetic bona-fide speech and simulated replay channels for desk-scale corpora.

A replayed copy is the bona-fide waveform passed through a playback/re-recording
chain: device impulse response, loudspeaker soft clipping, band limiting and
additive noise.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, fftconvolve, lfilter, sosfilt

from .audio_io import DEFAULT_RATE, Waveform, write_wav
from .manifest import Entry, Manifest

log = logging.getLogger("replayguard.replay_sim")

SPLITS = ("train", "dev", "eval")
BANDPASS_ORDER = 8


# ---------------------------------------------------------------------------
# Bona-fide source


def _smooth_walk(rng, n_knots: int, n: int, scale: float) -> np.ndarray:
    """Slowly varying random contour: a random walk on knots, linearly interpolated."""
    knots = np.cumsum(rng.normal(0.0, scale, n_knots))
    knots -= knots.mean()
    return np.interp(np.linspace(0, n_knots - 1, n), np.arange(n_knots), knots)


def synth_utterance(seed: int, duration_s: float = 2.0, sample_rate: int = DEFAULT_RATE) -> Waveform:
    """Speech-like harmonic signal, deterministic per seed.

    A glottal-like harmonic source with a drifting f0 is shaped by 2-4 slowly
    moving formant resonances and a syllable-rate envelope, plus a noise floor
    30 dB below the voiced signal.
    """
    if not 1.0 <= duration_s <= 10.0:
        raise ValueError(f"duration must lie in [1, 10] s, got {duration_s}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    n_knots = max(4, int(duration_s * 4))

    f0 = rng.uniform(90.0, 220.0) * np.exp(_smooth_walk(rng, n_knots, n, 0.06))
    f0 *= 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(4.0, 6.0) * np.arange(n) / sample_rate)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    n_formants = int(rng.integers(2, 5))
    base = np.sort(rng.uniform([300, 900, 2000, 3000][:n_formants], [900, 2000, 3000, 4500][:n_formants]))
    centres = base[:, None] * np.exp(_smooth_walk(rng, n_knots, n, 0.08))[None, :]
    bandwidths = rng.uniform(60.0, 200.0, n_formants)[:, None]

    n_harm = int(0.45 * sample_rate / f0.min())
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        fh = h * f0
        # resonance magnitude of every formant at this harmonic, plus a small floor
        gain = 0.05 + np.sum(1.0 / (1.0 + ((fh[None, :] - centres) / bandwidths) ** 2), axis=0)
        gain = np.where(fh < 0.48 * sample_rate, gain, 0.0)
        x += gain / h * np.sin(h * phase)

    syll = rng.uniform(3.0, 5.0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * syll * np.arange(n) / sample_rate + rng.uniform(0, 2 * np.pi)) ** 2
    x *= env
    x /= np.sqrt(np.mean(x**2))
    x += rng.standard_normal(n) * 10 ** (-30 / 20)
    target_rms = rng.uniform(0.05, 0.15)
    x *= target_rms / np.sqrt(np.mean(x**2))
    peak = np.max(np.abs(x))
    if peak > 0.95:
        x *= 0.95 / peak
    return Waveform(x, sample_rate)


# ---------------------------------------------------------------------------
# Replay channel


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    impulse_response: np.ndarray = field(default_factory=lambda: np.ones(1))
    bandpass: tuple = (0.0, float("inf"))  # (low_hz, high_hz); 0 / inf mean no edge
    snr_db: float = float("inf")
    drive: float = 0.0  # soft-clip drive, 0 is linear

    def __post_init__(self):
        ir = np.asarray(self.impulse_response, dtype=np.float64)
        if ir.ndim != 1 or ir.size == 0 or not np.all(np.isfinite(ir)):
            raise ValueError(f"{self.name}: impulse response must be a non-empty finite 1-D array")
        lo, hi = self.bandpass
        if not 0.0 <= lo < hi:
            raise ValueError(f"{self.name}: need 0 <= low < high, got {self.bandpass}")
        if self.drive < 0:
            raise ValueError(f"{self.name}: drive must be >= 0")
        object.__setattr__(self, "impulse_response", ir)

    @classmethod
    def identity(cls) -> "DeviceProfile":
        return cls("identity")


def _allpass_chain(rng, n_taps: int, n_sections: int, sample_rate: int) -> np.ndarray:
    """Impulse response of cascaded second-order allpass sections (flat magnitude)."""
    h = np.zeros(n_taps)
    h[0] = 1.0
    for _ in range(n_sections):
        r = rng.uniform(0.7, 0.95)
        theta = 2 * np.pi * rng.uniform(200.0, 7000.0) / sample_rate
        a = np.array([1.0, -2 * r * np.cos(theta), r * r])
        h = lfilter(a[::-1], a, h)
    return h


def _decaying_tail(rng, n_taps: int, t60_s: float, level: float, sample_rate: int) -> np.ndarray:
    t = np.arange(n_taps) / sample_rate
    return level * rng.standard_normal(n_taps) * 10 ** (-3 * t / t60_s)


def default_devices(sample_rate: int = DEFAULT_RATE) -> dict:
    """The three shipped device profiles, from easy (small) to hard (hifi) to detect."""
    rng = np.random.default_rng(20190)
    small_ir = np.zeros(96)
    small_ir[0] = 1.0
    small_ir += _decaying_tail(rng, 96, 0.004, 0.25, sample_rate)
    small_ir[[17, 41]] += [0.45, -0.3]  # cabinet reflections

    mid_ir = np.zeros(480)
    mid_ir[0] = 1.0
    mid_ir += _decaying_tail(rng, 480, 0.02, 0.12, sample_rate)

    hifi_ir = _allpass_chain(rng, 512, 6, sample_rate)
    hifi_ir += _decaying_tail(rng, 512, 0.01, 0.02, sample_rate)

    return {
        "small": DeviceProfile("small", small_ir, (300.0, 3400.0), 15.0, 0.3),
        "mid": DeviceProfile("mid", mid_ir, (100.0, 7000.0), 25.0, 0.1),
        "hifi": DeviceProfile("hifi", hifi_ir, (50.0, 7900.0), 35.0, 0.02),
    }


def _soft_clip(y: np.ndarray, drive: float) -> np.ndarray:
    if drive == 0:
        return y
    peak = np.max(np.abs(y))
    if peak == 0:
        return y
    k = 5.0 * drive
    return np.tanh(k * y / peak) / np.tanh(k) * peak


def _band_filter(y: np.ndarray, band, sample_rate: int) -> np.ndarray:
    nyq = sample_rate / 2.0
    lo, hi = band
    has_lo, has_hi = lo > 0, hi < nyq
    if not (has_lo or has_hi):
        return y
    if has_lo and has_hi:
        sos = butter(BANDPASS_ORDER, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    elif has_lo:
        sos = butter(BANDPASS_ORDER, lo, btype="highpass", fs=sample_rate, output="sos")
    else:
        sos = butter(BANDPASS_ORDER, hi, btype="lowpass", fs=sample_rate, output="sos")
    return sosfilt(sos, y)


def apply_replay_channel(w: Waveform, d: DeviceProfile, seed: int = 0) -> Waveform:
    """Pass ``w`` through the device: IR, soft clip, band limit, noise, peak renormalisation."""
    x = w.samples
    y = fftconvolve(x, d.impulse_response)[: len(x)] if d.impulse_response.size > 1 else x * d.impulse_response[0]
    y = _soft_clip(y, d.drive)
    y = _band_filter(y, d.bandpass, w.sample_rate)
    if np.isfinite(d.snr_db):
        p = np.mean(y**2)
        rng = np.random.default_rng(seed)
        y = y + rng.standard_normal(len(y)) * np.sqrt(p / 10 ** (d.snr_db / 10.0))
    peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
    if peak_out > 0 and peak_in > 0:
        y = y * (min(peak_in, 1.0) / peak_out)
    return Waveform(y, w.sample_rate)


# ---------------------------------------------------------------------------
# Corpus generation


@dataclass(frozen=True)
class CorpusConfig:
    n_bonafide: dict = field(default_factory=lambda: {"train": 200, "eval": 50})
    devices: tuple = ("small", "mid", "hifi")
    min_duration_s: float = 1.5
    max_duration_s: float = 3.0
    sample_rate: int = DEFAULT_RATE
    seed: int = 0


def _utt_seeds(seed: int, split: str, i: int):
    ss = np.random.SeedSequence([seed, SPLITS.index(split), i])
    s = ss.generate_state(3)
    return int(s[0]), int(s[1]), s[2] / 2**32


def generate_corpus(out_dir, cfg: CorpusConfig = CorpusConfig(), jobs: int = 1) -> dict:
    """Write WAVs, ``manifest.tsv`` and ``trials.tsv`` for each split under ``out_dir/<split>``.

    Every bona-fide utterance is replayed once through each device.  Utterance
    seeds are derived from (seed, split, index), so splits never share a source.
    Returns ``{split: Manifest}``.
    """
    devices = default_devices(cfg.sample_rate)
    unknown = [d for d in cfg.devices if d not in devices]
    if unknown or not cfg.devices:
        raise ValueError(f"unknown or empty device list {cfg.devices}; available: {sorted(devices)}")
    for split, n in cfg.n_bonafide.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        if n < 1:
            raise ValueError(f"split {split!r} needs at least one utterance")
    out_dir = Path(out_dir)
    manifests = {}
    for split, n in cfg.n_bonafide.items():
        split_dir = out_dir / split
        try:
            (split_dir / "wav").mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {split_dir}: {e}") from e

        def one(i, split=split, split_dir=split_dir):
            src_seed, chan_seed, u = _utt_seeds(cfg.seed, split, i)
            dur = cfg.min_duration_s + u * (cfg.max_duration_s - cfg.min_duration_s)
            w = synth_utterance(src_seed, round(dur, 2), cfg.sample_rate)
            uid = f"{split}_{i:05d}"
            write_wav(w, split_dir / "wav" / f"{uid}.wav")
            entries = [Entry(uid, f"wav/{uid}.wav", "bonafide")]
            for j, name in enumerate(cfg.devices):
                r = apply_replay_channel(w, devices[name], seed=chan_seed + j)
                sid = f"{uid}_{name}"
                write_wav(r, split_dir / "wav" / f"{sid}.wav")
                entries.append(Entry(sid, f"wav/{sid}.wav", "spoof", name))
            return entries

        if jobs > 1:
            with ThreadPoolExecutor(jobs) as ex:
                groups = list(ex.map(one, range(n)))
        else:
            groups = [one(i) for i in range(n)]
        m = Manifest([e for g in groups for e in g], split_dir)
        m.write(split_dir / "manifest.tsv")
        m.write_trials(split_dir / "trials.tsv")
        log.info("%s: %d bonafide, %d spoof", split, n, n * len(cfg.devices))
        manifests[split] = m
    return manifests
