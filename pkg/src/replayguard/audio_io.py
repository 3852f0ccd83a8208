"""PCM WAV I/O, band-limited resampling and speed perturbation."""

from __future__ import annotations

import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

from .manifest import Entry, Manifest

DEFAULT_RATE = 16000
DEFAULT_FACTORS = (0.9, 1.0, 1.1)
# half-width of the windowed-sinc kernel, in samples of the slower rate
KERNEL_HALF_TAPS = 32
KAISER_BETA = 8.0


class AudioFormatError(ValueError):
    """The file is not 16-bit mono PCM WAV."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {x.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        if x is self.samples:
            x = x.copy()
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a 16-bit mono PCM WAV, scaling samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as f:
            if f.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compression type {f.getcomptype()!r}, expected PCM")
            if f.getsampwidth() != 2:
                raise AudioFormatError(f"{path}: sample width {8 * f.getsampwidth()} bits, expected 16")
            if f.getnchannels() != 1:
                raise AudioFormatError(f"{path}: channel count {f.getnchannels()}, expected 1")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"{path}: not a RIFF/WAVE PCM file ({e})") from e
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if data.size == 0:
        raise AudioFormatError(f"{path}: data chunk is empty")
    return Waveform(data, rate)


def to_int16(samples) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(w: Waveform, path) -> None:
    """Write 16-bit mono PCM; values are clamped to [-1, 1) first."""
    path = Path(path)
    try:
        with wave.open(str(path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(int(w.sample_rate))
            f.writeframes(to_int16(w.samples).tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def _resample_ratio(x: np.ndarray, up: int, down: int) -> np.ndarray:
    if up == down:
        return np.array(x, dtype=np.float64)
    m = max(up, down)
    taps = firwin(2 * KERNEL_HALF_TAPS * m + 1, 1.0 / m, window=("kaiser", KAISER_BETA)) * up
    y = resample_poly(np.asarray(x, dtype=np.float64), up, down, window=taps)
    n_out = int(round(len(x) * up / down))
    return y[:n_out]


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Windowed-sinc polyphase resampling to ``target_rate``."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    r = Fraction(int(target_rate), int(w.sample_rate))
    return Waveform(_resample_ratio(w.samples, r.numerator, r.denominator), int(target_rate))


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Play back ``factor`` times faster: tempo and pitch both scale, rate header unchanged."""
    if factor <= 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return w
    r = Fraction(1.0 / factor).limit_denominator(1000)
    y = _resample_ratio(w.samples, r.numerator, r.denominator)
    n_out = int(round(len(w) / factor))
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return Waveform(y[:n_out], w.sample_rate)


def format_factor(f: float) -> str:
    return repr(float(f))


def parse_factors(text: str) -> tuple:
    try:
        factors = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise ValueError(f"bad factor list {text!r}") from e
    if not factors or any(f <= 0 for f in factors):
        raise ValueError(f"factors must be positive, got {text!r}")
    return factors


def load_audio(path, sample_rate: int = DEFAULT_RATE) -> Waveform:
    """Read a WAV and resample it to ``sample_rate`` if needed."""
    return resample(read_wav(path), sample_rate)


def augment_manifest(manifest, out_dir, factors=DEFAULT_FACTORS, jobs: int = 1):
    """Write one speed-perturbed copy per factor for every entry.

    Copies are named ``<stem>.sp<factor>.wav`` under ``out_dir``; the returned
    manifest (rooted at ``out_dir``) has ``len(factors)`` times the entries.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(e):
        src = manifest.path_of(e)
        w = load_audio(src)
        stem = Path(e.relpath).stem
        made = []
        for f in factors:
            name = f"{stem}.sp{format_factor(f)}.wav"
            write_wav(speed_perturb(w, f), out_dir / name)
            made.append(Entry(f"{e.utt_id}.sp{format_factor(f)}", name, e.label, e.device, e.factor * f))
        return made

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            groups = list(ex.map(one, manifest.entries))
    else:
        groups = [one(e) for e in manifest.entries]
    return Manifest([e for g in groups for e in g], out_dir)
