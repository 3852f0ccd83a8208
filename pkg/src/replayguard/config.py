"""Flat ``key = value`` run configuration with typed defaults."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .evaluation import parse_kv

# every recognised key and its default; the default's type is the key's type
DEFAULTS = {
    "seed": 0,
    "sample_rate": 16000,
    "jobs": 1,
    "deterministic": True,
    # corpus synthesis
    "n_bonafide": 200,
    "n_dev": 0,
    "n_eval": 50,
    "devices": "small,mid,hifi",
    "min_duration_s": 1.5,
    "max_duration_s": 3.0,
    # augmentation
    "speed_factors": "0.9,1.0,1.1",
    # features
    "feature": "gd_gram",
    "n_fft": 1024,
    "frame_len_ms": 25.0,
    "hop_ms": 10.0,
    "window": "hamming",
    "log_floor_eps": 1e-10,
    "gd_rel_eps": 1e-8,
    "n_static": 20,
    "n_filters": 20,
    "with_deltas": True,
    "delta_window": 2,
    "cqt_bins_per_octave": 96,
    "cqt_f_min": 0.0,  # 0 selects f_max / 2**9
    "cqt_f_max": 0.0,  # 0 selects Nyquist
    "cqt_resample_period": 16,
    "cqt_n_ceps": 29,
    # GMM back-end
    "gmm_components": 512,
    "gmm_iters": 10,
    "gmm_max_frames": 0,  # 0 uses every frame
    # network
    "preset": "desk",
    "epochs": 20,
    "batch_size": 32,
    "min_frames": 150,
    "max_frames": 350,
    "lr_schedule": "0.1,0.01,0.001",
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "plateau_patience": 3,
    "plateau_rel_tol": 1e-3,
    "score_kind": "logsoftmax",
    # metrics
    "tdcf_config": "",  # empty selects the bundled neutral-ASV constants
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(value, type(default)) and not (isinstance(default, float) and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        cfg.update(parse_kv(text, source), source)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such config file: {path}")
        return cls.from_text(path.read_text(), str(path))

    def update(self, kv: dict, source: str = "<overrides>") -> None:
        unknown = sorted(set(kv) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{source}: unknown keys {unknown}")
        for k, v in kv.items():
            if v is not None:
                self.values[k] = _coerce(k, v)

    def __getitem__(self, key: str):
        return self.values[key]

    def format(self) -> str:
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(v) if isinstance(v, float) else str(v)

        return "".join(f"{k} = {fmt(self.values[k])}\n" for k in DEFAULTS)

    def write(self, path) -> None:
        Path(path).write_text(self.format())


def float_list(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None
