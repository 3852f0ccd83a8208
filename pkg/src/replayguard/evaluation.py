"""Detection metrics (EER, min-tDCF), score/trial files and score-level fusion."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .manifest import LABELS


class ScoreFileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Score and trial files


def _read_pairs(path, what: str):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such {what} file: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ScoreFileError(f"{path}:{n}: expected 2 tab-separated fields, got {len(parts)}")
        key, value = parts[0], parts[1].strip()
        if key in out:
            raise ScoreFileError(f"{path}:{n}: duplicate id {key!r}")
        out[key] = (n, value)
    return path, out


def read_scores(path) -> dict:
    path, pairs = _read_pairs(path, "score")
    scores = {}
    for key, (n, value) in pairs.items():
        try:
            s = float(value)
        except ValueError:
            raise ScoreFileError(f"{path}:{n}: bad score {value!r}") from None
        if not math.isfinite(s):
            raise ScoreFileError(f"{path}:{n}: non-finite score for {key!r}")
        scores[key] = s
    return scores


def write_scores(scores: dict, path) -> None:
    Path(path).write_text("".join(f"{k}\t{float(v)!r}\n" for k, v in scores.items()))


def read_trials(path) -> dict:
    path, pairs = _read_pairs(path, "trial")
    trials = {}
    for key, (n, value) in pairs.items():
        if value not in LABELS:
            raise ScoreFileError(f"{path}:{n}: label {value!r} not in {LABELS}")
        trials[key] = value
    return trials


def split_by_label(scores: dict, trials: dict):
    """Bona-fide and spoof score arrays for the trial IDs."""
    missing = [k for k in trials if k not in scores]
    if missing:
        raise ScoreFileError(f"{len(missing)} trial ids have no score, e.g. {missing[:5]}")
    bona = np.array([scores[k] for k, lab in trials.items() if lab == "bonafide"], dtype=np.float64)
    spoof = np.array([scores[k] for k, lab in trials.items() if lab == "spoof"], dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("trial set needs at least one bonafide and one spoof trial")
    return bona, spoof


# ---------------------------------------------------------------------------
# Error rates


def error_rates(bona: np.ndarray, spoof: np.ndarray):
    """Miss and false-alarm rates at every candidate threshold.

    Thresholds are the sorted distinct scores followed by +inf.  At threshold
    t a trial is accepted as bona fide when its score is >= t, so
    FRR(t) = P(bona < t) and FAR(t) = P(spoof >= t).
    """
    bona = np.asarray(bona, dtype=np.float64)
    spoof = np.asarray(spoof, dtype=np.float64)
    thr = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    frr = np.searchsorted(np.sort(bona), thr, side="left") / bona.size
    far = 1.0 - np.searchsorted(np.sort(spoof), thr, side="left") / spoof.size
    return frr, far, thr


def eer_from_arrays(bona, spoof):
    """(EER, threshold) from raw bona-fide and spoof score arrays."""
    frr, far, thr = error_rates(bona, spoof)
    # first threshold where the miss rate has caught up with the false-alarm rate
    i = int(np.argmax(frr >= far))
    if frr[i] == far[i]:
        return float(frr[i]), float(thr[i])
    gap0, gap1 = far[i - 1] - frr[i - 1], far[i] - frr[i]
    a = gap0 / (gap0 - gap1)
    eer = frr[i - 1] + a * (frr[i] - frr[i - 1])
    t = thr[i - 1] + a * (thr[i] - thr[i - 1]) if np.isfinite(thr[i]) else thr[i - 1]
    return float(eer), float(t)


def compute_eer(scores: dict, trials: dict):
    """Equal error rate and its threshold; scores are higher for bona fide."""
    return eer_from_arrays(*split_by_label(scores, trials))


# ---------------------------------------------------------------------------
# Tandem detection cost


@dataclass(frozen=True)
class TdcfConfig:
    p_spoof: float = 0.05
    p_tar: float = 0.9405
    p_non: float = 0.0095
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0
    # ASV operating point: miss rate on targets, false-alarm rate on
    # non-targets, miss rate on spoofs
    p_miss_asv: float = 0.0
    p_fa_asv: float = 0.0
    p_miss_spoof_asv: float = 0.0

    def __post_init__(self):
        priors = (self.p_spoof, self.p_tar, self.p_non)
        if min(priors) <= 0 or abs(sum(priors) - 1.0) > 1e-9:
            raise ValueError(f"priors must be positive and sum to 1, got {priors}")
        costs = (self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm)
        if min(costs) <= 0:
            raise ValueError(f"costs must be positive, got {costs}")
        for name in ("p_miss_asv", "p_fa_asv", "p_miss_spoof_asv"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    def weights(self):
        """(C1, C2): cost weights of the CM miss and false-alarm rates."""
        c1 = self.p_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv) - self.p_non * self.c_fa_asv * self.p_fa_asv
        c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv)
        if c1 <= 0 or c2 <= 0:
            raise ValueError(f"invalid ASV operating point: C1={c1:.6g}, C2={c2:.6g} (both must be positive)")
        return c1, c2


def parse_kv(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_tdcf_config(path=None) -> TdcfConfig:
    """Read a t-DCF config file; with no path, the bundled neutral-ASV defaults."""
    if path is None:
        text, source = resources.files("replayguard").joinpath("data/tdcf.cfg").read_text(), "tdcf.cfg"
    else:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such t-DCF config: {path}")
        text, source = path.read_text(), str(path)
    kv = parse_kv(text, source)
    known = {f.name for f in fields(TdcfConfig)}
    unknown = sorted(set(kv) - known)
    if unknown:
        raise ValueError(f"{source}: unknown keys {unknown}")
    return TdcfConfig(**{k: float(v) for k, v in kv.items()})


def tdcf_curve(bona, spoof, cfg: TdcfConfig = TdcfConfig()):
    """Normalised t-DCF at every candidate threshold: (costs, thresholds)."""
    c1, c2 = cfg.weights()
    p_miss, p_fa, thr = error_rates(bona, spoof)
    return (c1 * p_miss + c2 * p_fa) / min(c1, c2), thr


def min_tdcf_from_arrays(bona, spoof, cfg: TdcfConfig = TdcfConfig()):
    costs, thr = tdcf_curve(bona, spoof, cfg)
    i = int(np.argmin(costs))
    return float(costs[i]), float(thr[i])


def compute_min_tdcf(cm_scores: dict, trials: dict, cfg: TdcfConfig = TdcfConfig()):
    """Minimum normalised tandem detection cost and the threshold attaining it."""
    return min_tdcf_from_arrays(*split_by_label(cm_scores, trials), cfg)


# ---------------------------------------------------------------------------
# Fusion and reports


def fuse_scores(systems: list) -> dict:
    """Per-utterance arithmetic mean over systems that cover the same IDs."""
    if not systems:
        raise ValueError("nothing to fuse")
    ids = set(systems[0])
    problems = []
    for n, s in enumerate(systems):
        missing = sorted(ids - set(s))
        extra = sorted(set(s) - ids)
        if missing:
            problems.append(f"system {n} lacks {len(missing)} ids, e.g. {missing[:5]}")
        if extra:
            problems.append(f"system {n} has {len(extra)} ids absent from system 0, e.g. {extra[:5]}")
    if problems:
        raise ScoreFileError("score sets cover different utterances: " + "; ".join(problems))
    return {k: _mean([s[k] for s in systems]) for k in systems[0]}


def _mean(values: list) -> float:
    # offsets from the minimum, summed exactly: order-independent, and equal
    # inputs come back bit-for-bit unchanged
    lo = min(values)
    return lo + math.fsum(v - lo for v in values) / len(values)


def evaluate(scores: dict, trials: dict, cfg: TdcfConfig = TdcfConfig()) -> dict:
    bona, spoof = split_by_label(scores, trials)
    eer, eer_thr = eer_from_arrays(bona, spoof)
    tdcf, tdcf_thr = min_tdcf_from_arrays(bona, spoof, cfg)
    return {
        "eer": eer,
        "eer_threshold": eer_thr,
        "min_tdcf": tdcf,
        "min_tdcf_threshold": tdcf_thr,
        "n_bonafide": int(bona.size),
        "n_spoof": int(spoof.size),
        # above one half usually means the scores have the wrong polarity
        "polarity_suspect": eer > 0.5,
        "tdcf_config": asdict(cfg),
    }


def write_report(report: dict, path) -> None:
    def clean(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v

    body = {k: ({kk: clean(vv) for kk, vv in v.items()} if isinstance(v, dict) else clean(v)) for k, v in report.items()}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
