"""Feature extraction by name and on-disk feature sets."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .audio_io import load_audio
from .cepstral import CepstraConfig, CqtConfig, cepstra, cqcc
from .manifest import Entry, Manifest, read_manifest
from .spectral import StftConfig, gd_gram, joint_gram_of, read_features, stft_gram, write_features

log = logging.getLogger("replayguard.features")

FEATURE_KINDS = ("stft_gram", "gd_gram", "joint_gram", "lfcc", "imfcc", "cqcc")
INDEX_NAME = "features.tsv"


def feature_configs(cfg):
    """(StftConfig, CepstraConfig, CqtConfig) from a RunConfig."""
    stft = StftConfig(cfg["n_fft"], cfg["frame_len_ms"], cfg["hop_ms"], cfg["window"], cfg["log_floor_eps"], cfg["gd_rel_eps"])
    ceps = CepstraConfig(cfg["n_static"], cfg["n_filters"], cfg["with_deltas"], cfg["delta_window"])
    cqt = CqtConfig(
        cfg["cqt_bins_per_octave"],
        cfg["cqt_f_min"] or None,
        cfg["cqt_f_max"] or None,
        cfg["cqt_resample_period"],
        cfg["cqt_n_ceps"],
        cfg["hop_ms"],
        cfg["log_floor_eps"],
        cfg["with_deltas"],
        cfg["delta_window"],
    )
    return stft, ceps, cqt


def extract(w, kind: str, stft: StftConfig = StftConfig(), ceps: CepstraConfig = CepstraConfig(),
            cqt: CqtConfig = CqtConfig()) -> np.ndarray:
    if kind == "stft_gram":
        return stft_gram(w, stft)
    if kind == "gd_gram":
        return gd_gram(w, stft)
    if kind == "joint_gram":
        return joint_gram_of(w, stft)
    if kind in ("lfcc", "imfcc"):
        return cepstra(w, kind, ceps, stft)
    if kind == "cqcc":
        return cqcc(w, cqt)
    raise ValueError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def extract_manifest(manifest: Manifest, kind: str, out_dir, cfg, jobs: int = 1) -> Manifest:
    """Extract one ASPF file per entry into ``out_dir`` and write its index."""
    stft, ceps, cqt = feature_configs(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(e: Entry):
        w = load_audio(manifest.path_of(e), cfg["sample_rate"])
        name = f"{e.utt_id}.aspf"
        feats = extract(w, kind, stft, ceps, cqt)
        write_features(out_dir / name, feats.astype(np.float32))
        return Entry(e.utt_id, name, e.label, e.device, e.factor), _value_range(feats, kind)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(one, manifest.entries))
    else:
        results = [one(e) for e in manifest.entries]
    entries = [r[0] for r in results]
    index = Manifest(entries, out_dir)
    index.write(out_dir / INDEX_NAME)
    log.info("extracted %s for %d utterances", kind, len(entries))
    ranges = np.array([r[1] for r in results if r[1] is not None])
    if len(ranges):
        log.info(
            "group-delay values fed raw: min %.4g, max %.4g; per-utterance 1st..99th percentile within [%.4g, %.4g]",
            ranges[:, 0].min(), ranges[:, 3].max(), ranges[:, 1].min(), ranges[:, 2].max(),
        )
    return index


def _value_range(feats: np.ndarray, kind: str):
    """(min, p1, p99, max) of the group-delay channel, None for other kinds."""
    if kind not in ("gd_gram", "joint_gram"):
        return None
    g = feats[-1]
    p1, p99 = np.percentile(g, [1, 99])
    return float(g.min()), float(p1), float(p99), float(g.max())


def read_index(path) -> Manifest:
    """A feature index, given either the file or the directory holding it."""
    path = Path(path)
    if path.is_dir():
        path = path / INDEX_NAME
    return read_manifest(path)


def load_feature_set(path, label_filter: str | None = None):
    """``(ids, features, labels)`` with labels 0 = bona fide, 1 = spoof."""
    index = read_index(path)
    entries = [e for e in index if label_filter is None or e.label == label_filter]
    feats = [read_features(index.path_of(e)) for e in entries]
    labels = np.array([0 if e.label == "bonafide" else 1 for e in entries], dtype=np.int64)
    return [e.utt_id for e in entries], feats, labels
