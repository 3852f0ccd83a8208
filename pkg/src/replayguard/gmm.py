"""Diagonal-covariance Gaussian mixtures: EM training and frame-averaged LLR scoring."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger("replayguard.gmm")

LOG_2PI = float(np.log(2.0 * np.pi))
# weights never drop below this, so a starved component keeps a finite log-weight
MIN_WEIGHT = 1e-12


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    variance_floor: np.ndarray  # (D,)

    def __post_init__(self):
        w, mu, var = (np.asarray(a, dtype=np.float64) for a in (self.weights, self.means, self.variances))
        floor = np.broadcast_to(np.asarray(self.variance_floor, dtype=np.float64), mu.shape[1:]).copy()
        if w.ndim != 1 or mu.shape != (w.shape[0], floor.shape[0]) or var.shape != mu.shape:
            raise ValueError(f"inconsistent GMM shapes: weights {w.shape}, means {mu.shape}, variances {var.shape}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("variances must be positive and finite")
        for name, a in (("weights", w), ("means", mu), ("variances", var), ("variance_floor", floor)):
            object.__setattr__(self, name, a)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]


def _as_frames(feats, D=None) -> np.ndarray:
    """(D, N) features -> (N, D) float64 frames."""
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim == 3:  # (1, D, L) feature tensor
        if x.shape[0] != 1:
            raise ValueError(f"GMM features must have one channel, got {x.shape[0]}")
        x = x[0]
    if x.ndim != 2:
        raise ValueError(f"features must be (D, N), got shape {x.shape}")
    if D is not None and x.shape[0] != D:
        raise ValueError(f"feature dimension {x.shape[0]} does not match model dimension {D}")
    return x.T


def _component_loglik(m: GmmModel, X: np.ndarray) -> np.ndarray:
    """(N, K) matrix of log w_k + log N(x_n; mu_k, var_k)."""
    prec = 1.0 / m.variances
    const = np.log(m.weights) - 0.5 * (m.D * LOG_2PI + np.log(m.variances).sum(1) + (m.means**2 * prec).sum(1))
    return const - 0.5 * ((X**2) @ prec.T) + X @ (m.means * prec).T


def gmm_log_likelihood(m: GmmModel, feats) -> np.ndarray:
    """Per-frame log-density of (D, L) features."""
    X = _as_frames(feats, m.D)
    return logsumexp(_component_loglik(m, X), axis=1)


def gmm_llr_score(bona: GmmModel, spoof: GmmModel, feats) -> float:
    """Mean over frames of log p(x|bona) - log p(x|spoof); higher means bona fide."""
    if bona.D != spoof.D:
        raise ValueError(f"model dimensions differ: {bona.D} vs {spoof.D}")
    return float(np.mean(gmm_log_likelihood(bona, feats) - gmm_log_likelihood(spoof, feats)))


def _em_step(m: GmmModel, X: np.ndarray):
    """One EM update; returns (new model, total log-likelihood under ``m``)."""
    lc = _component_loglik(m, X)
    ll = logsumexp(lc, axis=1, keepdims=True)
    resp = np.exp(lc - ll)
    nk = resp.sum(0)
    safe = np.maximum(nk, np.finfo(np.float64).tiny)
    means = (resp.T @ X) / safe[:, None]
    var = (resp.T @ (X**2)) / safe[:, None] - means**2
    starved = nk < 1e-8
    means[starved] = m.means[starved]
    var[starved] = m.variances[starved]
    var = np.maximum(var, m.variance_floor)
    w = np.maximum(nk / X.shape[0], MIN_WEIGHT)
    return GmmModel(w / w.sum(), means, var, m.variance_floor), float(ll.sum())


def _split(m: GmmModel, n_new: int) -> GmmModel:
    """Split the ``n_new`` heaviest components along their max-variance dimension by +-0.1 sigma."""
    order = np.argsort(-m.weights, kind="stable")[:n_new]
    means, var, w = [m.means], [m.variances], m.weights.copy()
    new_means = m.means[order].copy()
    d = np.argmax(m.variances[order], axis=1)
    step = 0.1 * np.sqrt(m.variances[order, d])
    rows = np.arange(n_new)
    parent_means = m.means.copy()
    parent_means[order, d] -= step
    new_means[rows, d] += step
    w[order] /= 2.0
    return GmmModel(
        np.concatenate([w, w[order]]),
        np.concatenate([parent_means, new_means]),
        np.concatenate(var + [m.variances[order]]),
        m.variance_floor,
    )


def fit_gmm(features, K: int = 512, iters: int = 10, seed: int = 0, split_iters: int = 2,
            floor_ratio: float = 1e-3, max_frames: int | None = None, history: list | None = None) -> GmmModel:
    """Fit a K-component diagonal GMM to (D, N) frames.

    Starts from the global Gaussian and doubles the component count by binary
    splitting (running ``split_iters`` EM steps after each split) until K is
    reached, then runs ``iters`` EM steps.  Variances are floored at
    ``floor_ratio`` times the global per-dimension variance.  ``seed`` only
    matters when ``max_frames`` subsamples the training frames.  The total
    log-likelihood before each of the final EM steps, and after the last one,
    is appended to ``history`` when given.
    """
    X = _as_frames(features)
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    N = X.shape[0]
    if K < 1:
        raise ValueError("K must be positive")
    if N < K:
        raise ValueError(f"need at least K={K} frames, got {N}")
    if max_frames is not None and N > max_frames:
        idx = np.sort(np.random.default_rng(seed).choice(N, size=max_frames, replace=False))
        X = X[idx]
    mu = X.mean(0)
    var = X.var(0)
    floor = np.maximum(floor_ratio * var, np.finfo(np.float64).tiny)
    m = GmmModel(np.ones(1), mu[None], np.maximum(var, floor)[None], floor)
    while m.K < K:
        m = _split(m, min(m.K, K - m.K))
        for _ in range(split_iters):
            m, _ = _em_step(m, X)
        log.debug("split to %d components", m.K)
    for i in range(iters):
        m, ll = _em_step(m, X)
        log.debug("EM iteration %d: mean log-likelihood %.6f", i + 1, ll / X.shape[0])
        if history is not None:
            history.append(ll)
    if history is not None:
        history.append(float(gmm_log_likelihood(m, X.T).sum()))
    return m


# ---------------------------------------------------------------------------
# AGMM model files: magic, u32 version, u32 K, u32 D, then float64 LE
# weights (K), means (K*D), variances (K*D), variance floor (D).

_MAGIC = b"AGMM"
_VERSION = 1


class ModelFileError(ValueError):
    pass


def save_gmm(m: GmmModel, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<3I", _VERSION, m.K, m.D))
        for a in (m.weights, m.means, m.variances, m.variance_floor):
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_gmm(path) -> GmmModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such model file: {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 16:
        raise ModelFileError(f"{path}: not an AGMM model file")
    version, K, D = struct.unpack("<3I", raw[4:16])
    if version != _VERSION:
        raise ModelFileError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=16)
    if body.size != K + 2 * K * D + D:
        raise ModelFileError(f"{path}: truncated or oversized body")
    w, rest = body[:K], body[K:]
    means, var, floor = rest[: K * D], rest[K * D : 2 * K * D], rest[2 * K * D :]
    return GmmModel(w.copy(), means.reshape(K, D).copy(), var.reshape(K, D).copy(), floor.copy())
