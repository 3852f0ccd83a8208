"""SGD training on variable-length mini-batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .model import ResNetModel, backward, forward

log = logging.getLogger("replayguard.nnet")


@dataclass
class TrainConfig:
    batch_size: int = 128
    min_frames: int = 150
    max_frames: int = 350
    lr_schedule: tuple = (0.1, 0.01, 0.001)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    plateau_patience: int = 3
    plateau_rel_tol: float = 1e-3
    epochs: int = 20
    seed: int = 0
    recalibrate_bn: bool = True

    def __post_init__(self):
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        if any(r <= 0 for r in self.lr_schedule) or self.batch_size < 1:
            raise ValueError("learning rates and batch size must be positive")


class SGD:
    """Classic momentum SGD; weight decay is added to the gradient."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        if self.lr == 0.0:
            return
        for k, p in params.items():
            g = grads[k] + self.weight_decay * p
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p -= self.lr * v


def fit_length(feats: np.ndarray, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Random-crop to ``n_frames`` if longer, cyclically repeat if shorter."""
    T = feats.shape[-1]
    if T == n_frames:
        return feats
    if T > n_frames:
        start = int(rng.integers(0, T - n_frames + 1))
        return feats[..., start : start + n_frames]
    return np.take(feats, np.arange(n_frames) % T, axis=-1)


def make_minibatch(dataset, cfg: TrainConfig, rng: np.random.Generator, indices=None):
    """Draw one frame count L for the whole batch and fit every utterance to it.

    ``dataset`` is a pair ``(features, labels)`` where ``features`` is a list of
    (C, D, T_i) arrays.  Returns ``(x, y, L)`` with ``x`` of shape (B, C, D, L).
    """
    feats, labels = dataset
    if len(feats) == 0:
        raise ValueError("empty dataset")
    if indices is None:
        indices = rng.choice(len(feats), size=min(cfg.batch_size, len(feats)), replace=False)
    n_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    x = np.stack([fit_length(feats[i], n_frames, rng) for i in indices])
    y = np.asarray([labels[i] for i in indices], dtype=np.int64)
    return x, y, n_frames


def train_step(m: ResNetModel, batch, opt: SGD):
    """One forward/backward/update; returns the pre-update loss."""
    x, y = batch[0], batch[1]
    logits, cache = forward(m, x, "train")
    loss, dlogits = L.softmax_cross_entropy(logits.astype(np.float64), y)
    if not np.isfinite(loss):
        bad = [k for k, v in m.params.items() if not np.all(np.isfinite(v))]
        raise FloatingPointError(f"non-finite loss; non-finite parameters: {bad or 'none (activations overflowed)'}")
    grads = backward(m, dlogits, cache)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in layer {k}")
    opt.step(m.params, grads)
    return m, loss


class PlateauSchedule:
    """Advance through ``lr_schedule`` when epoch loss stops improving."""

    def __init__(self, cfg: TrainConfig):
        self.rates = list(cfg.lr_schedule)
        self.patience = cfg.plateau_patience
        self.tol = cfg.plateau_rel_tol
        self.stage = 0
        self.best = np.inf
        self.stale = 0

    @property
    def lr(self) -> float:
        return self.rates[self.stage]

    def update(self, epoch_loss: float) -> float:
        if epoch_loss < self.best * (1.0 - self.tol):
            self.best = epoch_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience and self.stage + 1 < len(self.rates):
                self.stage += 1
                self.stale = 0
                self.best = epoch_loss
                log.info("loss plateau: learning rate -> %g", self.lr)
        return self.lr


def train(m: ResNetModel, dataset, cfg: TrainConfig, callback=None):
    """Train for ``cfg.epochs`` epochs; the last checkpoint is the result.

    Returns the per-epoch mean loss curve.
    """
    rng = np.random.default_rng(cfg.seed)
    sched = PlateauSchedule(cfg)
    opt = SGD(m.params, sched.lr, cfg.momentum, cfg.weight_decay)
    n = len(dataset[0])
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one example
            x, y, _ = make_minibatch(dataset, cfg, rng, idx)
            _, loss = train_step(m, (x, y), opt)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        curve.append(epoch_loss)
        log.info("epoch %d loss %.5f lr %g", epoch + 1, epoch_loss, opt.lr)
        opt.lr = sched.update(epoch_loss)
        if cfg.recalibrate_bn and epoch == cfg.epochs - 1:
            recalibrate_bn(m, dataset, cfg, rng)
        if callback is not None:
            callback(epoch, epoch_loss)
    return curve


def recalibrate_bn(m: ResNetModel, dataset, cfg: TrainConfig, rng: np.random.Generator) -> int:
    """Reset the running batch-norm statistics to their average over one pass.

    The exponential running average trails weights that are still moving, which
    hurts eval-mode scoring after short runs; a cumulative average over training
    crops under the final weights removes the lag.  Returns the batch count.
    """
    n = len(dataset[0])
    order = rng.permutation(n)
    seen = 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        if len(idx) < 2:
            continue
        x, _, _ = make_minibatch(dataset, cfg, rng, idx)
        seen += 1
        forward(m, x, "train", bn_momentum=1.0 / seen)
    return seen
