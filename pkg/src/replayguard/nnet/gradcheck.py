"""Finite-difference check of backprop gradients.

Central differences are only meaningful while the probe stays on one linear
piece of every ReLU, so the step is halved until the activation pattern at
``p + h`` and ``p - h`` matches the unperturbed one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .model import ResNetModel, activation_pattern, backward, forward


@dataclass
class GradCheckResult:
    names: list
    index: list
    analytic: np.ndarray
    numeric: np.ndarray
    steps: np.ndarray

    @property
    def rel_error(self) -> np.ndarray:
        den = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), 1e-8)
        return np.abs(self.analytic - self.numeric) / den

    def worst(self) -> tuple:
        k = int(np.argmax(self.rel_error))
        return self.names[k], self.index[k], float(self.rel_error[k])


def _loss(m, x, y):
    logits, cache = forward(m, x, "train")
    return L.softmax_cross_entropy(logits.astype(np.float64), y)[0], activation_pattern(cache)


def check_gradients(
    m: ResNetModel,
    x: np.ndarray,
    y: np.ndarray,
    n_params: int = 200,
    seed: int = 0,
    h: float = 1e-6,
    min_h: float = 1e-10,
) -> GradCheckResult:
    """Compare backprop with central differences on ``n_params`` sampled scalars.

    Samples are spread over all tensors: every tensor gets at least one, the rest
    are drawn in proportion to size.  The model should use float64.
    """
    if m.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    logits, cache = forward(m, x, "train")
    base = activation_pattern(cache)
    _, dlogits = L.softmax_cross_entropy(logits, y)
    grads = backward(m, dlogits, cache)

    rng = np.random.default_rng(seed)
    names = list(m.params)
    sizes = np.array([m.params[n].size for n in names])
    picks = [(n, int(rng.integers(m.params[n].size))) for n in names]
    extra = rng.choice(sizes.sum(), size=max(n_params - len(names), 0), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in extra:
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        picks.append((names[t], int(flat - offsets[t])))

    out_n, out_i, ana, num, steps = [], [], [], [], []
    for name, flat in picks:
        p = m.params[name]
        i = np.unravel_index(flat, p.shape)
        old = p[i]
        step = h
        while True:
            p[i] = old + step
            up, pat_up = _loss(m, x, y)
            p[i] = old - step
            down, pat_down = _loss(m, x, y)
            p[i] = old
            if (np.array_equal(pat_up, base) and np.array_equal(pat_down, base)) or step / 2 < min_h:
                break
            step /= 2
        out_n.append(name)
        out_i.append(i)
        ana.append(float(grads[name][i]))
        num.append((up - down) / (2 * step))
        steps.append(step)
    return GradCheckResult(out_n, out_i, np.array(ana), np.array(num), np.array(steps))
