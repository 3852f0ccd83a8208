"""Layer primitives with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``.  Tensors are NCHW.
"""

from __future__ import annotations

import numpy as np

from ..kernels import bn_apply, bn_train_backward, bn_train_forward, conv3x3_backward, conv3x3_forward

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_forward(x, w, stride=1):
    y, xp = conv3x3_forward(x, w, stride)
    return y, (xp, w, stride)


def conv_backward(dy, cache):
    xp, w, stride = cache
    return conv3x3_backward(dy, xp, w, stride)


def proj_forward(x, w, stride=2):
    """1x1 convolution with stride; ``w`` has shape (Co, Ci, 1, 1)."""
    xs = np.ascontiguousarray(x[:, :, ::stride, ::stride])
    B, Ci, H, W = xs.shape
    Co = w.shape[0]
    y = np.matmul(w[:, :, 0, 0], xs.reshape(B, Ci, H * W)).reshape(B, Co, H, W)
    return y, (xs, w, stride, x.shape)


def proj_backward(dy, cache):
    xs, w, stride, xshape = cache
    B, Ci, H, W = xs.shape
    Co = w.shape[0]
    g = dy.reshape(B, Co, H * W)
    dw = np.tensordot(g, xs.reshape(B, Ci, H * W), axes=([0, 2], [0, 2]))[:, :, None, None]
    dx = np.zeros(xshape, dtype=dy.dtype)
    dx[:, :, ::stride, ::stride] = np.matmul(w[:, :, 0, 0].T, g).reshape(B, Ci, H, W)
    return dx, dw


def bn_forward(x, gamma, beta, running_mean, running_var, train, relu=False, momentum=BN_MOMENTUM):
    """Per-channel batch norm, optionally followed by ReLU.

    In train mode the running buffers move towards the batch statistics by
    ``momentum``, in place.
    """
    if train:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        y, xhat, mean, var, inv = bn_train_forward(x, gamma, beta, BN_EPS, relu)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
        return y, (xhat, y, gamma, inv, relu)
    inv = 1.0 / np.sqrt(running_var.astype(np.float64) + BN_EPS)
    return bn_apply(x, running_mean.astype(np.float64), inv, gamma, beta, relu), None


def bn_backward(dy, cache):
    xhat, y, gamma, inv, relu = cache
    return bn_train_backward(dy, xhat, y, gamma, inv, relu)


def relu_forward(x):
    y = np.maximum(x, 0)
    return y, y > 0


def relu_backward(dy, mask):
    return dy * mask


def gap_forward(f):
    """Spatial mean per channel: (B, C, H, W) -> (B, C)."""
    if f.shape[2] * f.shape[3] < 1:
        raise ValueError("global average pooling needs a non-empty feature map")
    return f.mean(axis=(2, 3)), f.shape


def gap_backward(dv, shape):
    B, C, H, W = shape
    return np.broadcast_to((dv / (H * W))[:, :, None, None], shape).copy()


def linear_forward(x, w, b):
    # row-by-row product: BLAS picks a different summation order for one row
    # than for many, and scores must not depend on the batch they came in
    return np.matmul(x[:, None, :], w.T)[:, 0] + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def log_softmax(z):
    z = np.asarray(z)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    lp = log_softmax(logits)
    B = logits.shape[0]
    loss = -lp[np.arange(B), labels].mean()
    d = np.exp(lp)
    d[np.arange(B), labels] -= 1.0
    return float(loss), d / B
