"""Thin ResNet with global average pooling over the time-frequency plane.

Layout (one residual stage per entry of ``channels``/``blocks``)::

    conv3x3(in -> c0) - BN - ReLU
    stage k: ``blocks[k]`` basic blocks at ``channels[k]``; stages after the
             first halve both spatial axes in their first convolution
    GAP -> FC(c_last -> fc_dim) - ReLU -> FC(fc_dim -> 2)

Output unit 0 is bona fide, unit 1 is spoof.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L

N_BINS = 512
BONAFIDE, SPOOF = 0, 1

PRESETS = {
    "table1": {"channels": (16, 32, 64, 128), "blocks": (3, 4, 6, 3)},
    "desk": {"channels": (8, 16, 32, 64), "blocks": (2, 2, 2, 2)},
    # single-core budget: one block per stage at half the desk width
    "compact": {"channels": (4, 8, 16, 32), "blocks": (1, 1, 1, 1)},
}


@dataclass(frozen=True)
class Architecture:
    channels: tuple = (16, 32, 64, 128)
    blocks: tuple = (3, 4, 6, 3)
    in_channels: int = 1
    fc_dim: int = 32
    n_bins: int = N_BINS

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.channels) - 1)


@dataclass
class ResNetModel:
    arch: Architecture
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ResNetModel":
        return ResNetModel(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "ResNetModel":
        return ResNetModel(
            self.arch,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _block_names(arch):
    for s, (c, nb) in enumerate(zip(arch.channels, arch.blocks)):
        for b in range(nb):
            yield s, b, f"res{s + 1}.{b}"


def _has_proj(arch, s, b):
    if b != 0:
        return False
    cin = arch.channels[s - 1] if s > 0 else arch.channels[0]
    return s > 0 or cin != arch.channels[s]


def _stride(s, b):
    return 2 if (s > 0 and b == 0) else 1


def param_shapes(arch: Architecture) -> dict:
    """Ordered ``name -> shape`` for every trainable parameter."""
    shapes = {}

    def bn(name, c):
        shapes[f"{name}.gamma"] = (c,)
        shapes[f"{name}.beta"] = (c,)

    c0 = arch.channels[0]
    shapes["conv1.w"] = (c0, arch.in_channels, 3, 3)
    bn("bn1", c0)
    for s, b, name in _block_names(arch):
        cout = arch.channels[s]
        cin = cout if b > 0 else (arch.channels[s - 1] if s > 0 else c0)
        shapes[f"{name}.conv1.w"] = (cout, cin, 3, 3)
        bn(f"{name}.bn1", cout)
        shapes[f"{name}.conv2.w"] = (cout, cout, 3, 3)
        bn(f"{name}.bn2", cout)
        if _has_proj(arch, s, b):
            shapes[f"{name}.proj.w"] = (cout, cin, 1, 1)
            bn(f"{name}.projbn", cout)
    shapes["fc.w"] = (arch.fc_dim, arch.channels[-1])
    shapes["fc.b"] = (arch.fc_dim,)
    shapes["out.w"] = (2, arch.fc_dim)
    shapes["out.b"] = (2,)
    return shapes


def bn_names(arch: Architecture) -> list:
    return [k[: -len(".gamma")] for k in param_shapes(arch) if k.endswith(".gamma")]


def build_model(in_channels: int = 1, seed: int = 0, preset: str = "table1", dtype=np.float32, **overrides) -> ResNetModel:
    """He-uniform convolutions, unit/zero batch-norm affines, zero biases."""
    if in_channels not in (1, 2):
        raise ValueError(f"in_channels must be 1 or 2, got {in_channels}")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    spec = dict(PRESETS[preset])
    spec.update(overrides)
    arch = Architecture(
        channels=tuple(spec["channels"]),
        blocks=tuple(spec["blocks"]),
        in_channels=in_channels,
        fc_dim=spec.get("fc_dim", 32),
    )
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
        elif name.endswith(".beta") or name.endswith(".b"):
            params[name] = np.zeros(shape, dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    buffers = {}
    for name in bn_names(arch):
        c = params[f"{name}.gamma"].shape[0]
        buffers[f"{name}.mean"] = np.zeros(c, dtype)
        buffers[f"{name}.var"] = np.ones(c, dtype)
    return ResNetModel(arch, params, buffers)


def parameter_breakdown(m: ResNetModel) -> dict:
    """Parameter counts grouped like the layer table: conv1, res1..resN, fc, output.

    ``res*`` entries count 3x3 convolution weights only; projection and
    batch-norm parameters are reported under ``other``.
    """
    rows = {"conv1": m.params["conv1.w"].size}
    other = 0
    for name, v in m.params.items():
        if name.startswith("res"):
            stage = name.split(".")[0]
            if name.endswith(".w") and ".conv" in name:
                rows[stage] = rows.get(stage, 0) + v.size
            else:
                other += v.size
        elif name.startswith("bn1"):
            other += v.size
    rows["fc"] = m.params["fc.w"].size + m.params["fc.b"].size
    rows["output"] = m.params["out.w"].size + m.params["out.b"].size
    rows["other"] = other
    return rows


def _check_input(m, x):
    if x.ndim != 4:
        raise ValueError(f"expected (batch, channels, bins, frames), got shape {x.shape}")
    _, C, D, T = x.shape
    if C != m.arch.in_channels:
        raise ValueError(f"model expects {m.arch.in_channels} input channels, got {C}")
    if D != m.arch.n_bins:
        raise ValueError(f"model expects D={m.arch.n_bins} frequency bins, got {D}")
    if T < m.arch.downsample:
        raise ValueError(f"need at least {m.arch.downsample} frames, got {T}")


def _bn(m, name, x, train, relu=False, momentum=L.BN_MOMENTUM):
    return L.bn_forward(
        x,
        m.params[f"{name}.gamma"],
        m.params[f"{name}.beta"],
        m.buffers[f"{name}.mean"],
        m.buffers[f"{name}.var"],
        train,
        relu,
        momentum,
    )


def _conv_bn_relu(m, prefix, conv, bn, x, stride, train, relu=True, momentum=L.BN_MOMENTUM):
    y, c_conv = L.conv_forward(x, m.params[f"{prefix}{conv}.w"], stride)
    y, c_bn = _bn(m, f"{prefix}{bn}", y, train, relu, momentum)
    return y, (c_conv, c_bn)


def feature_maps(m: ResNetModel, x: np.ndarray, train: bool = False, bn_momentum: float = L.BN_MOMENTUM):
    """Run the convolutional trunk; returns ``(F, cache)`` with F of shape (B, C, H, W).

    The cache feeds :func:`backward` and is only kept in train mode, so that
    inference on long utterances holds one layer's activations at a time.
    """
    _check_input(m, x)
    x = np.asarray(x, dtype=m.dtype)
    mom = bn_momentum
    h, stem = _conv_bn_relu(m, "", "conv1", "bn1", x, 1, train, momentum=mom)
    cache = {"stem": stem, "blocks": []} if train else None
    for s, b, name in _block_names(m.arch):
        p = name + "."
        st = _stride(s, b)
        y, c1 = _conv_bn_relu(m, p, "conv1", "bn1", h, st, train, momentum=mom)
        y, c2 = _conv_bn_relu(m, p, "conv2", "bn2", y, 1, train, relu=False, momentum=mom)
        if _has_proj(m.arch, s, b):
            sc, c_proj = L.proj_forward(h, m.params[p + "proj.w"], st)
            sc, c_pbn = _bn(m, p + "projbn", sc, train, momentum=mom)
            cs = (c_proj, c_pbn)
        else:
            sc, cs = h, None
        h, c_out = L.relu_forward(y + sc)
        if train:
            cache["blocks"].append((name, c1, c2, cs, c_out))
    return h, cache


def head(m: ResNetModel, v: np.ndarray):
    """Fully-connected head on the pooled (B, C) representation."""
    z, c_fc = L.linear_forward(v, m.params["fc.w"], m.params["fc.b"])
    z, c_relu = L.relu_forward(z)
    logits, c_out = L.linear_forward(z, m.params["out.w"], m.params["out.b"])
    return logits, (c_fc, c_relu, c_out)


def forward(m: ResNetModel, x: np.ndarray, mode: str = "eval", bn_momentum: float = L.BN_MOMENTUM):
    """Logits of shape (B, 2) and the cache consumed by :func:`backward` (None in eval mode).

    ``x`` is (B, C, 512, L) or a single (C, 512, L) tensor.  ``mode="train"``
    uses batch statistics and moves the running buffers by ``bn_momentum``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    train = mode == "train"
    F, cache = feature_maps(m, x, train, bn_momentum)
    v, c_gap = L.gap_forward(F)
    logits, c_head = head(m, v)
    if train:
        cache.update(gap=c_gap, head=c_head)
    return logits, cache


def _conv_bn_relu_backward(dy, c, grads, prefix, conv, bn):
    c_conv, c_bn = c
    dy, grads[f"{prefix}{bn}.gamma"], grads[f"{prefix}{bn}.beta"] = L.bn_backward(dy, c_bn)
    dx, grads[f"{prefix}{conv}.w"] = L.conv_backward(dy, c_conv)
    return dx


def backward(m: ResNetModel, dlogits: np.ndarray, cache) -> dict:
    """Reverse-mode gradients of every parameter given d(loss)/d(logits)."""
    grads = {}
    c_fc, c_relu, c_out = cache["head"]
    dz, grads["out.w"], grads["out.b"] = L.linear_backward(dlogits.astype(m.dtype), c_out)
    dz = L.relu_backward(dz, c_relu)
    dv, grads["fc.w"], grads["fc.b"] = L.linear_backward(dz, c_fc)
    dh = L.gap_backward(dv, cache["gap"])
    for name, c1, c2, cs, c_out in reversed(cache["blocks"]):
        p = name + "."
        dsum = L.relu_backward(dh, c_out)
        dy = _conv_bn_relu_backward(dsum, c2, grads, p, "conv2", "bn2")
        dx = _conv_bn_relu_backward(dy, c1, grads, p, "conv1", "bn1")
        if cs is None:
            dx += dsum
        else:
            c_proj, c_pbn = cs
            dsc, grads[p + "projbn.gamma"], grads[p + "projbn.beta"] = L.bn_backward(dsum, c_pbn)
            dxs, grads[p + "proj.w"] = L.proj_backward(dsc, c_proj)
            dx += dxs
        dh = dx
    _conv_bn_relu_backward(dh, cache["stem"], grads, "", "conv1", "bn1")
    return grads


def activation_pattern(cache) -> np.ndarray:
    """Flattened on/off state of every ReLU recorded in a train-mode cache.

    Two forward passes with equal patterns lie on the same linear piece of the
    ReLUs, which is what finite-difference checks need.
    """
    masks = [cache["stem"][1][1] > 0]
    for _, c1, _, _, c_out in cache["blocks"]:
        masks.append(c1[1][1] > 0)
        masks.append(c_out)
    masks.append(cache["head"][1])
    return np.concatenate([np.ravel(mk) for mk in masks])


def score_utterance(m: ResNetModel, feats: np.ndarray, kind: str = "logsoftmax") -> float:
    """Bona-fide score for one full-length utterance, eval mode, no cropping."""
    logits, _ = forward(m, feats, "eval")
    z = logits[0].astype(np.float64)
    if kind == "logit":
        return float(z[BONAFIDE])
    lp = L.log_softmax(z)
    if kind == "logsoftmax":
        return float(lp[BONAFIDE])
    if kind == "softmax":
        return float(np.exp(lp[BONAFIDE]))
    raise ValueError(f"unknown score kind {kind!r}")
