"""ARSN checkpoint files.

Layout: magic ``ARSN``, u32 version, u32 n_stages, n_stages u32 channels,
n_stages u32 blocks, u32 in_channels, u32 fc_dim, u32 n_bins, then every
parameter (in ``param_shapes`` order) followed by every batch-norm running
mean and variance (in ``bn_names`` order), all little-endian float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import Architecture, ResNetModel, bn_names, param_shapes

_MAGIC = b"ARSN"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_layout(arch: Architecture):
    layout = [("params", k, s) for k, s in param_shapes(arch).items()]
    for name in bn_names(arch):
        c = param_shapes(arch)[f"{name}.gamma"]
        layout += [("buffers", f"{name}.mean", c), ("buffers", f"{name}.var", c)]
    return layout


def save_checkpoint(m: ResNetModel, path) -> None:
    a = m.arch
    n = len(a.channels)
    head = struct.pack(f"<2I{n}I{n}I3I", _VERSION, n, *a.channels, *a.blocks, a.in_channels, a.fc_dim, a.n_bins)
    with open(path, "wb") as f:
        f.write(_MAGIC + head)
        for group, name, _ in _tensor_layout(a):
            f.write(np.ascontiguousarray(getattr(m, group)[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> ResNetModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 12:
        raise CheckpointError(f"{path}: not an ARSN checkpoint")
    version, n = struct.unpack("<2I", raw[4:12])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    fmt = f"<{n}I{n}I3I"
    try:
        vals = struct.unpack(fmt, raw[pos : pos + struct.calcsize(fmt)])
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    pos += struct.calcsize(fmt)
    arch = Architecture(tuple(vals[:n]), tuple(vals[n : 2 * n]), vals[2 * n], vals[2 * n + 1], vals[2 * n + 2])
    m = ResNetModel(arch)
    body = np.frombuffer(raw, dtype="<f4", offset=pos)
    i = 0
    for group, name, shape in _tensor_layout(arch):
        size = int(np.prod(shape))
        if i + size > body.size:
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        getattr(m, group)[name] = body[i : i + size].reshape(shape).astype(np.float32)
        i += size
    if i != body.size:
        raise CheckpointError(f"{path}: {body.size - i} trailing values")
    return m
