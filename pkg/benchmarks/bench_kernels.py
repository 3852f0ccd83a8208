"""Time the hot kernels under numba and under the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

The numpy timings come from a child process started with REPLAYGUARD_NUMBA=0,
since the backend is fixed at import time.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def cases():
    from replayguard import kernels
    from replayguard.audio_io import Waveform
    from replayguard.cepstral import CqtConfig, cqt

    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 8, 256, 125)).astype(np.float32)
    w = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    y, cache = kernels.conv3x3_forward(x, w, 1)
    dy = rng.standard_normal(y.shape).astype(np.float32)
    y2, cache2 = kernels.conv3x3_forward(x, w, 2)
    dy2 = rng.standard_normal(y2.shape).astype(np.float32)
    g = np.ones(16, np.float32)
    b = np.zeros(16, np.float32)
    _, xhat, _, _, inv = kernels.bn_train_forward(y, g, b, 1e-5, True)
    wav = Waveform(rng.standard_normal(16000) * 0.1)
    small_cqt = CqtConfig(f_min=250.0)
    return {
        "conv3x3 forward, stride 1": lambda: kernels.conv3x3_forward(x, w, 1),
        "conv3x3 forward, stride 2": lambda: kernels.conv3x3_forward(x, w, 2),
        "conv3x3 backward, stride 1": lambda: kernels.conv3x3_backward(dy, cache, w, 1),
        "conv3x3 backward, stride 2": lambda: kernels.conv3x3_backward(dy2, cache2, w, 2),
        "batch norm forward": lambda: kernels.bn_train_forward(y, g, b, 1e-5, True),
        "batch norm backward": lambda: kernels.bn_train_backward(dy, xhat, y, g, inv, True),
        "CQT, 1 s, 480 bins": lambda: cqt(wav, small_cqt),
    }


def measure(repeat: int) -> dict:
    from replayguard import _accel

    out = {"backend": _accel.backend(), "times": {}}
    for name, fn in cases().items():
        fn()  # compile / warm caches
        best = float("inf")
        for _ in range(repeat):
            t = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t)
        out["times"][name] = best
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args(argv)
    if args.child:
        print(json.dumps(measure(args.repeat)))
        return 0
    env = dict(os.environ, REPLAYGUARD_NUMBA="0")
    child = subprocess.run(
        [sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
        env=env, check=True, capture_output=True, text=True,
    )
    slow = json.loads(child.stdout)
    fast = measure(args.repeat)
    print(f"{'kernel':30s} {fast['backend']:>10s} {slow['backend']:>10s} {'speedup':>8s}")
    for name, t in fast["times"].items():
        s = slow["times"][name]
        print(f"{name:30s} {t * 1e3:8.1f}ms {s * 1e3:8.1f}ms {s / t:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
