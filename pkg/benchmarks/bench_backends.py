"""Timing comparison of the numba kernels against the numpy fallback.

The kernel section calls both modules directly on shapes the models actually
produce. The model section runs a generator forward/backward in a subprocess
per backend, since the backend is bound at import time.

Usage: python3 benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from lipsynth.engine import kernels_numba, kernels_numpy

MODEL_PROBE = """
import sys, time
import numpy as np
from lipsynth import melmodels as mm
from lipsynth.engine import Tensor, backend_name

cfg = mm.mel_config_tiny()
gen = mm.V2AMelGenerator(cfg, np.random.default_rng(0))
gen.train()
frames = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 10, 12, 12, 3)).astype(np.float32))
spk = np.random.default_rng(2).standard_normal((2, 256)).astype(np.float32)

gen.forward(frames, spk, target_len=33).sum().backward()  # warm the jit cache
best = float("inf")
for _ in range(int(sys.argv[1])):
    t0 = time.perf_counter()
    gen.forward(frames, spk, target_len=33).sum().backward()
    best = min(best, time.perf_counter() - t0)
print(f"{backend_name()} {best:.6f}")
"""


def _cases():
    r = np.random.default_rng(7)
    f32 = lambda *s: r.standard_normal(s).astype(np.float32)

    x1 = f32(4, 64, 4000)
    c1 = kernels_numpy.im2col1d(x1, 16, 8, 4, 1)
    x2 = f32(4, 32, 48, 48)
    c2 = kernels_numpy.im2col2d(x2, 3, 3, 1, 1, 1, 1)
    x3 = f32(2, 16, 25, 24, 24)
    c3 = kernels_numpy.im2col3d(x3, 3, 3, 3, 1, 1, 1, 1, 1, 1)
    xp = f32(64, 48, 48)
    _, idx = kernels_numpy.maxpool2d_fwd(xp, 3, 3, 2, 2, 1, 1)
    dy = f32(*idx.shape)
    xg = f32(4, 200, 512) * 0.5
    w_hh = f32(512, 128) * 0.3
    h, c, g = kernels_numpy.lstm_fwd(xg, w_hh)
    dh = f32(*h.shape)
    fr = f32(4, 300, 1024)

    return [
        ("im2col1d  (4,64,4000) k16s8", lambda k: k.im2col1d(x1, 16, 8, 4, 1)),
        ("col2im1d  same", lambda k: k.col2im1d(c1, 4000, 8, 4, 1)),
        ("im2col2d  (4,32,48,48) k3", lambda k: k.im2col2d(x2, 3, 3, 1, 1, 1, 1)),
        ("col2im2d  same", lambda k: k.col2im2d(c2, 48, 48, 1, 1, 1, 1)),
        ("im2col3d  (2,16,25,24,24) k3", lambda k: k.im2col3d(x3, 3, 3, 3, 1, 1, 1, 1, 1, 1)),
        ("col2im3d  same", lambda k: k.col2im3d(c3, 25, 24, 24, 1, 1, 1, 1, 1, 1)),
        ("maxpool2d fwd (64,48,48)", lambda k: k.maxpool2d_fwd(xp, 3, 3, 2, 2, 1, 1)),
        ("maxpool2d bwd same", lambda k: k.maxpool2d_bwd(dy, idx, 48, 48)),
        ("lstm_fwd  (4,200,4x128)", lambda k: k.lstm_fwd(xg, w_hh)),
        ("lstm_bwd  same", lambda k: k.lstm_bwd(w_hh, g, c, dh)),
        ("overlap_add (4,300,1024) hop256", lambda k: k.overlap_add(fr, 256, 300 * 256 + 1024)),
    ]


def _best_of(fn, repeats):
    fn()  # warmup (jit compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timed runs per case (best kept)")
    args = ap.parse_args()

    print(f"{'kernel':<34} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, fn in _cases():
        t_np = _best_of(lambda: fn(kernels_numpy), args.repeats)
        t_nb = _best_of(lambda: fn(kernels_numba), args.repeats)
        print(f"{name:<34} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x")

    times = {}
    for flag in ("numpy", "numba"):
        env = dict(os.environ, LIPSYNTH_BACKEND=flag)
        out = subprocess.run(
            [sys.executable, "-c", MODEL_PROBE, str(args.repeats)],
            capture_output=True, text=True, env=env, check=True,
        )
        name, secs = out.stdout.split()
        times[name] = float(secs)
    ratio = times["numpy"] / times["numba"]
    print(f"\n{'mel generator fwd+bwd (tiny, B=2)':<34} "
          f"{times['numpy'] * 1e3:>8.2f}ms {times['numba'] * 1e3:>8.2f}ms {ratio:>7.1f}x")


if __name__ == "__main__":
    main()
