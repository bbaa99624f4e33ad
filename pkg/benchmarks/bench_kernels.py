"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Kernels are timed in-process against both modules.  The end-to-end row runs
one forward/backward step of a quarter-width model in a subprocess per
backend, since the backend is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from affnet import _fallback

try:
    from affnet import _kernels
except ImportError:
    _kernels = None

STEP = """
import time, numpy as np
from affnet import backward, build, forward, width_scaled, ModelConfig
from affnet.data import BatchInput
from affnet.tensor import Tensor
from affnet.train import smooth_l1
rng = np.random.default_rng(0)
p = build(width_scaled(ModelConfig(), 4), 0).to(np.float32)
u = lambda *s: Tensor(rng.uniform(0, 1, s).astype(np.float32))
b = BatchInput(face=u(8, 3, 224, 224), eye_left=u(8, 3, 112, 112), eye_right=u(8, 3, 112, 112), rects=u(8, 12))
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    loss = smooth_l1(forward(p, b), Tensor(np.zeros((8, 2), np.float32)))
    p.zero_grad()
    backward(loss, leaves=list(p.tensors.values()))
    best = min(best, time.perf_counter() - t)
print(best)
"""


def cases(rng):
    x = rng.standard_normal((8, 64, 56, 56)).astype(np.float32)
    k, s, pad = 3, 1, 1
    ho = wo = (56 + 2 * pad - k) // s + 1
    cols = _fallback.im2col(x, k, s, pad, ho, wo)
    po = (56 - 3) // 2 + 1
    pooled, arg = _fallback.maxpool_forward(x, 3, 2, po, po)
    dout = rng.standard_normal(pooled.shape).astype(np.float32)
    return {
        "im2col 8x64x56x56 k3": lambda m: m.im2col(x, k, s, pad, ho, wo),
        "col2im 8x64x56x56 k3": lambda m: m.col2im(cols, 64, 56, 56, k, s, pad, ho, wo),
        "maxpool fwd k3 s2": lambda m: m.maxpool_forward(x, 3, 2, po, po),
        "maxpool bwd k3 s2": lambda m: m.maxpool_backward(dout, arg, 56, 56),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def step_time(pure, repeat):
    env = dict(os.environ, AFFNET_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env,
                         capture_output=True, text=True)
    if out.returncode:
        raise RuntimeError(out.stderr.strip().splitlines()[-1])
    return float(out.stdout.strip())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--no-step", action="store_true", help="skip the end-to-end model step")
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the numpy backend is available")
        return 1

    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        rows.append((name, best_of(lambda: fn(_kernels), args.repeat), best_of(lambda: fn(_fallback), args.repeat)))
    if not args.no_step:
        rows.append(("fwd+bwd quarter model, batch 8", step_time(False, 2), step_time(True, 2)))

    print(f"{'case':<32}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, fast, slow in rows:
        print(f"{name:<32}{fast * 1e3:>12.2f}{slow * 1e3:>12.2f}{slow / fast:>9.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
