"""Compare the numba and pure-numpy kernel backends.

Kernel timings call both implementations directly in one process. The
end-to-end row times one segmenter training step per backend in a fresh
subprocess, since the backend is fixed at import time by WEAKSEG_KERNELS.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from weakseg.kernels import _numba, _numpy

STEP = """
import time, numpy as np
from weakseg.autodiff import Tensor, backward
from weakseg.models import ModelConfig, build_segmenter
from weakseg.training import weak_label_loss
m = build_segmenter(ModelConfig(c=8, d=2, input_size=(64, 64)), dtype=np.float32)
x = Tensor(np.random.default_rng(0).uniform(size=(8, 1, 64, 64)).astype(np.float32))
def step():
    backward(weak_label_loss(m(x, training=True), np.full(8, 0.5)))
    m.zero_grad()
step()  # compile / warm caches
t = time.perf_counter()
for _ in range({n}):
    step()
print((time.perf_counter() - t) / {n})
"""


def _cases(rng):
    xpad = rng.standard_normal((8, 8, 34, 34)).astype(np.float32)
    cols = _numpy.im2col3x3(xpad)
    pool_in = rng.standard_normal((8, 8, 64, 64)).astype(np.float32)
    _, arg = _numpy.maxpool2x2_forward(pool_in)
    grad = rng.standard_normal((8, 8, 32, 32)).astype(np.float32)
    field = rng.uniform(size=(64, 64))
    return {
        "splitmix64 (1M outputs)": lambda k: k.splitmix64_block(7, 0, 1 << 20),
        "box_blur 64x64 x12": lambda k: k.box_blur(field, 12),
        "im2col3x3 8x8x32x32": lambda k: k.im2col3x3(xpad),
        "col2im3x3 8x8x32x32": lambda k: k.col2im3x3(cols, 8),
        "maxpool fwd 8x8x64x64": lambda k: k.maxpool2x2_forward(pool_in),
        "maxpool bwd 8x8x64x64": lambda k: k.maxpool2x2_backward(grad, arg),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5, help="training steps for the end-to-end row")
    args = ap.parse_args()

    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in _cases(np.random.default_rng(0)).items():
        fn(_numba)  # trigger compilation outside the timing
        t_np = min(timeit.repeat(lambda: fn(_numpy), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(_numba), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x")

    times = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, WEAKSEG_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", STEP.format(n=args.steps)], env=env, check=True,
                             capture_output=True, text=True)
        times[backend] = float(out.stdout.strip()) * 1e3
    print(f"{'segmenter train step':<26}{times['numpy']:>10.1f}{times['numba']:>10.1f}"
          f"{times['numpy'] / times['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
