"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the desk model (batch 32, 64 px input). The numba twins are
warmed up once so compilation is not counted. A last row times one desk
forward/backward pass under each backend in a fresh interpreter, since the
backend is chosen at import time by PIXBIS_DISABLE_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pixbis import kernels
from pixbis.kernels import _numpy as ref

FORWARD_SNIPPET = """
import time, numpy as np
from pixbis import autodiff as ad
from pixbis.model import ModelConfig, build_model, combined_loss, pixelwise_bce, binary_bce
m = build_model(ModelConfig.desk()).train()
x = np.random.default_rng(0).random((32, 3, 64, 64)).astype(np.float32)
y = np.tile([0.0, 1.0], 16)
def step():
    p, b = m(ad.Tensor(x))
    ad.backward(combined_loss(pixelwise_bce(p, y), binary_bce(b, y)))
step()
t = time.perf_counter()
for _ in range({repeat}):
    step()
print((time.perf_counter() - t) / {repeat})
"""


def cases(rng):
    xp = rng.standard_normal((32, 16, 66, 66)).astype(np.float32)
    ho = wo = 32
    cols = ref.im2col(xp, 3, 3, 2, ho, wo)
    pool_in = rng.standard_normal((32, 32, 34, 34)).astype(np.float32)
    out, idx = ref.maxpool_forward(pool_in, 3, 2, 16, 16)
    g = rng.standard_normal(out.shape).astype(np.float32)
    gray = rng.random((64, 64)) * 255
    return {
        "im2col 3x3/2": lambda m: m.im2col(xp, 3, 3, 2, ho, wo),
        "col2im 3x3/2": lambda m: m.col2im(cols, 32, 16, 66, 66, 3, 3, 2, ho, wo),
        "maxpool fwd": lambda m: m.maxpool_forward(pool_in, 3, 2, 16, 16),
        "maxpool bwd": lambda m: m.maxpool_backward(g, idx, 34, 34),
        "lbp 64x64": lambda m: m.lbp_codes(gray),
    }


def time_call(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def model_step(disable_numba: bool, repeat: int) -> float:
    env = dict(os.environ)
    env.pop("PIXBIS_DISABLE_NUMBA", None)
    if disable_numba:
        env["PIXBIS_DISABLE_NUMBA"] = "1"
    out = subprocess.run([sys.executable, "-c", FORWARD_SNIPPET.format(repeat=repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-model", action="store_true", help="kernels only")
    args = parser.parse_args(argv)
    nb = kernels.numba_impl
    if nb is None:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases(rng).items():
        t_np = time_call(lambda: fn(ref), args.repeat)
        t_nb = time_call(lambda: fn(nb), args.repeat)
        print(f"{name:<22}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.1f}x")
    if not args.skip_model:
        t_np = model_step(True, max(1, args.repeat // 2))
        t_nb = model_step(False, max(1, args.repeat // 2))
        print(f"{'desk train step b=32':<22}{1e3 * t_np:>10.0f}{1e3 * t_nb:>10.0f}{t_np / t_nb:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
