"""Time each row kernel under the numpy and numba backends.

Shapes match one stage-1 training step at the default config (batch 8,
8 heads, ~70 tokens, width 128). Run: python benchmarks/bench_kernels.py
"""

import argparse
import timeit

import numpy as np

from riskcap import kernels


def cases(rng):
    att = rng.normal(size=(8 * 8 * 70, 70))
    y = kernels._NUMPY["softmax_fwd"](att)
    x = rng.normal(size=(8 * 70, 128))
    gain, bias = rng.normal(size=128), rng.normal(size=128)
    _, xhat, rstd = kernels._NUMPY["layer_norm_fwd"](x, gain, bias, 1e-5)
    a = np.abs(rng.normal(size=(1000, 4))) * 0.2 + 0.1
    b = np.abs(rng.normal(size=(1000, 4))) * 0.2 + 0.1
    return {
        "softmax_fwd": (att,),
        "softmax_bwd": (y, att),
        "layer_norm_fwd": (x, gain, bias, 1e-5),
        "layer_norm_bwd": (x, xhat, rstd, gain),
        "box_iou": (a, b),
    }


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args()
    backends = ["numpy"] + (["numba"] if kernels.NUMBA_AVAILABLE else [])
    inputs = cases(np.random.default_rng(0))
    print(f"{'kernel':16s}" + "".join(f"{b:>12s}" for b in backends) + "   (ms per call)")
    for name, arg in inputs.items():
        row = []
        for b in backends:
            fn = (kernels._NUMBA if b == "numba" else kernels._NUMPY)[name]
            fn(*arg)  # compile / warm up
            row.append(1e3 * timeit.timeit(lambda: fn(*arg), number=args.repeat) / args.repeat)
        print(f"{name:16s}" + "".join(f"{t:12.3f}" for t in row))


if __name__ == "__main__":
    main()
