"""Compare the numba and numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--batch 8] [--lens 128,512,2048] [--channels 128] [--k 9]

Prints one CSV row per (kernel, length): seconds per call for each backend,
the speed-up, and the max absolute difference between the two outputs.
The library picks a backend at import time (``CONVBERT_NUMBA=0`` forces
numpy); this script calls both implementations directly.
"""

import argparse
import timeit

import numpy as np

from convbert import _kernels as K


def best(fn, repeats=5):
    fn()  # compile / warm up
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeats, number=number)) / number


def cases(rng, batch, n, channels, k, heads):
    x = rng.standard_normal((batch, n, channels))
    w = rng.standard_normal((channels, k))
    g = rng.standard_normal((batch, n, channels))
    kern = rng.standard_normal((batch, n, heads, k))
    return {
        "dwconv_forward": ((x, w), K.dwconv_forward_np, K.dwconv_forward_nb),
        "dwconv_backward": ((x, w, g), K.dwconv_backward_np, K.dwconv_backward_nb),
        "lconv_forward": ((x, kern), K.lconv_forward_np, K.lconv_forward_nb),
        "lconv_backward": ((x, kern, g), K.lconv_backward_np, K.lconv_backward_nb),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(float(np.max(np.abs(u - v))) for u, v in zip(a, b))
    return float(np.max(np.abs(a - b)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--lens", default="128,512,2048")
    ap.add_argument("--channels", type=int, default=128)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--k", type=int, default=9)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print("kernel,n,numpy_s,numba_s,speedup,max_abs_diff")
    for n in (int(s) for s in args.lens.split(",")):
        for name, (inputs, f_np, f_nb) in cases(rng, args.batch, n, args.channels, args.k, args.heads).items():
            t_np = best(lambda: f_np(*inputs), args.repeats)
            t_nb = best(lambda: f_nb(*inputs), args.repeats)
            diff = max_diff(f_np(*inputs), f_nb(*inputs))
            print(f"{name},{n},{t_np:.3e},{t_nb:.3e},{t_np / t_nb:.2f},{diff:.1e}")


if __name__ == "__main__":
    main()
