"""Time the numba kernels against the pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths are importable in one process regardless of CLBENCH_NUMBA, since
the module keeps the ``*_np`` and ``*_nb`` names side by side.  Outputs are
checked for agreement before timing.
"""
import argparse
import time

import numpy as np

from clbench import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    x = rng.normal(size=(32, 64, 16, 16)).astype(np.float32)
    x_big = rng.normal(size=(16, 3, 32, 32)).astype(np.float32)
    feats = rng.normal(size=(500, 256))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    cols = kernels.im2col_np(x, 3, 3, 1, 1)
    return [
        ("im2col 32x64x16x16 k3 s1 p1", lambda k: k[0](x, 3, 3, 1, 1), (kernels.im2col_np, kernels.im2col_nb)),
        ("im2col 16x3x32x32 k3 s1 p1", lambda k: k[0](x_big, 3, 3, 1, 1), (kernels.im2col_np, kernels.im2col_nb)),
        ("col2im 32x64x16x16 k3 s1 p1", lambda k: k[0](cols, x.shape, 3, 3, 1, 1),
         (kernels.col2im_np, kernels.col2im_nb)),
        ("herding 500x256 m=20", lambda k: k[0](feats, 20), (kernels.herding_order_np, kernels.herding_order_nb)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.im2col_nb is None:
        print("numba path disabled (CLBENCH_NUMBA=0 or numba missing); nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, call, (np_fn, nb_fn) in cases(rng):
        ref, got = call((np_fn,)), call((nb_fn,))  # also warms up the jit
        if not np.allclose(ref, got, atol=1e-5):
            raise AssertionError(f"{name}: numba and numpy disagree")
        t_np = best_of(lambda: call((np_fn,)), args.repeat)
        t_nb = best_of(lambda: call((nb_fn,)), args.repeat)
        print(f"{name:32s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
