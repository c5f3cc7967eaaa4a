"""Time each hot kernel on its numba and numpy paths.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

The numba path is compiled once before timing. Outputs are checked for
agreement so a speed-up never hides a wrong answer.
"""
import argparse
import timeit

import numpy as np

from anchorset import kernels
from anchorset._backend import HAS_NUMBA


def cases(rng, scale):
    n_tr = int(1500 * scale)
    n_q, n_g = int(250 * scale), int(1250 * scale)
    feats = rng.standard_normal((n_tr, 32))
    labels = rng.integers(0, 50, n_tr)
    batch = rng.standard_normal((64, 32))
    blabels = np.repeat(np.arange(16), 4)
    bdist = kernels.pairwise_sqdist_numpy(batch, batch)
    anchors = rng.standard_normal((50, 32))
    adist = kernels.pairwise_sqdist_numpy(batch, anchors)
    present = np.ones(50, dtype=bool)
    qd = kernels.pairwise_sqdist_numpy(rng.standard_normal((n_q, 32)), rng.standard_normal((n_g, 32)))
    ql, gl = rng.integers(0, 50, n_q), rng.integers(0, 50, n_g)
    qg, gg = rng.integers(0, 2, n_q), rng.integers(0, 2, n_g)
    return {
        "pairwise_sqdist": (feats[:500], feats),
        "batch_hard_mine": (bdist, blabels),
        "nearest_other_anchor": (adist, blabels, present),
        "class_sums": (feats, labels, np.ones(n_tr), 50),
        "retrieval_scores": (qd, ql, gl, qg, gg, True),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply problem sizes")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not HAS_NUMBA:
        print("numba unavailable (or ANCHORSET_DISABLE_NUMBA set); timing the numpy path only")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}  agree")
    for name, inputs in cases(rng, args.scale).items():
        np_fn = getattr(kernels, f"{name}_numpy")
        t_np = min(timeit.repeat(lambda: np_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        if HAS_NUMBA:
            jit_fn = getattr(kernels, f"_{name}_jit")
            agree = same(np_fn(*inputs), jit_fn(*inputs))  # also triggers compilation
            t_jit = min(timeit.repeat(lambda: jit_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<22}{t_np:>10.2f}{t_jit:>10.2f}{t_np / t_jit:>9.1f}x  {agree}")
        else:
            print(f"{name:<22}{t_np:>10.2f}{'-':>10}{'-':>10}  -")


if __name__ == "__main__":
    main()
