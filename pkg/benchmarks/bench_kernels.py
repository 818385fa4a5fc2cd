"""Numba vs pure-numpy timings for the non-network kernels.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Each kernel is called once on the numba path to trigger compilation before
timing.  Both paths are checked for agreement on every input.
"""

import argparse
import time

import numpy as np

from vital import _kernels as kn


def _time(func, *args, repeats, **kwargs):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = func(*args, **kwargs)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def cases(rng):
    img = rng.random((64, 64, 3))
    tags_a = rng.random((300, 60)) < 0.1
    tags_b = rng.random((200, 60)) < 0.1
    feats = rng.random((500, 64))
    thr = np.median(feats, axis=0)
    diverse = rng.random((64, 256))
    return [
        ("area_downsample 64x64 /2", kn.area_downsample, (img, 2)),
        ("jaccard_matrix 300x200x60", kn.jaccard_matrix, (tags_a, tags_b)),
        ("hamming_rows 500x64", kn.hamming_rows, (feats, feats[::-1].copy(), thr)),
        ("mean_pairwise_l2 64x256", kn.mean_pairwise_l2, (diverse,)),
    ]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=20)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, func, fargs in cases(rng):
        func(*fargs, use_numba=True)  # compile
        t_np, out_np = _time(func, *fargs, use_numba=False, repeats=args.repeats)
        t_nb, out_nb = _time(func, *fargs, use_numba=True, repeats=args.repeats)
        if not np.allclose(out_np, out_nb, atol=1e-12):
            raise SystemExit(f"{name}: numba and numpy paths disagree")
        print(f"{name:32s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
