"""Compare the numba and pure-numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat N]

Both paths are imported directly, so the ``IMMUNOATTN_JIT`` flag is irrelevant
here. Each numba kernel is called once before timing to exclude compilation.
"""

import argparse
import time

import numpy as np

from immunoattn import _kernels as K
from immunoattn.datasets import kmer_codes
from immunoattn.synthetic import separable_dataset


def timeit(fn, *args, repeat=5):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--records", type=int, default=1500)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    records = separable_dataset(args.records, seed=0, min_len=100, max_len=400, margin=0.0)
    sets = [kmer_codes(r.sequence) for r in records]
    offsets = np.zeros(len(sets) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in sets])
    codes = np.concatenate(sets)

    x = rng.normal(size=(512, 8, 32))
    ang = K.rope_angles(np.arange(512), 32, 10000.0)
    cos, sin = np.cos(ang), np.sin(ang)

    pos = rng.random(20000)
    neg = np.sort(rng.random(20000))

    cases = [
        ("greedy k-mer filter", K.greedy_filter_numpy, K.greedy_filter_numba, (codes, offsets, 0.3)),
        ("RoPE rotate", K.rope_apply_numpy, K.rope_apply_numba, (x, cos, sin)),
        ("pair wins (AUC)", K.pair_wins_numpy, K.pair_wins_numba, (pos, neg)),
    ]
    print(f"numba available: {K.NUMBA_AVAILABLE}; default path: {'numba' if K.USE_NUMBA else 'numpy'}")
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, f_np, f_nb, fargs in cases:
        a, b = f_np(*fargs), f_nb(*fargs)
        assert np.allclose(a, b), name
        t_np = timeit(f_np, *fargs, repeat=args.repeat)
        t_nb = timeit(f_nb, *fargs, repeat=args.repeat)
        print(f"{name:<22}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
