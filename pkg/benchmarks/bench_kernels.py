"""Compare the compiled verification kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--members 10] [--size 128] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from nowcast import _kernels_py

try:
    from nowcast import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

THRESHOLDS = np.array([0.5, 2.0, 6.0, 10.0, 18.0, 30.0])
WEIGHTS = np.array([1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0])


def cases(members, size, rng):
    m = np.ascontiguousarray(rng.uniform(0, 1, (members, size * size)))
    o = rng.uniform(0, 1, size * size)
    rates = rng.exponential(5.0, size * size)
    return {
        "crps_sum": lambda k: k.crps_sum(m, o, False),
        "spread_error_sums": lambda k: k.spread_error_sums(m, o),
        "contingency": lambda k: k.contingency(rates, rates[::-1].copy(), 2.0),
        "class_weights": lambda k: k.class_weights(rates, THRESHOLDS, WEIGHTS),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--members", type=int, default=10)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {"numpy": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    print(f"{args.members} members, {args.size}x{args.size} grid, best of {args.repeat}")
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(args.members, args.size, rng).items():
        times = {}
        for bname, mod in backends.items():
            number = 3
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
        row = f"{name:<20}" + "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends)
        if "cython" in times:
            row += f"{times['numpy'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
