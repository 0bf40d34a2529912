"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import importlib
import timeit

import numpy as np

from countprompt import _kernels_py
from countprompt.perception import matched_template


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    try:
        compiled = importlib.import_module("countprompt._kernels")
    except ImportError:
        print("compiled extension not built; only the fallback is timed")
        compiled = None

    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, (64, 64))
    cases = {
        "correlate 64x64 * 5x5": lambda m: m.correlate_same(image, matched_template()),
        "correlate 64x64 * 13x13": lambda m: m.correlate_same(image, rng.normal(size=(13, 13))),
        "local_peaks 64x64": lambda m: m.local_peaks(image, 0.5, 4.0),
    }
    print(f"{'kernel':26s} {'python us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for name, fn in cases.items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.repeat, repeat=3)) / args.repeat
        if compiled is None:
            print(f"{name:26s} {1e6 * py:10.1f}")
            continue
        c = min(timeit.repeat(lambda: fn(compiled), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:26s} {1e6 * py:10.1f} {1e6 * c:12.1f} {py / c:7.1f}x")


if __name__ == "__main__":
    main()
