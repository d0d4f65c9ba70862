"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times the two kernels on their own and one full tree growth on a
full-size scenario (K=30 clusters of 100 units) with each backend.
"""

import argparse
import timeit

import numpy as np

from nctree import _pykernels, kernels
from nctree.nct import EstimandSet, grow_tree, split_clusters
from nctree.simlab import ScenarioConfig, generate_scenario

try:
    from nctree import _ckernels
except ImportError:
    _ckernels = None


def best(stmt, repeat):
    return min(timeit.repeat(stmt, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the numpy fallback is available")
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels

    rng = np.random.default_rng(0)
    bins = rng.integers(0, 2, 3000).astype(np.int64)
    values = np.ascontiguousarray(rng.standard_normal((3000, 17)))
    sc = generate_scenario(ScenarioConfig(h=5.1, clusters=30, seed=1))
    split = split_clusters(sc.data, 0.5, 0)
    est = EstimandSet.composite({"1000": 0.5, "0100": 0.5})

    cases = {
        "bin_sums 3000x17 -> 2 bins": lambda m: (lambda: m.bin_sums(bins, values, 2)),
        "pair table, 12 shared bits": lambda m: (lambda: m.enumerate_pair_table(0b101101101011, 0b011011011101, 1, 2, 12, 0.5, 2)),
        "pair table, 16 shared bits": lambda m: (lambda: m.enumerate_pair_table(0xB6D5, 0x6DAB, 1, 2, 16, 0.5, 2)),
    }
    print(f"{'case':34s}" + "".join(f"{name:>12s}" for name in backends) + ("     speedup" if len(backends) == 2 else ""))
    for label, make in cases.items():
        times = [best(make(m), args.repeat) for m in backends.values()]
        row = f"{label:34s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)

    saved = kernels.bin_sums
    times = []
    for m in backends.values():
        kernels.bin_sums = m.bin_sums
        times.append(best(lambda: grow_tree(sc.data, split, est, 3, 20), args.repeat))
    kernels.bin_sums = saved
    row = f"{'grow_tree K=30 n=100 depth 3':34s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times)
    if len(times) == 2:
        row += f"{times[0] / times[1]:11.1f}x"
    print(row)


if __name__ == "__main__":
    main()
