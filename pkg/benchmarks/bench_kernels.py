"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from mvjar import _kernels_py

try:
    from mvjar import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def fps_case(n, seed=0):
    rng = np.random.default_rng(seed)
    cells = rng.choice(468 * 468, size=n, replace=False)
    coords = np.stack([cells % 468, cells // 468, np.zeros(n, dtype=np.int64)], axis=1).astype(np.float64)
    return coords, int(n * 0.85)


def group_case(n, seed=0):
    rng = np.random.default_rng(seed)
    idx = np.stack([rng.integers(0, 468, n), rng.integers(0, 468, n), np.zeros(n, dtype=np.int64)], axis=1)
    return idx, (468, 468, 1)


def bench(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write results to this file")
    args = p.parse_args(argv)

    backends = {"python": _kernels_py}
    if _kernels_c is not None:
        backends["cython"] = _kernels_c
    else:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)

    rows = []
    for n in (1_000, 4_000, 16_000):
        coords, k = fps_case(n)
        ref = None
        for name, mod in backends.items():
            out = mod.furthest_sampling(coords, k, 0)
            ref = out if ref is None else ref
            assert np.array_equal(out, ref), "backends disagree on furthest_sampling"
            t = bench(lambda: mod.furthest_sampling(coords, k, 0), args.repeat)
            rows.append({"kernel": "furthest_sampling", "size": n, "backend": name, "seconds": t})
    for n in (10_000, 100_000, 1_000_000):
        idx, dims = group_case(n)
        ref = None
        for name, mod in backends.items():
            out = mod.group_points(idx, dims, 32)
            ref = out if ref is None else ref
            assert all(np.array_equal(a, b) for a, b in zip(out, ref)), "backends disagree on group_points"
            t = bench(lambda: mod.group_points(idx, dims, 32), args.repeat)
            rows.append({"kernel": "group_points", "size": n, "backend": name, "seconds": t})

    print(f"{'kernel':<18} {'size':>9} {'backend':<8} {'ms':>10} {'speedup':>8}")
    base = {(r["kernel"], r["size"]): r["seconds"] for r in rows if r["backend"] == "python"}
    for r in rows:
        speed = base[(r["kernel"], r["size"])] / r["seconds"]
        print(f"{r['kernel']:<18} {r['size']:>9} {r['backend']:<8} {1e3 * r['seconds']:>10.2f} {speed:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
