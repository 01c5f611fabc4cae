"""Wall-clock comparison of the numba and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is run once untimed so numba compilation is excluded.
"""
import argparse
import json
import time

import numpy as np

from corrnoise.checks import random_emb_instance
from corrnoise.emb import precompute_coalesced
from corrnoise.kernels import IMPLS
from corrnoise.mixing import random_banded
from corrnoise.noise import NoisePlan, generate_all, sample_raw_noise


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    plan = NoisePlan(1, 1_000_000, 4, 1)
    yield "normal 1M", lambda b: sample_raw_noise(plan, 0, backend=b)

    plan = NoisePlan(2, 100_000, 32, 16)
    C = random_banded(32, 16, rng)
    yield "correlate 100k x 32 steps, band 16", lambda b: generate_all(plan, C, backend=b)

    inst = random_emb_instance(rng, 2000, 16, 64, 8, batch_size=64, zipf_alpha=1.1)
    yield ("precompute 2000x16, 64 steps, band 8",
           lambda b: precompute_coalesced(inst.plan, inst.C, inst.trace, inst.split,
                                          workers=1, backend=b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    backends = [b for b in ("numba", "numpy") if b in IMPLS]
    results = []
    print(f"{'kernel':40s} " + " ".join(f"{b:>10s}" for b in backends) + "    speedup")
    for name, fn in cases():
        row = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
        speedup = row["numpy"] / row["numba"] if len(backends) == 2 else float("nan")
        print(f"{name:40s} " + " ".join(f"{row[b]:9.4f}s" for b in backends) + f"   {speedup:6.1f}x")
        results.append({"kernel": name, **row, "speedup": speedup})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
