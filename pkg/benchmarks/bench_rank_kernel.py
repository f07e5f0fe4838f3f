"""Compare the compiled and pure-Python ranking kernels.

    python3 benchmarks/bench_rank_kernel.py [--queries N] [--gallery N] [--repeat N]

Both kernels receive the same sorted index matrix; the distance computation
and argsort are shared and excluded from the timing.
"""
import argparse
import timeit

import numpy as np

from dimreid.eval import retrieval


def make_inputs(nq, ng, ids, cams, seed=0):
    rng = np.random.default_rng(seed)
    order = np.argsort(rng.standard_normal((nq, ng)), axis=1).astype(np.int64)
    return (
        order,
        rng.integers(0, ids, nq).astype(np.int64),
        rng.integers(0, cams, nq).astype(np.int64),
        rng.integers(0, ids, ng).astype(np.int64),
        rng.integers(0, cams, ng).astype(np.int64),
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=750)
    ap.add_argument("--gallery", type=int, default=3000)
    ap.add_argument("--ids", type=int, default=750)
    ap.add_argument("--cams", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    inputs = make_inputs(args.queries, args.gallery, args.ids, args.cams)
    backends = ["python"] + (["cython"] if retrieval.BACKEND == "cython" else [])
    timings, outputs = {}, {}
    for b in backends:
        outputs[b] = retrieval.rank_queries(*inputs, backend=b)
        timings[b] = min(timeit.repeat(lambda: retrieval.rank_queries(*inputs, backend=b), number=1, repeat=args.repeat))
    print(f"{args.queries} queries x {args.gallery} gallery, best of {args.repeat}")
    for b in backends:
        print(f"  {b:7s} {timings[b] * 1e3:9.2f} ms")
    if "cython" in timings:
        same = all(np.array_equal(x, y) for x, y in zip(outputs["python"], outputs["cython"]))
        print(f"  speedup {timings['python'] / timings['cython']:.1f}x, outputs identical: {same}")
    else:
        print("  compiled kernel not built; run `pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
