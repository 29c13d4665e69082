#!/usr/bin/env python3
"""Compare the numba and pure-numpy scoring backends.

The backend is chosen by HYBRIDRANK_BACKEND at import time, so this
script re-executes itself in a subprocess per backend, times the score
kernel on identical data, and confirms the outputs are byte-identical.

Usage: python3 benchmarks/bench_backends.py [--n-db 200000] [--dim 32]
       [--queries 50] [--repeats 3]
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time


def run_one(backend: str, args) -> dict:
    env = dict(os.environ, HYBRIDRANK_BACKEND=backend)
    out = subprocess.run(
        [sys.executable, __file__, "--worker",
         "--n-db", str(args.n_db), "--dim", str(args.dim),
         "--queries", str(args.queries), "--repeats", str(args.repeats)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout)


def worker(args) -> None:
    import numpy as np

    from hybridrank import _kernels

    rng = np.random.default_rng(0)
    db = rng.standard_normal((args.n_db, args.dim)).astype(np.float32)
    db /= np.linalg.norm(db, axis=1, keepdims=True)
    queries = rng.standard_normal((args.queries, args.dim))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)

    # warm-up (numba JIT compilation must not count)
    _kernels.dot_scores(db, queries[0])

    digest = hashlib.sha256()
    best = float("inf")
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        for q in queries:
            scores = _kernels.dot_scores(db, q)
        best = min(best, time.perf_counter() - t0)
    for q in queries:
        digest.update(_kernels.dot_scores(db, q).tobytes())

    print(json.dumps({
        "backend": _kernels.BACKEND,
        "seconds_per_pass": best,
        "queries": args.queries,
        "sha256": digest.hexdigest(),
    }))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-db", type=int, default=200_000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--queries", type=int, default=50)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        worker(args)
        return

    results = {b: run_one(b, args) for b in ("numpy", "numba")}
    print(f"database: {args.n_db} x {args.dim} float32, "
          f"{args.queries} queries, best of {args.repeats}")
    for b, r in results.items():
        per_q = r["seconds_per_pass"] / r["queries"] * 1e3
        print(f"  {b:6s}  {r['seconds_per_pass']:.4f} s/pass  ({per_q:.3f} ms/query)")
    speedup = results["numpy"]["seconds_per_pass"] / results["numba"]["seconds_per_pass"]
    same = results["numpy"]["sha256"] == results["numba"]["sha256"]
    print(f"  numba speedup: {speedup:.2f}x")
    print(f"  outputs byte-identical: {same}")
    if not same:
        sys.exit(1)


if __name__ == "__main__":
    main()
