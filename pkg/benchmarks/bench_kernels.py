"""Benchmark the graph-index kernels: numba-compiled vs pure-Python fallback.

The two paths run identical code (see semretrieve.accel); this script times
build and search on the same vectors under each mode. The fallback is
selected with SEMRETRIEVE_DISABLE_NUMBA=1, which must be set before import,
so --compare re-invokes this script in a subprocess per mode.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def run_once(n: int, dim: int, queries: int, ef_search: int) -> dict:
    import numpy as np

    from semretrieve.accel import NUMBA_ENABLED
    from semretrieve.ann import HnswIndex, HnswParams

    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(n, dim)).astype(np.float32)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    ids = tuple(f"doc-{i:06d}" for i in range(n))

    t0 = time.perf_counter()
    index = HnswIndex.build(ids, vectors, HnswParams(max_links=16, ef_construction=200, seed=0))
    build_s = time.perf_counter() - t0

    probe = rng.normal(size=(queries, dim)).astype(np.float32)
    probe /= np.linalg.norm(probe, axis=1, keepdims=True)
    t0 = time.perf_counter()
    for q in probe:
        index.search(q, 10, ef_search)
    search_s = time.perf_counter() - t0

    return {
        "numba": NUMBA_ENABLED,
        "n": n,
        "dim": dim,
        "build_s": round(build_s, 3),
        "search_ms_per_query": round(1000.0 * search_s / queries, 3),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description="Benchmark graph kernels: numba vs fallback")
    parser.add_argument("--n", type=int, default=5000)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--queries", type=int, default=200)
    parser.add_argument("--ef-search", type=int, default=128)
    parser.add_argument("--compare", action="store_true",
                        help="run both modes in subprocesses and print a table")
    parser.add_argument("--json", action="store_true", help="emit one JSON line")
    args = parser.parse_args()

    if not args.compare:
        result = run_once(args.n, args.dim, args.queries, args.ef_search)
        if args.json:
            print(json.dumps(result))
        else:
            mode = "numba" if result["numba"] else "python fallback"
            print(f"{mode}: build {result['build_s']}s, "
                  f"search {result['search_ms_per_query']}ms/query "
                  f"(n={result['n']}, dim={result['dim']})")
        return

    rows = []
    for disable in ("0", "1"):
        env = dict(os.environ)
        env["SEMRETRIEVE_DISABLE_NUMBA"] = disable
        cmd = [sys.executable, os.path.abspath(__file__),
               "--n", str(args.n), "--dim", str(args.dim),
               "--queries", str(args.queries), "--ef-search", str(args.ef_search),
               "--json"]
        out = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))

    print(f"{'mode':<18}{'build_s':>10}{'search_ms':>12}")
    for row in rows:
        mode = "numba" if row["numba"] else "python fallback"
        print(f"{mode:<18}{row['build_s']:>10.3f}{row['search_ms_per_query']:>12.3f}")
    if rows[1]["build_s"] > 0 and rows[0]["build_s"] > 0:
        print(f"build speedup: {rows[1]['build_s'] / rows[0]['build_s']:.1f}x, "
              f"search speedup: "
              f"{rows[1]['search_ms_per_query'] / rows[0]['search_ms_per_query']:.1f}x")


if __name__ == "__main__":
    main()
