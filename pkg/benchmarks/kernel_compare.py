#!/usr/bin/env python3
"""Compare the compiled kernels against the pure-numpy fallback.

Times stats_tiled (the streaming statistics pass) and decode_step (one
decode attention step) on matched random inputs and prints a table with
the speedup of the compiled extension over the fallback.

Usage:
    python3 benchmarks/kernel_compare.py [--sizes 1024,4096,16384]
        [--head-dim 64] [--window 50] [--tile 256] [--repeats 5]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from vlcache._kernels import BACKEND, _numpy_impl

try:
    from vlcache._kernels import _core
except ImportError:
    _core = None


def _timeit(fn, repeats: int) -> float:
    fn()  # warmup
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def bench_stats(m: int, d: int, window: int, tile: int, repeats: int, rng) -> dict:
    w = min(window, m)
    q = rng.standard_normal((w, d)).astype(np.float32)
    keys = rng.standard_normal((m, d)).astype(np.float32)
    q_base = m - w
    args = (q, keys, q_base, 0.01, tile)
    return {
        "kernel": f"stats_tiled  m={m:>6} w={w}",
        "compiled_s": _timeit(lambda: _core.stats_tiled(*args), repeats),
        "numpy_s": _timeit(lambda: _numpy_impl.stats_tiled(*args), repeats),
    }


def bench_decode(m: int, d: int, group: int, repeats: int, rng) -> dict:
    q = rng.standard_normal((group, d)).astype(np.float32)
    keys = rng.standard_normal((m, d)).astype(np.float32)
    values = rng.standard_normal((m, d)).astype(np.float32)
    args = (q, keys, values)
    return {
        "kernel": f"decode_step  m={m:>6} G={group}",
        "compiled_s": _timeit(lambda: _core.decode_step(*args), repeats),
        "numpy_s": _timeit(lambda: _numpy_impl.decode_step(*args), repeats),
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=str, default="1024,4096,16384")
    parser.add_argument("--head-dim", type=int, default=64)
    parser.add_argument("--window", type=int, default=50)
    parser.add_argument("--tile", type=int, default=256)
    parser.add_argument("--group", type=int, default=2)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _core is None:
        print("compiled extension not importable; nothing to compare against")
        return 1
    print(f"active backend: {BACKEND}")

    rng = np.random.default_rng(0)
    sizes = [int(tok) for tok in args.sizes.split(",") if tok.strip()]
    rows = []
    for m in sizes:
        rows.append(bench_stats(m, args.head_dim, args.window, args.tile, args.repeats, rng))
    for m in sizes:
        rows.append(bench_decode(m, args.head_dim, args.group, args.repeats, rng))

    header = f"{'kernel':<28} {'compiled':>12} {'numpy':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for row in rows:
        speedup = row["numpy_s"] / row["compiled_s"]
        print(
            f"{row['kernel']:<28} {row['compiled_s'] * 1e3:>10.3f}ms"
            f" {row['numpy_s'] * 1e3:>10.3f}ms {speedup:>8.2f}x"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
