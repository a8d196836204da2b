"""Command-line entry point.

Subcommands: gen, analyze, compress, eval, bench. Every command is
deterministic given its flags and seed, except the wall-clock fields of
bench. Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .bench import BenchSpec, latency_throughput_curve, run_bench, stats_overhead
from .budget import (
    BudgetConfig,
    allocate_pyramid,
    allocate_sparsity_aware,
    allocate_uniform,
    measure_gamma_mean,
)
from .errors import ValidationError, VLCacheError, ZeroVarianceError
from .evaluate import EvalWindow, build_report, cache_hit_rate
from .scoring import EvictionConfig, ScoringConfig, compress_cache, policy_from_name
from .sparsity import (
    SparsityConfig,
    curve_similarity,
    decoding_sparsity,
    post_vision_sparsity,
    prefill_sparsity,
)
from .trace import GenSpec, generate_trace, read_trace, write_trace

DEFAULT_STATS_WINDOW = 50
POLICY_NAMES = ("vlcache", "h2o", "sliding", "streaming")


def _add_gen_args(parser: argparse.ArgumentParser, required: bool) -> None:
    g = parser.add_argument_group("trace generation")
    g.add_argument("--m", type=int, required=required, help="prompt length")
    g.add_argument("--tau", type=int, required=required, help="post-vision row count")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--query-heads", type=int, default=4)
    g.add_argument("--kv-heads", type=int, default=2)
    g.add_argument("--head-dim", type=int, default=64)
    g.add_argument("--n-dec", type=int, default=8, help="decoding row count")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--heavy-fraction", type=float, default=0.05)
    g.add_argument("--noise-scale", type=float, default=0.1)
    g.add_argument("--pre-vision-len", type=int, default=None)


def _gen_spec_from_args(args: argparse.Namespace) -> GenSpec:
    if args.m is None or args.tau is None:
        raise ValidationError("--m/--tau: required when generating a trace")
    return GenSpec(
        num_layers=args.layers,
        num_query_heads=args.query_heads,
        num_kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        prompt_len=args.m,
        post_vision_len=args.tau,
        decode_len=args.n_dec,
        seed=args.seed,
        heavy_fraction=args.heavy_fraction,
        noise_scale=args.noise_scale,
        pre_vision_len=args.pre_vision_len,
    )


def _add_trace_source(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--trace", type=str, default=None, help="path to a .vlct trace")
    parser.add_argument(
        "--gen", action="store_true", help="generate the trace in memory instead"
    )
    _add_gen_args(parser, required=False)


def _trace_from_args(args: argparse.Namespace):
    if (args.trace is None) == (not args.gen):
        raise ValidationError("--trace/--gen: exactly one trace source is required")
    if args.trace is not None:
        return read_trace(args.trace)
    return generate_trace(_gen_spec_from_args(args))[0]


def _add_output_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out-dir", type=str, default=".")
    parser.add_argument("--format", choices=("csv", "json"), default="csv")


def _write_rows(path: Path, rows: list, fields: tuple, fmt: str) -> Path:
    if fmt == "json":
        path = path.with_suffix(".json")
        path.write_text(json.dumps(rows, indent=2) + "\n")
        return path
    path = path.with_suffix(".csv")
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


def cmd_gen(args: argparse.Namespace) -> int:
    trace, planted = generate_trace(_gen_spec_from_args(args))
    write_trace(trace, args.output)
    print(json.dumps({"header": trace.header.to_dict(), "planted": int(planted.size)}))
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    trace = _trace_from_args(args)
    config = SparsityConfig(p=args.p, tile=args.tile)
    curves = [prefill_sparsity(trace, config)]
    if trace.header.post_vision_len >= 1:
        curves.append(post_vision_sparsity(trace, config))
    if trace.header.decode_len >= 1:
        curves.append(decoding_sparsity(trace, config))
    rows = [
        {"phase": sp.phase, "layer": l, "head": h, "gamma": float(sp.gamma[l, h])}
        for sp in curves
        for l in range(sp.gamma.shape[0])
        for h in range(sp.gamma.shape[1])
    ]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = _write_rows(out_dir / "sparsity", rows, ("phase", "layer", "head", "gamma"), args.format)

    similarity = None
    if trace.header.decode_len >= 1 and trace.header.num_layers >= 2:
        try:
            similarity = curve_similarity(curves[0], curves[-1])
        except ZeroVarianceError as exc:
            print(f"warning: {exc}", file=sys.stderr)
    summary = {"sparsity_file": str(path), "prefill_decoding_pearson": similarity}
    (out_dir / "similarity.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _build_policy(args: argparse.Namespace, tau: int, budget_k: int | None = None):
    fallback = args.fallback_window
    if args.policy == "vlcache" and tau < 1 and fallback is None:
        raise ValidationError(
            "--fallback-window: required for the vlcache policy on a trace with tau = 0"
        )
    return policy_from_name(
        args.policy,
        sliding_window=args.sliding_window,
        fallback_window=fallback,
        budget_k=budget_k,
    )


def cmd_compress(args: argparse.Namespace) -> int:
    trace = _trace_from_args(args)
    h = trace.header
    sparsity_config = SparsityConfig(p=args.p, tile=args.tile)
    budget_config = BudgetConfig(alpha=args.alpha)

    if args.budget == "sparsity_aware":
        window_rows = (
            min(h.post_vision_len, args.stats_window) if h.post_vision_len >= 1 else None
        )
        gamma_mean = measure_gamma_mean(
            trace, sparsity_config, budget_config, window_rows=window_rows
        )
        allocation = allocate_sparsity_aware(gamma_mean, args.alpha, h.prompt_len, budget_config)
    elif args.budget == "uniform":
        allocation = allocate_uniform(args.alpha, h.num_layers, h.prompt_len, budget_config)
    else:
        allocation = allocate_pyramid(
            args.alpha, h.num_layers, h.prompt_len, args.pyramid_decay, budget_config
        )

    policy = _build_policy(args, h.post_vision_len)
    result = compress_cache(
        trace,
        allocation,
        policy,
        eviction=_eviction_from_args(args),
        config=ScoringConfig(p=args.p, tile=args.tile),
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    alloc_payload = {
        "alpha": allocation.alpha,
        "prompt_len": allocation.prompt_len,
        "requested_total": allocation.requested_total,
        "realized_total": allocation.realized_total,
        "layers": allocation.to_rows(),
    }
    (out_dir / "allocation.json").write_text(json.dumps(alloc_payload, indent=2) + "\n")
    (out_dir / "kept_sets.json").write_text(json.dumps(result.to_summary(), indent=2) + "\n")
    print(
        json.dumps(
            {
                "requested_total": allocation.requested_total,
                "realized_total": allocation.realized_total,
                "kept_counts": [int(c) for c in allocation.kept_counts],
            }
        )
    )
    return 0


def _eviction_from_args(args: argparse.Namespace) -> EvictionConfig:
    return EvictionConfig(recent_window_frac=args.recent_frac)


def cmd_eval(args: argparse.Namespace) -> int:
    trace = _trace_from_args(args)
    h = trace.header
    config = ScoringConfig(p=args.p, tile=args.tile)
    if args.k_list:
        k_list = [int(tok) for tok in args.k_list.split(",") if tok.strip()]
    else:
        k_list = [max(1, math.ceil(0.1 * h.prompt_len))]

    hit_rows = []
    for k in k_list:
        policies = {
            name: _policy_for_eval(args, h.post_vision_len, name, k) for name in POLICY_NAMES
        }
        for layer in range(h.num_layers):
            for head in range(h.num_query_heads):
                for name, policy in policies.items():
                    rate = cache_hit_rate(trace, layer, head, policy, k, config=config)
                    hit_rows.append(
                        {"layer": layer, "head": head, "policy": name, "k": k, "hit_rate": rate}
                    )

    by_layer = []
    for k in k_list:
        for name in POLICY_NAMES:
            for layer in range(h.num_layers):
                rates = [
                    r["hit_rate"]
                    for r in hit_rows
                    if r["k"] == k and r["policy"] == name and r["layer"] == layer
                ]
                by_layer.append(
                    {
                        "policy": name,
                        "k": k,
                        "layer": layer,
                        "hit_rate": float(np.mean(rates)),
                    }
                )

    window = EvalWindow.for_header(h, alpha_eval=args.alpha_eval)
    report = build_report(
        trace, {}, k_list[0], window=window, p=args.p, config=config
    )
    report.hit_rate_rows = hit_rows

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_rows(
        out_dir / "hit_rates", hit_rows, ("layer", "head", "policy", "k", "hit_rate"), args.format
    )
    _write_rows(
        out_dir / "hit_rates_by_layer",
        by_layer,
        ("policy", "k", "layer", "hit_rate"),
        args.format,
    )
    _write_rows(
        out_dir / "modality",
        report.modality_rows,
        ("layer", "modality", "contribution", "coverage"),
        args.format,
    )
    if h.num_layers >= 2 and h.decode_len >= 1:
        try:
            report.curve_stats["prefill_decoding_pearson"] = curve_similarity(
                prefill_sparsity(trace, SparsityConfig(p=args.p, tile=args.tile)),
                decoding_sparsity(trace, SparsityConfig(p=args.p, tile=args.tile)),
            )
        except ZeroVarianceError as exc:
            print(f"warning: {exc}", file=sys.stderr)
    (out_dir / "eval.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(json.dumps({"rows": len(hit_rows), "k_list": k_list}))
    return 0


def _policy_for_eval(args: argparse.Namespace, tau: int, name: str, k: int):
    saved = args.policy
    args.policy = name
    try:
        return _build_policy(args, tau, budget_k=k)
    finally:
        args.policy = saved


def cmd_bench(args: argparse.Namespace) -> int:
    threads = args.threads
    env_threads = os.environ.get("VLCACHE_THREADS")
    if env_threads is not None:
        threads = int(env_threads)
    spec = BenchSpec(
        prompt_len=args.m,
        batch_size=args.batch,
        n_output_tokens=args.n_output,
        alpha=args.alpha,
        policy=args.policy,
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
        num_layers=args.layers,
        num_query_heads=args.query_heads,
        num_kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        post_vision_len=args.tau,
        stats_window=args.stats_window,
        budget=args.budget,
        threads=threads,
        tile=args.tile,
        p=args.p,
        recent_window_frac=args.recent_frac,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.curve_batches:
        batches = [int(tok) for tok in args.curve_batches.split(",") if tok.strip()]
        specs = [dataclasses.replace(spec, batch_size=b) for b in batches]
        rows = latency_throughput_curve(specs)
        path = out_dir / "curve.csv"
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("batch", "mode", "latency_s", "throughput_tok_s"))
            writer.writeheader()
            writer.writerows(rows)
        print(json.dumps({"curve_file": str(path), "points": len(rows)}))
        return 0

    if args.overhead_only:
        report = stats_overhead(spec)
        (out_dir / "overhead.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        print(json.dumps(report.to_dict()))
        return 0

    report = run_bench(spec)
    (out_dir / "bench.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(
        json.dumps(
            {
                "decode_speedup": report.decode_speedup,
                "end_to_end_speedup": report.end_to_end_speedup,
                "kv_bytes_ratio": report.kv_bytes_compressed / report.kv_bytes_full,
                "backend": report.backend,
            }
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlcache",
        description="KV-cache compression experiments over attention traces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic trace file")
    _add_gen_args(p_gen, required=True)
    p_gen.add_argument("-o", "--output", type=str, required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_an = sub.add_parser("analyze", help="sparsity curves and their similarity")
    _add_trace_source(p_an)
    _add_output_args(p_an)
    p_an.add_argument("--p", type=float, default=0.01)
    p_an.add_argument("--tile", type=int, default=128)
    p_an.set_defaults(func=cmd_analyze)

    p_co = sub.add_parser("compress", help="allocate budgets and evict tokens")
    _add_trace_source(p_co)
    _add_output_args(p_co)
    p_co.add_argument("--alpha", type=float, default=0.1)
    p_co.add_argument("--p", type=float, default=0.01)
    p_co.add_argument("--tile", type=int, default=128)
    p_co.add_argument("--policy", choices=POLICY_NAMES, default="vlcache")
    p_co.add_argument("--budget", choices=("sparsity_aware", "uniform", "pyramid"),
                      default="sparsity_aware")
    p_co.add_argument("--pyramid-decay", type=float, default=0.5)
    p_co.add_argument("--sliding-window", type=int, default=DEFAULT_STATS_WINDOW)
    p_co.add_argument("--fallback-window", type=int, default=None)
    p_co.add_argument("--recent-frac", type=float, default=0.10)
    p_co.add_argument("--stats-window", type=int, default=DEFAULT_STATS_WINDOW)
    p_co.set_defaults(func=cmd_compress)

    p_ev = sub.add_parser("eval", help="hit-rate and modality metrics")
    _add_trace_source(p_ev)
    _add_output_args(p_ev)
    p_ev.add_argument("--k-list", type=str, default=None, help="comma-separated k sweep")
    p_ev.add_argument("--alpha-eval", type=float, default=0.1)
    p_ev.add_argument("--p", type=float, default=0.01)
    p_ev.add_argument("--tile", type=int, default=128)
    p_ev.add_argument("--policy", choices=POLICY_NAMES, default="vlcache")
    p_ev.add_argument("--sliding-window", type=int, default=DEFAULT_STATS_WINDOW)
    p_ev.add_argument("--fallback-window", type=int, default=None)
    p_ev.set_defaults(func=cmd_eval)

    p_be = sub.add_parser("bench", help="decode micro-benchmark, full vs compressed")
    p_be.add_argument("--m", type=int, required=True)
    p_be.add_argument("--batch", type=int, default=1)
    p_be.add_argument("--n-output", type=int, default=100)
    p_be.add_argument("--alpha", type=float, default=0.1)
    p_be.add_argument("--policy", choices=POLICY_NAMES, default="vlcache")
    p_be.add_argument("--budget", choices=("sparsity_aware", "uniform"),
                      default="sparsity_aware")
    p_be.add_argument("--repeats", type=int, default=3)
    p_be.add_argument("--warmup", type=int, default=1)
    p_be.add_argument("--seed", type=int, default=0)
    p_be.add_argument("--layers", type=int, default=2)
    p_be.add_argument("--query-heads", type=int, default=4)
    p_be.add_argument("--kv-heads", type=int, default=2)
    p_be.add_argument("--head-dim", type=int, default=64)
    p_be.add_argument("--tau", type=int, default=64)
    p_be.add_argument("--stats-window", type=int, default=DEFAULT_STATS_WINDOW)
    p_be.add_argument("--threads", type=int, default=1)
    p_be.add_argument("--tile", type=int, default=256)
    p_be.add_argument("--p", type=float, default=0.01)
    p_be.add_argument("--recent-frac", type=float, default=0.10)
    p_be.add_argument("--curve-batches", type=str, default=None,
                      help="comma-separated batch sizes for a latency/throughput curve")
    p_be.add_argument("--overhead-only", action="store_true",
                      help="time only the stats + eviction pass")
    p_be.add_argument("--out-dir", type=str, default=".")
    p_be.set_defaults(func=cmd_bench)

    return parser


def main(argv: list | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VLCacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
