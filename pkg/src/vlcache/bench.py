"""CPU micro-benchmark: decoding against full vs compressed KV caches.

The workload is a synthetic trace plus deterministically synthesized V
tensors. Prefill runs a tiled streaming-softmax attention over the whole
prompt (timed once); the decode loop performs n_output_tokens - 1
attention passes per layer, appending one K/V row per step, against
either the full prompt cache or the compacted one. Decode times are the
median of `repeats` runs after `warmup` untimed runs. Memory accounting
is closed-form: 2 (K and V) * retained prompt tokens * head_dim * 4
bytes, summed over layers and KV heads.
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._kernels import BACKEND, decode_step
from .attention import DEFAULT_P, QueryWindow, streaming_stats
from .budget import BudgetAllocation, allocate_sparsity_aware, allocate_uniform
from .errors import SpecTooLargeError, ValidationError
from .scoring import EvictionConfig, evict
from .trace import AttentionTrace, GenSpec, generate_trace

_BUDGET_MODES = ("sparsity_aware", "uniform")
_POLICY_NAMES = ("vlcache", "h2o", "sliding", "streaming")


@dataclass(frozen=True)
class BenchSpec:
    prompt_len: int
    batch_size: int = 1
    n_output_tokens: int = 100
    alpha: float = 0.1
    policy: str = "vlcache"
    repeats: int = 3
    warmup: int = 1
    seed: int = 0
    num_layers: int = 2
    num_query_heads: int = 4
    num_kv_heads: int = 2
    head_dim: int = 64
    post_vision_len: int = 64
    stats_window: int = 50
    budget: str = "sparsity_aware"
    threads: int = 1
    tile: int = 256
    p: float = DEFAULT_P
    recent_window_frac: float = 0.10
    max_bytes: int = 6 * 1024**3

    def __post_init__(self) -> None:
        positive = {
            "prompt_len": self.prompt_len,
            "batch_size": self.batch_size,
            "n_output_tokens": self.n_output_tokens,
            "repeats": self.repeats,
            "warmup": self.warmup,
            "num_layers": self.num_layers,
            "num_query_heads": self.num_query_heads,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "threads": self.threads,
            "tile": self.tile,
        }
        for name, value in positive.items():
            if value < 1:
                raise ValidationError(f"{name}: must be >= 1, got {value}")
        if self.repeats < 3:
            raise ValidationError(f"repeats: must be >= 3, got {self.repeats}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError(f"alpha: must be in (0, 1], got {self.alpha}")
        if self.policy not in _POLICY_NAMES:
            raise ValidationError(f"policy: must be one of {_POLICY_NAMES}, got {self.policy!r}")
        if self.budget not in _BUDGET_MODES:
            raise ValidationError(f"budget: must be one of {_BUDGET_MODES}, got {self.budget!r}")
        if not 0 <= self.post_vision_len <= self.prompt_len:
            raise ValidationError(
                f"post_vision_len: must be in [0, {self.prompt_len}], "
                f"got {self.post_vision_len}"
            )
        if self.stats_window < 0:
            raise ValidationError(f"stats_window: must be >= 0, got {self.stats_window}")

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.n_output_tokens

    def gen_spec(self) -> GenSpec:
        return GenSpec(
            num_layers=self.num_layers,
            num_query_heads=self.num_query_heads,
            num_kv_heads=self.num_kv_heads,
            head_dim=self.head_dim,
            prompt_len=self.prompt_len,
            post_vision_len=self.post_vision_len,
            decode_len=self.n_output_tokens,
            seed=self.seed,
        )


@dataclass(frozen=True)
class BenchReport:
    prompt_len: int
    batch_size: int
    n_output_tokens: int
    alpha: float
    policy: str
    budget: str
    backend: str
    threads: int
    kept_counts: list
    prefill_time_s: float
    stats_overhead_time_s: float
    decode_time_full_s: float
    decode_time_compressed_s: float
    decode_times_full_s: list
    decode_times_compressed_s: list
    kv_bytes_full: int
    kv_bytes_compressed: int

    @property
    def prefill_speedup(self) -> float:
        # prefill itself is untouched; the stats pass is pure overhead
        return self.prefill_time_s / (self.prefill_time_s + self.stats_overhead_time_s)

    @property
    def decode_speedup(self) -> float:
        return self.decode_time_full_s / self.decode_time_compressed_s

    @property
    def end_to_end_speedup(self) -> float:
        full = self.prefill_time_s + self.decode_time_full_s
        compressed = (
            self.prefill_time_s + self.stats_overhead_time_s + self.decode_time_compressed_s
        )
        return full / compressed

    def to_dict(self) -> dict:
        return {
            "prompt_len": self.prompt_len,
            "batch_size": self.batch_size,
            "n_output_tokens": self.n_output_tokens,
            "alpha": self.alpha,
            "policy": self.policy,
            "budget": self.budget,
            "backend": self.backend,
            "threads": self.threads,
            "kept_counts": self.kept_counts,
            "prefill_time_s": self.prefill_time_s,
            "stats_overhead_time_s": self.stats_overhead_time_s,
            "decode_time_full_s": self.decode_time_full_s,
            "decode_time_compressed_s": self.decode_time_compressed_s,
            "decode_times_full_s": self.decode_times_full_s,
            "decode_times_compressed_s": self.decode_times_compressed_s,
            "kv_bytes_full": self.kv_bytes_full,
            "kv_bytes_compressed": self.kv_bytes_compressed,
            "prefill_speedup": self.prefill_speedup,
            "decode_speedup": self.decode_speedup,
            "end_to_end_speedup": self.end_to_end_speedup,
        }


def estimate_bytes(spec: BenchSpec) -> int:
    """Closed-form upper bound on working-set bytes for run_bench."""
    t = spec.seq_len
    d = spec.head_dim
    trace_bytes = spec.num_layers * (spec.num_query_heads + spec.num_kv_heads) * t * d * 4
    values_bytes = spec.num_layers * spec.num_kv_heads * t * d * 4
    # full + compressed decode buffers, K and V, one set per sequence
    cache_bytes = spec.batch_size * spec.num_layers * spec.num_kv_heads * 2 * t * d * 4 * 2
    return trace_bytes + values_bytes + cache_bytes


def _check_size(spec: BenchSpec) -> None:
    need = estimate_bytes(spec)
    if need > spec.max_bytes:
        raise SpecTooLargeError(
            f"spec needs about {need} bytes of working set, cap is {spec.max_bytes}"
        )


def synthesize_values(spec: BenchSpec) -> list:
    """Per-layer V tensors [H_kv, seq_len, d], deterministic in the seed."""
    rng = np.random.default_rng(np.uint64(spec.seed) ^ np.uint64(0x9E3779B97F4A7C15))
    return [
        rng.standard_normal((spec.num_kv_heads, spec.seq_len, spec.head_dim)).astype(np.float32)
        for _ in range(spec.num_layers)
    ]


def _prefill_layer(
    queries: np.ndarray, keys: np.ndarray, values: np.ndarray, m: int, tile: int
) -> np.ndarray:
    """Causal attention outputs for prompt rows of one layer, f32 [H, m, d].

    Tiled streaming softmax; float32 BLAS throughout, since this path
    exists for timing, not for metric precision.
    """
    n_heads, _, d = queries.shape
    group = n_heads // keys.shape[0]
    inv = np.float32(1.0 / np.sqrt(d))
    out = np.empty((n_heads, m, d), dtype=np.float32)
    neg = np.float32(-np.inf)
    for head in range(n_heads):
        q_all = queries[head, :m]
        k_all = keys[head // group, :m]
        v_all = values[head // group, :m]
        for q0 in range(0, m, tile):
            q1 = min(q0 + tile, m)
            rows = np.arange(q0, q1)[:, None]
            acc = np.zeros((q1 - q0, d), dtype=np.float32)
            row_max = np.full(q1 - q0, neg, dtype=np.float32)
            row_sum = np.zeros(q1 - q0, dtype=np.float32)
            for k0 in range(0, q1, tile):
                k1 = min(k0 + tile, q1)
                logits = (q_all[q0:q1] @ k_all[k0:k1].T) * inv
                if k1 > q0 + 1:
                    cols = np.arange(k0, k1)[None, :]
                    logits = np.where(cols <= rows, logits, neg)
                new_max = np.maximum(row_max, logits.max(axis=1))
                e = np.exp(logits - new_max[:, None])
                rescale = np.exp(row_max - new_max)
                acc = acc * rescale[:, None] + e @ v_all[k0:k1]
                row_sum = row_sum * rescale + e.sum(axis=1)
                row_max = new_max
            out[head, q0:q1] = acc / row_sum[:, None]
    return out


def time_prefill(trace: AttentionTrace, values: list, spec: BenchSpec) -> float:
    """Seconds for one full-batch prefill, timed once."""
    m = trace.header.prompt_len
    start = time.perf_counter()
    for _ in range(spec.batch_size):
        for layer in range(trace.header.num_layers):
            _prefill_layer(trace.queries[layer], trace.keys[layer], values[layer], m, spec.tile)
    return time.perf_counter() - start


def _compression_pass(trace: AttentionTrace, spec: BenchSpec):
    """Stats + allocation + eviction, timed.

    Returns (allocation, kept [L][H_kv] index arrays, seconds). Scoring
    windows follow the operating defaults: the sparsity window is the
    last min(tau, stats_window) rows, vlcache scores reuse that same
    single stats pass, h2o scores the whole prompt, sliding scores the
    last stats_window rows, streaming is positional.
    """
    h = trace.header
    m = h.prompt_len
    group = h.group_size
    eviction = EvictionConfig(recent_window_frac=spec.recent_window_frac)
    start = time.perf_counter()

    gamma_window = min(h.post_vision_len, spec.stats_window)
    if gamma_window == 0:
        gamma_window = min(m, spec.stats_window) if spec.stats_window else 0
    need_gamma = spec.budget == "sparsity_aware"
    if need_gamma and gamma_window == 0:
        raise ValidationError("stats_window: sparsity-aware budget needs a non-empty window")

    score_window = None
    if spec.policy == "vlcache":
        score_window = QueryWindow(m - gamma_window, m) if gamma_window else None
        if score_window is None:
            raise ValidationError("post_vision_len: vlcache policy needs a stats window")
    elif spec.policy == "sliding":
        w = min(spec.stats_window, m)
        if w == 0:
            raise ValidationError("stats_window: sliding policy needs a positive window")
        score_window = QueryWindow(m - w, m)
    elif spec.policy == "h2o":
        score_window = QueryWindow(0, m)

    gamma = np.zeros((h.num_layers, h.num_query_heads), dtype=np.float64)
    scores = np.zeros((h.num_layers, h.num_kv_heads, m), dtype=np.float64)
    for layer in range(h.num_layers):
        for q_h in range(h.num_query_heads):
            stats_from_score_pass = (
                score_window is not None
                and spec.policy == "vlcache"
            )
            if score_window is not None:
                st = streaming_stats(trace, layer, q_h, score_window, p=spec.p, tile=spec.tile)
                scores[layer, q_h // group] += st.col_score[:m]
                if need_gamma and stats_from_score_pass:
                    gamma[layer, q_h] = (
                        st.below_threshold_count.sum() / st.causal_entry_count.sum()
                    )
            if need_gamma and not stats_from_score_pass:
                gw = QueryWindow(m - gamma_window, m)
                st = streaming_stats(trace, layer, q_h, gw, p=spec.p, tile=spec.tile)
                gamma[layer, q_h] = (
                    st.below_threshold_count.sum() / st.causal_entry_count.sum()
                )
    scores /= group

    if spec.budget == "sparsity_aware":
        allocation = allocate_sparsity_aware(gamma.mean(axis=1), spec.alpha, m)
    else:
        allocation = allocate_uniform(spec.alpha, h.num_layers, m)

    kept = []
    for layer in range(h.num_layers):
        count = int(allocation.kept_counts[layer])
        row = []
        for kv in range(h.num_kv_heads):
            if spec.policy == "streaming":
                n_init = -(-count // 10)  # ceil(0.1 * count)
                layer_scores = np.zeros(m, dtype=np.float64)
                layer_scores[m - min(count - n_init, m):] = 1.0
                layer_scores[: min(n_init, m)] = 2.0
                row.append(evict(layer_scores, count, eviction))
            else:
                row.append(evict(scores[layer, kv], count, eviction))
        kept.append(row)
    elapsed = time.perf_counter() - start
    return allocation, kept, elapsed


def kv_cache_bytes(tokens_per_layer: list, spec: BenchSpec) -> int:
    """2 (K and V) * tokens * d * 4 bytes, summed over layers and KV heads."""
    return sum(2 * t * spec.head_dim * 4 * spec.num_kv_heads for t in tokens_per_layer)


def _make_seq_buffers(trace: AttentionTrace, values: list, spec: BenchSpec, kept) -> list:
    """Per-(layer, kv) growable K/V buffers for one sequence."""
    h = trace.header
    m = h.prompt_len
    bufs = []
    for layer in range(h.num_layers):
        row = []
        for kv in range(h.num_kv_heads):
            if kept is None:
                base_k = trace.keys[layer][kv, :m]
                base_v = values[layer][kv, :m]
            else:
                idx = kept[layer][kv]
                base_k = trace.keys[layer][kv, idx]
                base_v = values[layer][kv, idx]
            n0 = base_k.shape[0]
            k_buf = np.empty((n0 + spec.n_output_tokens, h.head_dim), dtype=np.float32)
            v_buf = np.empty_like(k_buf)
            k_buf[:n0] = base_k
            v_buf[:n0] = base_v
            row.append((k_buf, v_buf, n0))
        bufs.append(row)
    return bufs


def _decode_sequence(trace: AttentionTrace, values: list, spec: BenchSpec, bufs: list) -> None:
    h = trace.header
    m = h.prompt_len
    group = h.group_size
    lengths = [[n0 for (_, _, n0) in row] for row in bufs]
    for step in range(spec.n_output_tokens - 1):
        token_row = m + step
        for layer in range(h.num_layers):
            q_row = np.ascontiguousarray(trace.queries[layer][:, token_row])
            for kv in range(h.num_kv_heads):
                k_buf, v_buf, _ = bufs[layer][kv]
                cur = lengths[layer][kv]
                k_buf[cur] = trace.keys[layer][kv, token_row]
                v_buf[cur] = values[layer][kv, token_row]
                cur += 1
                lengths[layer][kv] = cur
                decode_step(q_row[kv * group:(kv + 1) * group], k_buf[:cur], v_buf[:cur])


def _time_decode(trace: AttentionTrace, values: list, spec: BenchSpec, kept) -> tuple:
    """(median seconds, raw seconds list) across repeats of a batch decode."""
    seq_bufs = [_make_seq_buffers(trace, values, spec, kept) for _ in range(spec.batch_size)]

    def one_batch() -> None:
        if spec.threads > 1:
            with ThreadPoolExecutor(max_workers=spec.threads) as pool:
                list(pool.map(lambda b: _decode_sequence(trace, values, spec, b), seq_bufs))
        else:
            for bufs in seq_bufs:
                _decode_sequence(trace, values, spec, bufs)

    for _ in range(spec.warmup):
        one_batch()
    times = []
    for _ in range(spec.repeats):
        start = time.perf_counter()
        one_batch()
        times.append(time.perf_counter() - start)
    return statistics.median(times), times


def run_bench(spec: BenchSpec) -> BenchReport:
    _check_size(spec)
    trace, _ = generate_trace(spec.gen_spec())
    values = synthesize_values(spec)

    prefill_s = time_prefill(trace, values, spec)
    allocation, kept, stats_s = _compression_pass(trace, spec)

    full_median, full_times = _time_decode(trace, values, spec, None)
    comp_median, comp_times = _time_decode(trace, values, spec, kept)

    m = trace.header.prompt_len
    kept_counts = [int(c) for c in allocation.kept_counts]
    return BenchReport(
        prompt_len=spec.prompt_len,
        batch_size=spec.batch_size,
        n_output_tokens=spec.n_output_tokens,
        alpha=spec.alpha,
        policy=spec.policy,
        budget=spec.budget,
        backend=BACKEND,
        threads=spec.threads,
        kept_counts=kept_counts,
        prefill_time_s=prefill_s,
        stats_overhead_time_s=stats_s,
        decode_time_full_s=full_median,
        decode_time_compressed_s=comp_median,
        decode_times_full_s=full_times,
        decode_times_compressed_s=comp_times,
        kv_bytes_full=kv_cache_bytes([m] * spec.num_layers, spec),
        kv_bytes_compressed=kv_cache_bytes(kept_counts, spec),
    )


@dataclass(frozen=True)
class OverheadReport:
    stats_time_s: float
    prefill_time_s: float

    @property
    def fraction(self) -> float:
        if self.stats_time_s == 0.0:
            return 0.0
        return self.stats_time_s / self.prefill_time_s

    def to_dict(self) -> dict:
        return {
            "stats_time_s": self.stats_time_s,
            "prefill_time_s": self.prefill_time_s,
            "fraction": self.fraction,
        }


def stats_overhead(spec: BenchSpec) -> OverheadReport:
    """Cost of the stats window + eviction pass relative to prefill."""
    _check_size(spec)
    trace, _ = generate_trace(spec.gen_spec())
    values = synthesize_values(spec)
    window = min(trace.header.post_vision_len, spec.stats_window)
    prefill_s = time_prefill(trace, values, spec)
    if window == 0:
        return OverheadReport(stats_time_s=0.0, prefill_time_s=prefill_s)
    _, _, stats_s = _compression_pass(trace, spec)
    return OverheadReport(stats_time_s=stats_s, prefill_time_s=prefill_s)


CURVE_FIELDS = ("batch", "mode", "latency_s", "throughput_tok_s")


def latency_throughput_curve(specs: list) -> list:
    """Rows of (batch, mode, latency_s, throughput_tok_s) for each spec.

    Latency is the end-to-end batch time; throughput is total generated
    tokens over that time. All specs must share a prompt length.
    """
    if not specs:
        raise ValidationError("specs: need at least one BenchSpec")
    if len({s.prompt_len for s in specs}) != 1:
        raise ValidationError("specs: all BenchSpecs must share prompt_len")
    rows = []
    for spec in specs:
        report = run_bench(spec)
        total_tokens = spec.batch_size * spec.n_output_tokens
        full_latency = report.prefill_time_s + report.decode_time_full_s
        comp_latency = (
            report.prefill_time_s
            + report.stats_overhead_time_s
            + report.decode_time_compressed_s
        )
        rows.append(
            {
                "batch": spec.batch_size,
                "mode": "full",
                "latency_s": full_latency,
                "throughput_tok_s": total_tokens / full_latency,
            }
        )
        rows.append(
            {
                "batch": spec.batch_size,
                "mode": "compressed",
                "latency_s": comp_latency,
                "throughput_tok_s": total_tokens / comp_latency,
            }
        )
    return rows
