"""Attention trace data model, synthetic generator, and binary I/O.

A trace holds per-layer query and key tensors for a prompt of m tokens
followed by n_dec decoding steps, plus a modality layout splitting the
prompt into pre-vision / vision / post-vision segments. Tensors are
float32; queries are [H, m+n_dec, d] per layer and keys [H_kv, m+n_dec, d]
with grouped-query attention (query head h reads KV head h // (H // H_kv)).

File format (little-endian throughout):

    magic   4 bytes  b"VLCT"
    version u32      1
    header  7 x u32  layers, query heads, kv heads, head dim, prompt len,
                     post-vision len, decode len
    seed    u64
    layout  6 x u32  (start, len) for pre-vision, vision, post-vision
    payload per layer: Q bytes then K bytes, row-major float32

A JSON sidecar (same path + ".json") mirrors the header and layout for
tooling; the binary file is authoritative.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TraceFormatError, TraceTruncatedError, TraceValueError, ValidationError

MAGIC = b"VLCT"
FORMAT_VERSION = 1

_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1

# Generator shape constants. Per layer the generator draws a prefill logit
# scale, a post-vision gain, and a warm-band fraction; per KV head a unit
# direction that post-vision and decoding queries point along. Planted
# heavy keys are scaled unit vectors on that direction (4x the expected
# norm of an unstructured key), a warm band sits a fixed logit margin
# below them (this is what makes per-layer sparsity vary), and the last
# few prompt keys form a strictly colder staircase so that rankings have
# a deterministic tail.
_SCALE_RANGE = (0.8, 2.0)
_PV_GAIN_RANGE = (0.8, 1.5)
_WARM_FRAC_RANGE = (0.05, 0.6)
_DIR_JITTER = 0.25
_HEAVY_GAIN = 4.0
_WARM_LOGIT_GAP = 2.0
_WARM_LOGIT_JITTER = 0.5
_STAIR_LOGIT_FLOOR = 6.0
_STAIR_LOGIT_STEP = 2.0


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ValidationError(f"{name}: {msg}")


@dataclass(frozen=True)
class TraceHeader:
    """Shape and identity of one trace."""

    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    prompt_len: int
    post_vision_len: int
    decode_len: int
    seed: int

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_query_heads", "num_kv_heads",
                     "head_dim", "prompt_len"):
            v = getattr(self, name)
            _require(1 <= v <= _U32_MAX, name, f"must be in [1, 2^32), got {v}")
        _require(self.num_query_heads % self.num_kv_heads == 0,
                 "num_kv_heads", "must divide num_query_heads")
        _require(0 <= self.post_vision_len <= self.prompt_len,
                 "post_vision_len", "must be in [0, prompt_len]")
        _require(0 <= self.decode_len <= _U32_MAX,
                 "decode_len", "must be in [0, 2^32)")
        _require(0 <= self.seed <= _U64_MAX, "seed", "must fit in u64")

    @property
    def seq_len(self) -> int:
        return self.prompt_len + self.decode_len

    @property
    def group_size(self) -> int:
        return self.num_query_heads // self.num_kv_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_query_heads": self.num_query_heads,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "prompt_len": self.prompt_len,
            "post_vision_len": self.post_vision_len,
            "decode_len": self.decode_len,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ModalityLayout:
    """Contiguous (start, len) prompt segments: pre-vision, vision, post-vision."""

    pre_vision: tuple[int, int]
    vision: tuple[int, int]
    post_vision: tuple[int, int]

    def __post_init__(self) -> None:
        _require(self.pre_vision[0] == 0, "pre_vision", "must start at 0")
        for name in ("pre_vision", "vision", "post_vision"):
            s, n = getattr(self, name)
            _require(s >= 0 and n >= 0, name, "start/len must be non-negative")
        _require(self.vision[0] == self.pre_vision[0] + self.pre_vision[1],
                 "vision", "must start where pre_vision ends")
        _require(self.post_vision[0] == self.vision[0] + self.vision[1],
                 "post_vision", "must start where vision ends")

    @property
    def prompt_len(self) -> int:
        return self.post_vision[0] + self.post_vision[1]

    def indices(self, modality: str) -> np.ndarray:
        """Prompt indices for "vision" or "language" (pre + post vision)."""
        if modality == "vision":
            s, n = self.vision
            return np.arange(s, s + n)
        if modality == "language":
            ps, pn = self.pre_vision
            ts, tn = self.post_vision
            return np.concatenate([np.arange(ps, ps + pn), np.arange(ts, ts + tn)])
        raise ValidationError(f"modality: expected 'vision' or 'language', got {modality!r}")

    def to_dict(self) -> dict:
        return {
            "pre_vision": list(self.pre_vision),
            "vision": list(self.vision),
            "post_vision": list(self.post_vision),
        }


@dataclass(eq=False)
class AttentionTrace:
    """Per-layer query/key tensors plus header and modality layout."""

    header: TraceHeader
    layout: ModalityLayout
    queries: list = field(repr=False)
    keys: list = field(repr=False)

    def __post_init__(self) -> None:
        h = self.header
        _require(self.layout.prompt_len == h.prompt_len,
                 "layout", "segments must cover [0, prompt_len)")
        _require(self.layout.post_vision[1] == h.post_vision_len,
                 "layout", "post_vision length must match the header")
        _require(len(self.queries) == h.num_layers, "queries", "one tensor per layer")
        _require(len(self.keys) == h.num_layers, "keys", "one tensor per layer")
        t = h.seq_len
        for l in range(h.num_layers):
            q, k = self.queries[l], self.keys[l]
            _require(q.dtype == np.float32 and k.dtype == np.float32,
                     "dtype", "tensors must be float32")
            _require(q.shape == (h.num_query_heads, t, h.head_dim),
                     "queries", f"layer {l} must be [H, m+n_dec, d], got {q.shape}")
            _require(k.shape == (h.num_kv_heads, t, h.head_dim),
                     "keys", f"layer {l} must be [H_kv, m+n_dec, d], got {k.shape}")
            if not np.isfinite(q).all() or not np.isfinite(k).all():
                raise TraceValueError(f"layer {l} contains non-finite values")

    def kv_head_for(self, query_head: int) -> int:
        return query_head // self.header.group_size

    def query_rows(self, layer: int, head: int, start: int, end: int) -> np.ndarray:
        """Contiguous float32 [end-start, d] slice of one head's queries."""
        return self.queries[layer][head, start:end]

    def key_rows(self, layer: int, query_head: int, end: int) -> np.ndarray:
        """Keys [end, d] visible to query_head, taken from its KV head."""
        return self.keys[layer][self.kv_head_for(query_head), :end]


@dataclass(frozen=True)
class GenSpec:
    """Parameters of the synthetic trace generator.

    heavy_fraction fixes the planted heavy-key count at
    ceil(heavy_fraction * prompt_len); noise_scale is the ratio of decode
    query perturbation to the post-vision logit scale (0 makes decoding
    queries identical to the post-vision centroid row). pre_vision_len
    defaults to min(16, (prompt_len - post_vision_len) // 8).
    """

    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    prompt_len: int
    post_vision_len: int
    decode_len: int
    seed: int
    heavy_fraction: float = 0.05
    noise_scale: float = 0.1
    pre_vision_len: int | None = None

    def __post_init__(self) -> None:
        self.header()  # validates the shape fields
        _require(0.0 < self.heavy_fraction < 1.0,
                 "heavy_fraction", "must be in (0, 1)")
        _require(self.heavy_fraction * self.prompt_len >= 1.0,
                 "heavy_fraction", "heavy_fraction * prompt_len must be >= 1")
        _require(self.noise_scale >= 0.0, "noise_scale", "must be non-negative")
        if self.pre_vision_len is not None:
            _require(0 <= self.pre_vision_len <= self.prompt_len - self.post_vision_len,
                     "pre_vision_len", "must fit before the post-vision segment")

    def header(self) -> TraceHeader:
        return TraceHeader(
            num_layers=self.num_layers,
            num_query_heads=self.num_query_heads,
            num_kv_heads=self.num_kv_heads,
            head_dim=self.head_dim,
            prompt_len=self.prompt_len,
            post_vision_len=self.post_vision_len,
            decode_len=self.decode_len,
            seed=self.seed,
        )

    def layout(self) -> ModalityLayout:
        pre = self.pre_vision_len
        if pre is None:
            pre = min(16, (self.prompt_len - self.post_vision_len) // 8)
        vis = self.prompt_len - self.post_vision_len - pre
        return ModalityLayout(
            pre_vision=(0, pre),
            vision=(pre, vis),
            post_vision=(pre + vis, self.post_vision_len),
        )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_trace(spec: GenSpec) -> tuple[AttentionTrace, np.ndarray]:
    """Deterministically synthesize a trace; returns (trace, planted indices).

    RNG draws (PCG64 seeded with spec.seed) happen in a fixed order:
    planted positions, per-layer scalar knobs, then per layer the KV
    directions, per-head tilts, keys, and queries. The planted heavy keys
    are _HEAVY_GAIN * sqrt(d) unit vectors along the KV direction, so for
    noise_scale 0 they dominate the first decoding row's attention for
    every query head.
    """
    hdr = spec.header()
    layout = spec.layout()
    rng = np.random.default_rng(spec.seed)

    m, tau, t = hdr.prompt_len, hdr.post_vision_len, hdr.seq_len
    d, big_l = hdr.head_dim, hdr.num_layers
    h_q, h_kv, group = hdr.num_query_heads, hdr.num_kv_heads, hdr.group_size
    sqd = math.sqrt(d)

    n_heavy = math.ceil(spec.heavy_fraction * m)
    t_stair = max(0, min(tau - 1, m - n_heavy))
    planted = np.sort(rng.choice(m - t_stair, size=n_heavy, replace=False))
    stair_cols = np.arange(m - t_stair, m)
    warm_cand = np.setdiff1d(np.arange(m - t_stair), planted)

    scales = rng.uniform(*_SCALE_RANGE, size=big_l)
    gains = rng.uniform(*_PV_GAIN_RANGE, size=big_l)
    warm_fracs = rng.uniform(*_WARM_FRAC_RANGE, size=big_l)
    stair_depth = _STAIR_LOGIT_FLOOR + _STAIR_LOGIT_STEP * (
        np.arange(1, t_stair + 1) / max(t_stair, 1)
    )

    queries, keys = [], []
    for l in range(big_l):
        c_dirs = np.empty((h_kv, d))
        for kv in range(h_kv):
            c_dirs[kv] = _unit(rng.standard_normal(d))
        head_dirs = np.empty((h_q, d))
        for h in range(h_q):
            head_dirs[h] = _unit(c_dirs[h // group] + _DIR_JITTER * rng.standard_normal(d))

        k_l = np.empty((h_kv, t, d))
        for kv in range(h_kv):
            kk = rng.standard_normal((t, d))
            kk[planted] = _HEAVY_GAIN * sqd * c_dirs[kv]
            n_warm = int(round(warm_fracs[l] * warm_cand.size))
            if n_warm > 0:
                warm_cols = rng.choice(warm_cand, size=n_warm, replace=False)
                jit = rng.uniform(-_WARM_LOGIT_JITTER, _WARM_LOGIT_JITTER, size=n_warm)
                kappa = _HEAVY_GAIN * sqd - (_WARM_LOGIT_GAP + jit) / gains[l]
                kk[warm_cols] = kappa[:, None] * c_dirs[kv]
            if t_stair > 0:
                kk[stair_cols] = -stair_depth[:, None] * c_dirs[kv]
            k_l[kv] = kk
        keys.append(np.ascontiguousarray(k_l, dtype=np.float32))

        q_l = np.empty((h_q, t, d))
        for h in range(h_q):
            qq = np.empty((t, d))
            qq[: m - tau] = scales[l] * rng.standard_normal((m - tau, d))
            pv_row = gains[l] * sqd * head_dirs[h]
            qq[m - tau : m] = pv_row
            centroid = qq[m - tau : m].mean(axis=0) if tau >= 1 else pv_row
            qq[m:] = centroid[None, :] + spec.noise_scale * gains[l] * rng.standard_normal(
                (hdr.decode_len, d)
            )
            q_l[h] = qq
        queries.append(np.ascontiguousarray(q_l, dtype=np.float32))

    trace = AttentionTrace(header=hdr, layout=layout, queries=queries, keys=keys)
    return trace, planted.astype(np.int64)


_HEADER_STRUCT = struct.Struct("<4sI7IQ6I")


def write_trace(trace: AttentionTrace, path: str | Path) -> None:
    """Write the binary trace and its JSON sidecar (path + ".json")."""
    path = Path(path)
    h, lay = trace.header, trace.layout
    head = _HEADER_STRUCT.pack(
        MAGIC, FORMAT_VERSION,
        h.num_layers, h.num_query_heads, h.num_kv_heads, h.head_dim,
        h.prompt_len, h.post_vision_len, h.decode_len, h.seed,
        lay.pre_vision[0], lay.pre_vision[1],
        lay.vision[0], lay.vision[1],
        lay.post_vision[0], lay.post_vision[1],
    )
    with open(path, "wb") as f:
        f.write(head)
        for l in range(h.num_layers):
            f.write(np.ascontiguousarray(trace.queries[l], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(trace.keys[l], dtype="<f4").tobytes())
    sidecar = {
        "magic": MAGIC.decode("ascii"),
        "version": FORMAT_VERSION,
        "header": h.to_dict(),
        "layout": lay.to_dict(),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def read_trace(path: str | Path) -> AttentionTrace:
    """Read a binary trace; raises distinct errors for each failure mode."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_STRUCT.size:
        raise TraceTruncatedError(
            f"file is {len(raw)} bytes, shorter than the {_HEADER_STRUCT.size}-byte header"
        )
    fields = _HEADER_STRUCT.unpack_from(raw, 0)
    magic, version = fields[0], fields[1]
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise TraceFormatError(f"unsupported version {version}, expected {FORMAT_VERSION}")
    header = TraceHeader(*fields[2:10])
    layout = ModalityLayout(
        pre_vision=(fields[10], fields[11]),
        vision=(fields[12], fields[13]),
        post_vision=(fields[14], fields[15]),
    )
    t, d = header.seq_len, header.head_dim
    q_count = header.num_query_heads * t * d
    k_count = header.num_kv_heads * t * d
    expected = _HEADER_STRUCT.size + 4 * header.num_layers * (q_count + k_count)
    if len(raw) != expected:
        raise TraceTruncatedError(
            f"payload size mismatch: expected {expected} bytes total, got {len(raw)}"
        )
    queries, keys = [], []
    off = _HEADER_STRUCT.size
    for _ in range(header.num_layers):
        q = np.frombuffer(raw, dtype="<f4", count=q_count, offset=off)
        off += 4 * q_count
        k = np.frombuffer(raw, dtype="<f4", count=k_count, offset=off)
        off += 4 * k_count
        queries.append(q.reshape(header.num_query_heads, t, d).copy())
        keys.append(k.reshape(header.num_kv_heads, t, d).copy())
    return AttentionTrace(header=header, layout=layout, queries=queries, keys=keys)
