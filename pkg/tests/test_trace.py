import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_spec
from vlcache import (
    AttentionTrace,
    GenSpec,
    ModalityLayout,
    TraceFormatError,
    TraceHeader,
    TraceTruncatedError,
    TraceValueError,
    ValidationError,
    generate_trace,
    read_trace,
    write_trace,
)


class TestHeader:
    def test_seq_len_and_group_size(self):
        h = TraceHeader(2, 8, 2, 64, 100, 10, 5, 0)
        assert h.seq_len == 105
        assert h.group_size == 4

    def test_kv_heads_must_divide_query_heads(self):
        with pytest.raises(ValidationError, match="num_kv_heads"):
            TraceHeader(1, 6, 4, 64, 10, 0, 0, 0)

    def test_post_vision_len_bounded_by_prompt(self):
        with pytest.raises(ValidationError, match="post_vision_len"):
            TraceHeader(1, 2, 2, 64, 10, 11, 0, 0)

    @pytest.mark.parametrize("field", ["num_layers", "num_query_heads", "head_dim", "prompt_len"])
    def test_positive_fields(self, field):
        kwargs = dict(
            num_layers=1, num_query_heads=2, num_kv_heads=1, head_dim=8,
            prompt_len=10, post_vision_len=0, decode_len=0, seed=0,
        )
        kwargs[field] = 0
        with pytest.raises(ValidationError, match=field):
            TraceHeader(**kwargs)


class TestLayout:
    def test_segments_must_chain(self):
        with pytest.raises(ValidationError, match="vision"):
            ModalityLayout(pre_vision=(0, 4), vision=(5, 10), post_vision=(15, 2))

    def test_indices_partition_prompt(self):
        lay = ModalityLayout(pre_vision=(0, 3), vision=(3, 7), post_vision=(10, 5))
        vis = lay.indices("vision")
        lang = lay.indices("language")
        assert lay.prompt_len == 15
        merged = np.sort(np.concatenate([vis, lang]))
        assert np.array_equal(merged, np.arange(15))

    def test_unknown_modality(self):
        lay = ModalityLayout(pre_vision=(0, 1), vision=(1, 1), post_vision=(2, 1))
        with pytest.raises(ValidationError, match="modality"):
            lay.indices("audio")


class TestGenSpec:
    def test_heavy_fraction_must_plant_at_least_one(self):
        with pytest.raises(ValidationError, match="heavy_fraction"):
            make_spec(prompt_len=16, heavy_fraction=0.01)

    def test_pre_vision_len_must_fit(self):
        with pytest.raises(ValidationError, match="pre_vision_len"):
            make_spec(prompt_len=32, post_vision_len=8, pre_vision_len=30)

    def test_layout_segments_cover_prompt(self):
        spec = make_spec(prompt_len=100, post_vision_len=20)
        lay = spec.layout()
        assert lay.prompt_len == 100
        assert lay.post_vision == (80, 20)


class TestGenerator:
    def test_deterministic(self):
        spec = make_spec(seed=42)
        t1, p1 = generate_trace(spec)
        t2, p2 = generate_trace(spec)
        assert np.array_equal(p1, p2)
        for l in range(spec.num_layers):
            assert np.array_equal(t1.queries[l], t2.queries[l])
            assert np.array_equal(t1.keys[l], t2.keys[l])

    def test_seed_changes_output(self):
        t1, _ = generate_trace(make_spec(seed=1))
        t2, _ = generate_trace(make_spec(seed=2))
        assert not np.array_equal(t1.keys[0], t2.keys[0])

    def test_planted_count_and_range(self):
        spec = make_spec(prompt_len=200, post_vision_len=30, heavy_fraction=0.06)
        trace, planted = generate_trace(spec)
        assert planted.size == math.ceil(0.06 * 200)
        assert np.array_equal(planted, np.sort(planted))
        assert np.unique(planted).size == planted.size
        # planted keys never land on the cold staircase tail
        n_stair = min(spec.post_vision_len - 1, 200 - planted.size)
        assert planted.max() < 200 - n_stair

    def test_shapes_and_dtype(self):
        spec = make_spec()
        trace, _ = generate_trace(spec)
        h = trace.header
        assert len(trace.queries) == h.num_layers
        q, k = trace.queries[0], trace.keys[0]
        assert q.shape == (h.num_query_heads, h.seq_len, h.head_dim)
        assert k.shape == (h.num_kv_heads, h.seq_len, h.head_dim)
        assert q.dtype == np.float32 and k.dtype == np.float32

    def test_zero_noise_decode_rows_equal_centroid(self):
        spec = make_spec(noise_scale=0.0, decode_len=3)
        trace, _ = generate_trace(spec)
        h = trace.header
        m, tau = h.prompt_len, h.post_vision_len
        q = trace.queries[0][0]
        centroid = q[m - tau : m].mean(axis=0)
        for r in range(m, m + 3):
            np.testing.assert_allclose(q[r], centroid, rtol=1e-5, atol=1e-6)

    def test_planted_dominate_first_decode_row(self, trace_mid):
        trace, planted = trace_mid
        h = trace.header
        m = h.prompt_len
        for l in range(h.num_layers):
            for qh in range(h.num_query_heads):
                q = trace.queries[l][qh, m].astype(np.float64)
                keys = trace.keys[l][trace.kv_head_for(qh), :m].astype(np.float64)
                logits = keys @ q
                top = np.argsort(logits)[-planted.size :]
                assert set(top.tolist()) == set(planted.tolist())

    def test_kv_head_mapping(self):
        trace, _ = generate_trace(make_spec(num_query_heads=8, num_kv_heads=2))
        assert [trace.kv_head_for(h) for h in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]


class TestTraceValidation:
    def test_rejects_non_finite(self):
        spec = make_spec()
        trace, _ = generate_trace(spec)
        bad_q = [q.copy() for q in trace.queries]
        bad_q[0][0, 0, 0] = np.nan
        with pytest.raises(TraceValueError, match="non-finite"):
            AttentionTrace(trace.header, trace.layout, bad_q, trace.keys)

    def test_rejects_wrong_shape(self):
        spec = make_spec()
        trace, _ = generate_trace(spec)
        bad_k = [k[:, :-1] for k in trace.keys]
        with pytest.raises(ValidationError, match="keys"):
            AttentionTrace(trace.header, trace.layout, trace.queries, bad_k)

    def test_rejects_layout_mismatch(self):
        spec = make_spec()
        trace, _ = generate_trace(spec)
        lay = ModalityLayout(pre_vision=(0, 1), vision=(1, 1), post_vision=(2, 1))
        with pytest.raises(ValidationError, match="layout"):
            AttentionTrace(trace.header, lay, trace.queries, trace.keys)


class TestIO:
    def test_round_trip(self, tmp_path, trace_small):
        trace, _ = trace_small
        path = tmp_path / "t.vlct"
        write_trace(trace, path)
        back = read_trace(path)
        assert back.header == trace.header
        assert back.layout == trace.layout
        for l in range(trace.header.num_layers):
            assert np.array_equal(back.queries[l], trace.queries[l])
            assert np.array_equal(back.keys[l], trace.keys[l])

    def test_write_is_deterministic(self, tmp_path, trace_small):
        trace, _ = trace_small
        a, b = tmp_path / "a.vlct", tmp_path / "b.vlct"
        write_trace(trace, a)
        write_trace(trace, b)
        assert a.read_bytes() == b.read_bytes()

    def test_sidecar_written(self, tmp_path, trace_small):
        trace, _ = trace_small
        path = tmp_path / "t.vlct"
        write_trace(trace, path)
        sidecar = path.with_name("t.vlct.json")
        assert sidecar.exists()
        assert '"prompt_len"' in sidecar.read_text()

    def test_bad_magic(self, tmp_path, trace_small):
        trace, _ = trace_small
        path = tmp_path / "t.vlct"
        write_trace(trace, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(raw)
        with pytest.raises(TraceFormatError, match="magic"):
            read_trace(path)

    def test_bad_version(self, tmp_path, trace_small):
        trace, _ = trace_small
        path = tmp_path / "t.vlct"
        write_trace(trace, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(raw)
        with pytest.raises(TraceFormatError, match="version"):
            read_trace(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "t.vlct"
        path.write_bytes(b"VLCT\x01")
        with pytest.raises(TraceTruncatedError, match="header"):
            read_trace(path)

    def test_truncated_payload(self, tmp_path, trace_small):
        trace, _ = trace_small
        path = tmp_path / "t.vlct"
        write_trace(trace, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(TraceTruncatedError, match="size mismatch"):
            read_trace(path)

    def test_non_finite_payload(self, tmp_path, trace_small):
        trace, _ = trace_small
        path = tmp_path / "t.vlct"
        write_trace(trace, path)
        raw = bytearray(path.read_bytes())
        off = len(raw) - 4
        raw[off:] = np.array([np.inf], dtype="<f4").tobytes()
        path.write_bytes(raw)
        with pytest.raises(TraceValueError):
            read_trace(path)


@settings(max_examples=25, deadline=None)
@given(
    m=st.integers(min_value=20, max_value=96),
    tau_frac=st.floats(min_value=0.0, max_value=0.5),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_generator_layout_invariants(m, tau_frac, seed):
    tau = int(tau_frac * m)
    spec = GenSpec(
        num_layers=1, num_query_heads=2, num_kv_heads=1, head_dim=16,
        prompt_len=m, post_vision_len=tau, decode_len=1, seed=seed,
    )
    trace, planted = generate_trace(spec)
    lay = trace.layout
    assert lay.prompt_len == m
    assert lay.post_vision[1] == tau
    assert planted.size == math.ceil(0.05 * m)
    assert planted.min() >= 0 and planted.max() < m
