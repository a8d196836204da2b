import json

import numpy as np
import pytest

import oracles
from conftest import head_arrays, make_spec
from test_sparsity import manual_trace
from vlcache import (
    AccumulatedAttention,
    EvalWindow,
    PostVision,
    QueryWindow,
    ValidationError,
    build_report,
    cache_hit_rate,
    contribution,
    coverage,
    dense_attention_rows,
    generate_trace,
    oracle_scores,
    top_k_indices,
)


class TestEvalWindow:
    def test_fields_and_derived(self):
        w = EvalWindow(first_decode_index=96, seq_len=100, alpha_eval=0.1)
        assert w.num_rows == 4
        assert w.top_k == 10

    def test_for_header(self, trace_small):
        trace, _ = trace_small
        w = EvalWindow.for_header(trace.header)
        assert w.first_decode_index == trace.header.prompt_len
        assert w.seq_len == trace.header.seq_len

    def test_bounds(self):
        with pytest.raises(ValidationError, match="first_decode_index"):
            EvalWindow(first_decode_index=100, seq_len=100)
        with pytest.raises(ValidationError, match="alpha_eval"):
            EvalWindow(first_decode_index=0, seq_len=10, alpha_eval=0.0)

    def test_window_must_match_trace(self, trace_small):
        trace, _ = trace_small
        bad_len = EvalWindow(first_decode_index=5, seq_len=50)
        with pytest.raises(ValidationError, match="seq_len"):
            contribution(trace, 0, 0, bad_len, "vision")
        inside_prompt = EvalWindow(first_decode_index=4, seq_len=trace.header.seq_len)
        with pytest.raises(ValidationError, match="first_decode_index"):
            contribution(trace, 0, 0, inside_prompt, "vision")


class TestOracleScores:
    def test_distribution_over_prompt(self, trace_small):
        trace, _ = trace_small
        s = oracle_scores(trace, 0, 0)
        assert s.shape == (trace.header.prompt_len,)
        assert s.sum() == pytest.approx(1.0, abs=1e-12)
        assert (s > 0).all()

    def test_restriction_preserves_ranking(self, trace_small):
        # softmax over prompt keys only must rank prompt columns exactly as
        # the full causal decode row does
        trace, _ = trace_small
        m = trace.header.prompt_len
        s = oracle_scores(trace, 1, 2)
        row = dense_attention_rows(trace, 1, 2, QueryWindow(m, m + 1))[0]
        assert np.array_equal(np.argsort(s, kind="stable"), np.argsort(row[:m], kind="stable"))

    def test_planted_keys_dominate(self, trace_mid):
        trace, planted = trace_mid
        s = oracle_scores(trace, 0, 0)
        top = top_k_indices(s, planted.size)
        assert set(top.tolist()) == set(planted.tolist())

    def test_offset_rows(self, trace_small):
        trace, _ = trace_small
        a = oracle_scores(trace, 0, 0, decode_offset=0)
        b = oracle_scores(trace, 0, 0, decode_offset=1)
        assert not np.array_equal(a, b)

    def test_validation(self, trace_small):
        trace, _ = trace_small
        with pytest.raises(ValidationError, match="decode_offset"):
            oracle_scores(trace, 0, 0, decode_offset=99)
        with pytest.raises(ValidationError, match="layer"):
            oracle_scores(trace, 9, 0)
        no_decode, _ = generate_trace(make_spec(decode_len=0))
        with pytest.raises(ValidationError, match="decode_len"):
            oracle_scores(no_decode, 0, 0)


class TestCacheHitRate:
    def test_oracle_as_policy_is_perfect(self, trace_small):
        trace, _ = trace_small
        m = trace.header.prompt_len
        s = oracle_scores(trace, 0, 1)
        for k in (1, 3, 10, m // 2, m):
            assert cache_hit_rate(trace, 0, 1, s, k) == 1.0

    def test_full_prompt_is_perfect_for_any_policy(self, trace_small):
        trace, _ = trace_small
        m = trace.header.prompt_len
        assert cache_hit_rate(trace, 0, 0, AccumulatedAttention(), m) == 1.0
        assert cache_hit_rate(trace, 0, 0, PostVision(), m) == 1.0

    def test_non_decreasing_in_k(self, trace_small):
        trace, _ = trace_small
        m = trace.header.prompt_len
        rates = [
            cache_hit_rate(trace, 1, 0, PostVision(), k, oracle_k=12)
            for k in range(1, m + 1)
        ]
        assert all(b >= a - 1e-12 for a, b in zip(rates, rates[1:]))

    def test_matches_set_arithmetic(self, trace_small):
        trace, _ = trace_small
        from vlcache import head_scores

        k, ok = 9, 14
        kept = set(top_k_indices(head_scores(trace, 1, 3, PostVision()), k).tolist())
        oracle = set(top_k_indices(oracle_scores(trace, 1, 3), ok).tolist())
        expected = len(kept & oracle) / ok
        assert cache_hit_rate(trace, 1, 3, PostVision(), k, oracle_k=ok) == expected

    def test_multi_row_average(self, trace_small):
        trace, _ = trace_small
        from vlcache import head_scores

        k = 10
        kept = set(top_k_indices(head_scores(trace, 0, 0, PostVision()), k).tolist())
        per_row = []
        for off in range(3):
            oracle = set(top_k_indices(oracle_scores(trace, 0, 0, off), k).tolist())
            per_row.append(len(kept & oracle) / k)
        got = cache_hit_rate(trace, 0, 0, PostVision(), k, num_decode_rows=3)
        assert got == pytest.approx(np.mean(per_row), abs=1e-15)

    def test_post_vision_beats_accumulated_here(self, trace_mid):
        trace, _ = trace_mid
        h = trace.header
        k = -(-h.prompt_len // 10)
        pv, acc = [], []
        for layer in range(h.num_layers):
            for head in range(h.num_query_heads):
                pv.append(cache_hit_rate(trace, layer, head, PostVision(), k))
                acc.append(cache_hit_rate(trace, layer, head, AccumulatedAttention(), k))
        assert np.mean(pv) > 0.9
        assert np.mean(pv) >= np.mean(acc)

    def test_validation(self, trace_small):
        trace, _ = trace_small
        m = trace.header.prompt_len
        with pytest.raises(ValidationError, match="k"):
            cache_hit_rate(trace, 0, 0, PostVision(), 0)
        with pytest.raises(ValidationError, match="oracle_k"):
            cache_hit_rate(trace, 0, 0, PostVision(), 5, oracle_k=m + 1)
        with pytest.raises(ValidationError, match="num_decode_rows"):
            cache_hit_rate(trace, 0, 0, PostVision(), 5, num_decode_rows=99)
        with pytest.raises(ValidationError, match="score vector"):
            cache_hit_rate(trace, 0, 0, np.zeros(3), 2)


class TestContribution:
    def test_matches_independent_formula(self, trace_small):
        trace, _ = trace_small
        h = trace.header
        window = EvalWindow.for_header(h)
        q, keys = head_arrays(trace, 0, 2, h.prompt_len, h.seq_len)
        probs = oracles.dense_probs(q, keys, h.prompt_len)
        for modality in ("vision", "language"):
            expected = oracles.contribution(
                probs, h.prompt_len, trace.layout.indices(modality), 0.01
            )
            got = contribution(trace, 0, 2, window, modality)
            assert got == pytest.approx(expected, abs=1e-12)

    def test_complementary_sum(self, trace_mid):
        trace, _ = trace_mid
        window = EvalWindow.for_header(trace.header)
        for layer in range(trace.header.num_layers):
            v = contribution(trace, layer, 0, window, "vision")
            t = contribution(trace, layer, 0, window, "language")
            assert v + t == pytest.approx(1.0, abs=1e-9)

    def test_empty_modality_is_zero(self):
        # tau = m leaves no room for a vision segment
        trace, _ = generate_trace(make_spec(prompt_len=48, post_vision_len=48, seed=2))
        assert trace.layout.indices("vision").size == 0
        window = EvalWindow.for_header(trace.header)
        assert contribution(trace, 0, 0, window, "vision") == 0.0
        assert contribution(trace, 0, 0, window, "language") == pytest.approx(1.0, abs=1e-12)

    def test_fully_filtered_prompt_counts_zero(self):
        # the single decode key dwarfs both prompt keys, so the filter
        # removes every prompt column and the row contributes 0, not nan
        q = np.array([[1.0], [1.0], [30.0]])
        k = np.array([[0.1], [0.1], [30.0]])
        trace = manual_trace(q, k, post_vision_len=1, decode_len=1)
        window = EvalWindow.for_header(trace.header)
        assert contribution(trace, 0, 0, window, "language") == 0.0
        assert contribution(trace, 0, 0, window, "vision") == 0.0


class TestCoverage:
    def test_matches_independent_formula(self, trace_small):
        trace, _ = trace_small
        h = trace.header
        window = EvalWindow.for_header(h)
        q, keys = head_arrays(trace, 1, 1, h.prompt_len, h.seq_len)
        probs = oracles.dense_probs(q, keys, h.prompt_len)
        for modality in ("vision", "language"):
            expected = oracles.coverage(
                probs, h.prompt_len, trace.layout.indices(modality), window.top_k
            )
            got = coverage(trace, 1, 1, window, modality)
            assert got == pytest.approx(expected, abs=1e-12)

    def test_complementary_sum_exact(self, trace_small):
        trace, _ = trace_small
        window = EvalWindow.for_header(trace.header)
        v = coverage(trace, 0, 3, window, "vision")
        t = coverage(trace, 0, 3, window, "language")
        assert v + t == 1.0

    def test_alpha_eval_too_small_errors(self, trace_small):
        trace, _ = trace_small
        window = EvalWindow.for_header(trace.header, alpha_eval=0.001)
        with pytest.raises(ValidationError, match="alpha_eval"):
            coverage(trace, 0, 0, window, "vision")


class TestBuildReport:
    def test_shapes_and_ranges(self, trace_small):
        trace, _ = trace_small
        h = trace.header
        policies = {"vlcache": PostVision(), "h2o": AccumulatedAttention()}
        report = build_report(trace, policies, k=10)
        assert len(report.hit_rate_rows) == h.num_layers * h.num_query_heads * 2
        assert len(report.modality_rows) == h.num_layers * 2
        for row in report.hit_rate_rows:
            assert 0.0 <= row["hit_rate"] <= 1.0
            assert row["policy"] in policies
        for row in report.modality_rows:
            assert 0.0 <= row["contribution"] <= 1.0
            assert 0.0 <= row["coverage"] <= 1.0

    def test_to_dict_json_round_trip(self, trace_small):
        trace, _ = trace_small
        report = build_report(trace, {"vlcache": PostVision()}, k=5)
        blob = json.loads(json.dumps(report.to_dict()))
        assert set(blob) == {"hit_rates", "modality", "curve_stats"}
