import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import head_arrays, make_spec, random_spec
from vlcache import (
    AttentionTrace,
    LayerSparsity,
    ModalityLayout,
    SparsityConfig,
    TraceHeader,
    ValidationError,
    ZeroVarianceError,
    curve_similarity,
    decoding_sparsity,
    generate_trace,
    post_vision_sparsity,
    prefill_sparsity,
    threshold_filter,
)


def manual_trace(queries, keys, post_vision_len=0, decode_len=0):
    """Single-layer single-head trace from explicit [t, d] arrays."""
    q = np.asarray(queries, dtype=np.float32)[None, :, :]
    k = np.asarray(keys, dtype=np.float32)[None, :, :]
    t, d = q.shape[1], q.shape[2]
    m = t - decode_len
    header = TraceHeader(
        num_layers=1, num_query_heads=1, num_kv_heads=1, head_dim=d,
        prompt_len=m, post_vision_len=post_vision_len, decode_len=decode_len, seed=0,
    )
    layout = ModalityLayout(
        pre_vision=(0, 0),
        vision=(0, m - post_vision_len),
        post_vision=(m - post_vision_len, post_vision_len),
    )
    return AttentionTrace(header=header, layout=layout, queries=[q], keys=[k])


class TestThresholdFilter:
    def test_all_entries_at_max_survive(self):
        np.testing.assert_array_equal(
            threshold_filter(np.array([0.5, 0.5]), 0.01), [0.5, 0.5]
        )

    def test_drops_entry_below_one_percent_of_max(self):
        # cut = 0.01 * 0.98 = 0.0098: keeps 0.015, zeroes 0.005
        out = threshold_filter(np.array([0.98, 0.015, 0.005]), 0.01)
        np.testing.assert_array_equal(out, [0.98, 0.015, 0.0])

    def test_matrix_rows_filtered_independently(self):
        a = np.array([[1.0, 0.001], [0.001, 0.001]])
        out = threshold_filter(a, 0.01)
        np.testing.assert_array_equal(out, [[1.0, 0.0], [0.001, 0.001]])

    def test_p_out_of_range(self):
        for bad in (0.0, 1.0, 2.0):
            with pytest.raises(ValidationError, match="p"):
                threshold_filter(np.array([1.0]), bad)

    def test_rejects_bad_input(self):
        with pytest.raises(ValidationError, match="non-empty"):
            threshold_filter(np.array([]), 0.01)
        with pytest.raises(ValidationError, match="finite"):
            threshold_filter(np.array([np.nan, 1.0]), 0.01)
        with pytest.raises(ValidationError, match="non-negative"):
            threshold_filter(np.array([-0.1, 1.0]), 0.01)
        with pytest.raises(ValidationError, match="2-D"):
            threshold_filter(np.ones((2, 2, 2)), 0.01)

    @settings(max_examples=50, deadline=None)
    @given(
        row=arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e6)),
        p=st.floats(0.001, 0.99),
    )
    def test_idempotent_and_max_preserving(self, row, p):
        once = threshold_filter(row, p)
        twice = threshold_filter(once, p)
        np.testing.assert_array_equal(once, twice)
        assert once.max() == row.max()


class TestPrefillSparsity:
    def test_single_token_prompt_is_zero(self):
        trace = manual_trace(np.ones((1, 4)), np.ones((1, 4)))
        sp = prefill_sparsity(trace)
        assert sp.gamma.shape == (1, 1)
        assert sp.gamma[0, 0] == 0.0

    def test_two_token_hand_example(self):
        # second row's probabilities are [0.999, 0.001]; with p = 0.01 the
        # 0.001 entry is the only filtered one of the three causal entries
        a = math.log(999.0)
        trace = manual_trace([[0.0], [1.0]], [[a], [0.0]])
        sp = prefill_sparsity(trace)
        assert sp.gamma[0, 0] == pytest.approx(1.0 / 3.0, abs=0)

    def test_matches_brute_force_on_random_traces(self):
        rng = np.random.default_rng(99)
        for _ in range(4):
            spec = random_spec(rng, max_m=256)
            trace, _ = generate_trace(spec)
            sp = prefill_sparsity(trace)
            h = trace.header
            for layer in range(h.num_layers):
                for head in range(h.num_query_heads):
                    q, k = head_arrays(trace, layer, head, 0, h.prompt_len)
                    probs = oracles.dense_probs(q, k, 0)
                    expected = oracles.sparsity_from_probs(probs, 0, 0.01)
                    assert sp.gamma[layer, head] == pytest.approx(expected, abs=1e-12)

    def test_monotone_in_p(self, trace_small):
        trace, _ = trace_small
        sweep = np.linspace(0.001, 0.5, 10)
        gammas = [prefill_sparsity(trace, SparsityConfig(p=p)).gamma for p in sweep]
        for lo, hi in zip(gammas, gammas[1:]):
            assert (hi >= lo).all()

    def test_values_in_unit_interval(self, trace_mid):
        trace, _ = trace_mid
        g = prefill_sparsity(trace).gamma
        assert (g >= 0).all() and (g <= 1).all()


class TestPostVisionSparsity:
    def test_full_tau_equals_prefill(self):
        spec = make_spec(prompt_len=64, post_vision_len=64, seed=21)
        trace, _ = generate_trace(spec)
        pre = prefill_sparsity(trace)
        post = post_vision_sparsity(trace)
        np.testing.assert_array_equal(pre.gamma, post.gamma)

    def test_single_row_tau(self):
        spec = make_spec(prompt_len=80, post_vision_len=1, seed=13)
        trace, _ = generate_trace(spec)
        sp = post_vision_sparsity(trace)
        q, k = head_arrays(trace, 0, 0, 79, 80)
        probs = oracles.dense_probs(q, k, 79)
        assert sp.gamma[0, 0] == pytest.approx(
            oracles.sparsity_from_probs(probs, 79, 0.01), abs=1e-12
        )

    def test_tau_zero_is_an_error(self, trace_no_post_vision):
        trace, _ = trace_no_post_vision
        with pytest.raises(ValidationError, match="post_vision_len"):
            post_vision_sparsity(trace)

    def test_matches_brute_force(self, trace_mid):
        trace, _ = trace_mid
        h = trace.header
        start = h.prompt_len - h.post_vision_len
        sp = post_vision_sparsity(trace)
        for layer in (0, 2):
            q, k = head_arrays(trace, layer, 1, start, h.prompt_len)
            probs = oracles.dense_probs(q, k, start)
            assert sp.gamma[layer, 1] == pytest.approx(
                oracles.sparsity_from_probs(probs, start, 0.01), abs=1e-12
            )


class TestDecodingSparsity:
    def test_uniform_logits_give_zero(self):
        # zero decode query -> all logits equal -> nothing below the max
        q = np.vstack([np.random.default_rng(0).standard_normal((3, 4)), np.zeros((1, 4))])
        k = np.random.default_rng(1).standard_normal((4, 4))
        trace = manual_trace(q, k, decode_len=1)
        assert decoding_sparsity(trace).gamma[0, 0] == 0.0

    def test_no_decode_rows_is_an_error(self):
        trace, _ = generate_trace(make_spec(decode_len=0))
        with pytest.raises(ValidationError, match="decode_len"):
            decoding_sparsity(trace)

    def test_matches_brute_force(self, trace_small):
        trace, _ = trace_small
        h = trace.header
        sp = decoding_sparsity(trace)
        q, k = head_arrays(trace, 1, 3, h.prompt_len, h.seq_len)
        probs = oracles.dense_probs(q, k, h.prompt_len)
        assert sp.gamma[1, 3] == pytest.approx(
            oracles.sparsity_from_probs(probs, h.prompt_len, 0.01), abs=1e-12
        )

    def test_zero_noise_tracks_post_vision(self):
        spec = make_spec(
            num_layers=3, prompt_len=192, post_vision_len=24, decode_len=6,
            noise_scale=0.0, seed=17,
        )
        trace, _ = generate_trace(spec)
        post = post_vision_sparsity(trace).layer_means()
        dec = decoding_sparsity(trace).layer_means()
        assert np.abs(post - dec).max() < 0.05


class TestCurveSimilarity:
    @staticmethod
    def _ls(values):
        return LayerSparsity(phase="x", p=0.01, gamma=np.asarray(values, dtype=float)[:, None])

    def test_identical_curves(self):
        a = self._ls([0.1, 0.5, 0.3])
        assert curve_similarity(a, a) == pytest.approx(1.0)

    def test_anti_correlated(self):
        a = self._ls([0.1, 0.5, 0.3])
        b = self._ls([0.9 - v for v in (0.1, 0.5, 0.3)])
        assert curve_similarity(a, b) == pytest.approx(-1.0)

    def test_matches_textbook_formula(self):
        rng = np.random.default_rng(3)
        xs, ys = rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)
        got = curve_similarity(self._ls(xs), self._ls(ys))
        assert got == pytest.approx(oracles.pearson(xs, ys), abs=1e-12)

    def test_zero_variance_raises(self):
        with pytest.raises(ZeroVarianceError):
            curve_similarity(self._ls([0.5, 0.5, 0.5]), self._ls([0.1, 0.2, 0.3]))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError, match="curves"):
            curve_similarity(self._ls([0.1, 0.2]), self._ls([0.1, 0.2, 0.3]))

    def test_needs_two_layers(self):
        with pytest.raises(ValidationError, match="2 layers"):
            curve_similarity(self._ls([0.1]), self._ls([0.2]))


class TestConfig:
    def test_p_validated(self):
        with pytest.raises(ValidationError, match="p"):
            SparsityConfig(p=1.5)

    def test_tile_validated(self):
        with pytest.raises(ValidationError, match="tile"):
            SparsityConfig(tile=0)
