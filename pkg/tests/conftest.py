import numpy as np
import pytest

from vlcache import GenSpec, generate_trace


def make_spec(**overrides) -> GenSpec:
    base = dict(
        num_layers=2,
        num_query_heads=4,
        num_kv_heads=2,
        head_dim=32,
        prompt_len=96,
        post_vision_len=12,
        decode_len=4,
        seed=11,
        heavy_fraction=0.05,
        noise_scale=0.1,
    )
    base.update(overrides)
    return GenSpec(**base)


def random_spec(rng: np.random.Generator, max_m: int = 512) -> GenSpec:
    """Random small trace shape; used by the randomized sweeps."""
    num_q = int(rng.integers(1, 5))
    divisors = [d for d in range(1, num_q + 1) if num_q % d == 0]
    m = int(rng.integers(16, max_m + 1))
    return make_spec(
        num_layers=int(rng.integers(1, 5)),
        num_query_heads=num_q,
        num_kv_heads=int(rng.choice(divisors)),
        head_dim=int(rng.choice([16, 32, 64])),
        prompt_len=m,
        post_vision_len=int(rng.integers(0, m // 2 + 1)),
        decode_len=int(rng.integers(1, 5)),
        seed=int(rng.integers(0, 2**32)),
        noise_scale=float(rng.uniform(0.0, 0.3)),
    )


@pytest.fixture(scope="session")
def trace_small():
    trace, planted = generate_trace(make_spec())
    return trace, planted


@pytest.fixture(scope="session")
def trace_mid():
    spec = make_spec(
        num_layers=3, prompt_len=192, post_vision_len=24, decode_len=6, seed=7
    )
    trace, planted = generate_trace(spec)
    return trace, planted


@pytest.fixture(scope="session")
def trace_no_post_vision():
    trace, planted = generate_trace(make_spec(post_vision_len=0, seed=3))
    return trace, planted


def head_arrays(trace, layer: int, head: int, start: int, end: int):
    """(query rows [start:end], keys [:end]) for one query head."""
    q = trace.queries[layer][head, start:end]
    k = trace.keys[layer][trace.kv_head_for(head), :end]
    return q, k
