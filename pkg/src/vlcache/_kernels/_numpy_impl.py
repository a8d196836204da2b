"""Pure-numpy implementations of the hot kernels.

Mirrors the compiled extension: same tiling schedule and the same
precision contract. Logits are float32 values produced from float64 dot
products, exponentials are evaluated in float32, and every accumulation
(softmax denominators, per-column score sums) runs in float64. Used
whenever the extension is unavailable or VLCACHE_PURE_PYTHON=1 is set.
"""

from __future__ import annotations

import numpy as np

_NEG_INF = np.float32(-np.inf)


def stats_tiled(q, keys, q_base, p, tile):
    """Tiled attention statistics for one (layer, head) query window.

    Args:
        q: float32 [w, d] query rows; row r has absolute index q_base + r.
        keys: float32 [n, d] key rows, n >= q_base + w.
        q_base: absolute index of the first query row (causal frontier).
        p: threshold fraction of the per-row attention maximum.
        tile: square tile edge for both query and key dimensions.

    Returns:
        (row_max f32[w], row_sum f64[w], col_score f64[n],
         below_count i64[n], causal_count i64[n])

    The schedule never materializes the [w, n] attention matrix: pass 1
    walks key tiles per query tile with the online-softmax update, pass 2
    re-streams the tiles to accumulate per-column statistics against the
    stored row maxima and denominators, pass 3 (the cross-tile reduction)
    is folded into the += on the column accumulators.
    """
    w, d = q.shape
    n = keys.shape[0]
    inv = 1.0 / np.sqrt(float(d))
    q64 = q.astype(np.float64)
    k64 = keys.astype(np.float64)

    row_max = np.full(w, _NEG_INF, dtype=np.float32)
    row_sum = np.zeros(w, dtype=np.float64)
    col_score = np.zeros(n, dtype=np.float64)
    below = np.zeros(n, dtype=np.int64)
    causal = np.zeros(n, dtype=np.int64)

    # Pass 1: per query tile, stream key tiles, online max/sum update.
    for q0 in range(0, w, tile):
        q1 = min(q0 + tile, w)
        frontier = q_base + np.arange(q0, q1)
        for k0 in range(0, n, tile):
            if k0 > frontier[-1]:
                break
            k1 = min(k0 + tile, n)
            logits = (q64[q0:q1] @ k64[k0:k1].T * inv).astype(np.float32)
            mask = np.arange(k0, k1)[None, :] <= frontier[:, None]
            logits = np.where(mask, logits, _NEG_INF)
            new_max = np.maximum(row_max[q0:q1], logits.max(axis=1))
            e = np.exp(logits - new_max[:, None])
            rescale = np.exp((row_max[q0:q1] - new_max).astype(np.float64))
            row_sum[q0:q1] = row_sum[q0:q1] * rescale + e.sum(axis=1, dtype=np.float64)
            row_max[q0:q1] = new_max

    # Pass 2: per key tile, re-stream query tiles against stored max/sum.
    for k0 in range(0, n, tile):
        k1 = min(k0 + tile, n)
        cols = np.arange(k0, k1)
        for q0 in range(0, w, tile):
            q1 = min(q0 + tile, w)
            frontier = q_base + np.arange(q0, q1)
            if k0 > frontier[-1]:
                continue
            mask = cols[None, :] <= frontier[:, None]
            logits = (q64[q0:q1] @ k64[k0:k1].T * inv).astype(np.float32)
            logits = np.where(mask, logits, _NEG_INF)
            e = np.exp(logits - row_max[q0:q1, None])
            e64 = e.astype(np.float64)
            col_score[k0:k1] += (e64 / row_sum[q0:q1, None]).sum(axis=0)
            below[k0:k1] += (mask & (e64 < p)).sum(axis=0)
            causal[k0:k1] += mask.sum(axis=0)

    return row_max, row_sum, col_score, below, causal


def decode_step(q, keys, values):
    """One decode attention pass: q [G, d] against keys/values [n, d].

    Float32 throughout; returns the attention output [G, d].
    """
    inv = np.float32(1.0 / np.sqrt(float(q.shape[1])))
    logits = q @ keys.T * inv
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return (e @ values) / e.sum(axis=1, keepdims=True)
