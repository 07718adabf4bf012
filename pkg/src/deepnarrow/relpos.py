"""Bucketed relative positions for learned attention-logit biases."""

from __future__ import annotations

import numpy as np


def relative_bucket(relative_position, bidirectional: bool = True, num_buckets: int = 32,
                    max_distance: int = 128):
    """Map ``key_position - query_position`` to a bucket index.

    Small distances get one bucket each (a quarter of the buckets when
    bidirectional, half otherwise); larger distances share logarithmically
    spaced buckets up to ``max_distance``, beyond which everything lands in
    the last bucket.  When bidirectional, keys after the query use the upper
    half of the range.  When unidirectional, keys after the query map to 0.

    Works on Python ints (returns int) and integer arrays.
    """
    if num_buckets < 2:
        raise ValueError(f"num_buckets must be >= 2, got {num_buckets}")
    if max_distance < num_buckets:
        raise ValueError(f"max_distance ({max_distance}) must be >= num_buckets ({num_buckets})")
    scalar = np.ndim(relative_position) == 0
    rp = np.asarray(relative_position, dtype=np.int64)

    if bidirectional:
        half = num_buckets // 2
        offset = np.where(rp > 0, half, 0)
        n = np.abs(rp)
    else:
        half = num_buckets
        offset = np.zeros_like(rp)
        n = np.maximum(-rp, 0)

    max_exact = half // 2
    if max_exact < 1:
        bucket = np.zeros_like(n)
    else:
        ratio = np.log(np.maximum(n, 1) / max_exact) / np.log(max_distance / max_exact)
        large = max_exact + (ratio * (half - max_exact)).astype(np.int64)
        large = np.minimum(large, half - 1)
        bucket = np.where(n < max_exact, n, large)
    out = offset + bucket
    return int(out) if scalar else out


def bucket_matrix(q_len: int, k_len: int, bidirectional: bool, num_buckets: int,
                  max_distance: int) -> np.ndarray:
    """(q_len, k_len) bucket ids for every query/key pair."""
    rel = np.arange(k_len)[None, :] - np.arange(q_len)[:, None]
    return relative_bucket(rel, bidirectional, num_buckets, max_distance)
