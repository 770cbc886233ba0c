"""Pure-Python / numpy reference versions of the compiled kernels."""

from __future__ import annotations

import heapq

import numpy as np



def unit_rows(x: np.ndarray):
    """Unit vectors along the last axis and the norms, without an additive
    epsilon: each row is first divided by its max-abs entry (so the sum of
    squares cannot under- or overflow), and zero rows map to zero."""
    x = np.asarray(x, dtype=np.float64)
    s = np.abs(x).max(axis=-1, keepdims=True) if x.shape[-1] else np.zeros(x.shape[:-1] + (1,))
    y = x / np.where(s > 0, s, 1.0)
    n = np.sqrt((y * y).sum(axis=-1, keepdims=True))
    return y / np.where(n > 0, n, 1.0), s * n


def max_cosine_pool(patches: np.ndarray, protos: np.ndarray):
    """Max, argmax and mean of the patch-prototype cosine field.

    patches: (B, N, D); protos: (K, D). Returns (B, K) max, (B, K) int64
    argmax over N (lowest index on ties) and (B, K) mean.
    """
    x = np.ascontiguousarray(patches, dtype=np.float64)
    p = np.ascontiguousarray(protos, dtype=np.float64)
    if x.shape[1] == 0:
        raise ValueError("max over an empty patch axis")
    xn, _ = unit_rows(x)
    pn, _ = unit_rows(p)
    field = xn @ pn.T
    idx = np.argmax(field, axis=1)
    smax = np.take_along_axis(field, idx[:, None, :], axis=1)[:, 0, :]
    return smax, idx.astype(np.int64), field.mean(axis=1)


def trim_counts(counts, species_cap: int, min_per_recording: int, drop_order) -> np.ndarray:
    """Greedy trimming of per-recording event counts down to ``species_cap``.

    Repeatedly removes one event from the recording holding the most events
    (lowest index on ties) as long as it stays above ``min_per_recording``.
    When every recording sits at the floor, whole recordings are dropped in
    ``drop_order`` until the cap is met.
    """
    c = np.array(counts, dtype=np.int64)
    total = int(c.sum())
    if total <= species_cap:
        return c
    heap = [(-int(v), i) for i, v in enumerate(c) if v > min_per_recording]
    heapq.heapify(heap)
    while total > species_cap and heap:
        neg, i = heapq.heappop(heap)
        c[i] -= 1
        total -= 1
        if c[i] > min_per_recording:
            heapq.heappush(heap, (neg + 1, i))
    for i in drop_order:
        if total <= species_cap:
            break
        if c[i] > 0:
            total -= int(c[i])
            c[i] = 0
    return c


def argmax_mid(x: np.ndarray):
    """Max and argmax over the middle axis of a (P, N, Q) array."""
    idx = np.argmax(x, axis=1)
    vals = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return vals, idx.astype(np.int64)


def scatter_mid(idx: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`argmax_mid` for gradients: (P, Q) -> (P, n, Q) zeros
    with ``g`` placed at the recorded indices."""
    out = np.zeros((g.shape[0], n, g.shape[1]))
    np.put_along_axis(out, idx[:, None, :], g[:, None, :], axis=1)
    return out
