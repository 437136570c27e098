"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``IMMUNOATTN_JIT`` is not set
to ``0``. Both implementations are always importable as ``<name>_numpy`` and
``<name>_numba`` so they can be cross-checked and benchmarked.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("IMMUNOATTN_JIT", "1") != "0"


# ---------------------------------------------------------------------------
# Rotary position embedding
# ---------------------------------------------------------------------------


def rope_angles(positions: np.ndarray, width: int, base: float) -> np.ndarray:
    """Rotation angle for every (position, channel pair), shape (L, width // 2)."""
    inv_freq = base ** (-np.arange(0, width, 2, dtype=np.float64) / width)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rope_apply_numpy(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (L, H, w); cos/sin: (L, w // 2)
    c = cos[:, None, :]
    s = sin[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


@njit(cache=True)
def rope_apply_numba(x, cos, sin):
    L, H, w = x.shape
    out = np.empty_like(x)
    for i in range(L):
        for h in range(H):
            for t in range(w // 2):
                a = x[i, h, 2 * t]
                b = x[i, h, 2 * t + 1]
                c = cos[i, t]
                s = sin[i, t]
                out[i, h, 2 * t] = a * c - b * s
                out[i, h, 2 * t + 1] = a * s + b * c
    return out


# ---------------------------------------------------------------------------
# ACC transform
# ---------------------------------------------------------------------------


def acc(centered: np.ndarray, max_lag: int) -> np.ndarray:
    # numpy only: the per-lag BLAS product outruns a compiled loop here
    L = centered.shape[0]
    blocks = []
    for lag in range(1, max_lag + 1):
        head = centered[: L - lag]
        tail = centered[lag:]
        blocks.append((head.T @ tail).ravel() / (L - lag))
    return np.concatenate(blocks)


# ---------------------------------------------------------------------------
# Greedy k-mer redundancy filter
# ---------------------------------------------------------------------------


def greedy_filter_numpy(
    codes: np.ndarray, offsets: np.ndarray, threshold: float
) -> np.ndarray:
    """Keep mask for the first-come greedy pass over sorted unique k-mer codes.

    ``codes[offsets[r]:offsets[r + 1]]`` holds the k-mer set of record r.
    Intersections with every kept record are counted via an inverted index.
    """
    n = len(offsets) - 1
    keep = np.zeros(n, dtype=np.bool_)
    index: dict[int, list[int]] = {}
    kept_sizes: list[int] = []
    for r in range(n):
        kmers = codes[offsets[r] : offsets[r + 1]]
        size = len(kmers)
        ok = True
        if kept_sizes:
            hits = [index[c] for c in kmers.tolist() if c in index]
            if hits:
                inter = np.bincount(
                    np.concatenate([np.asarray(h, dtype=np.int64) for h in hits]),
                    minlength=len(kept_sizes),
                )
                union = np.asarray(kept_sizes) + size - inter
                if np.any(inter / union >= threshold):
                    ok = False
        if ok:
            slot = len(kept_sizes)
            kept_sizes.append(size)
            for c in kmers.tolist():
                index.setdefault(c, []).append(slot)
            keep[r] = True
    return keep


@njit(cache=True)
def _greedy_filter_dense(dense, offsets, n_unique, threshold):
    # posting lists as singly linked lists: head[kmer] -> entry, nxt[entry] -> entry
    n = offsets.shape[0] - 1
    keep = np.zeros(n, dtype=np.bool_)
    head = np.full(n_unique, -1, dtype=np.int64)
    nxt = np.empty(dense.shape[0], dtype=np.int64)
    owner = np.empty(dense.shape[0], dtype=np.int64)
    kept_size = np.empty(n, dtype=np.int64)
    inter = np.zeros(n, dtype=np.int64)
    touched = np.empty(n, dtype=np.int64)
    n_entries = 0
    n_kept = 0
    for r in range(n):
        lo = offsets[r]
        hi = offsets[r + 1]
        size = hi - lo
        n_touched = 0
        for p in range(lo, hi):
            e = head[dense[p]]
            while e != -1:
                s = owner[e]
                if inter[s] == 0:
                    touched[n_touched] = s
                    n_touched += 1
                inter[s] += 1
                e = nxt[e]
        ok = True
        for t in range(n_touched):
            s = touched[t]
            if inter[s] / (kept_size[s] + size - inter[s]) >= threshold:
                ok = False
            inter[s] = 0
        if ok:
            for p in range(lo, hi):
                c = dense[p]
                owner[n_entries] = n_kept
                nxt[n_entries] = head[c]
                head[c] = n_entries
                n_entries += 1
            kept_size[n_kept] = size
            n_kept += 1
            keep[r] = True
    return keep


def greedy_filter_numba(codes: np.ndarray, offsets: np.ndarray, threshold: float) -> np.ndarray:
    uniq, dense = np.unique(codes, return_inverse=True)
    return _greedy_filter_dense(dense.astype(np.int64), offsets, uniq.shape[0], threshold)


# ---------------------------------------------------------------------------
# Mann-Whitney pair counting on sorted scores
# ---------------------------------------------------------------------------


def pair_wins_numpy(pos: np.ndarray, neg_sorted: np.ndarray) -> float:
    below = np.searchsorted(neg_sorted, pos, side="left")
    upto = np.searchsorted(neg_sorted, pos, side="right")
    return float(np.sum(below) + 0.5 * np.sum(upto - below))


@njit(cache=True)
def pair_wins_numba(pos, neg_sorted):
    total = 0.0
    for p in pos:
        below = np.searchsorted(neg_sorted, p, side="left")
        upto = np.searchsorted(neg_sorted, p, side="right")
        total += below + 0.5 * (upto - below)
    return total


if USE_NUMBA:
    rope_apply = rope_apply_numba
    greedy_filter = greedy_filter_numba
    pair_wins = pair_wins_numba
else:
    rope_apply = rope_apply_numpy
    greedy_filter = greedy_filter_numpy
    pair_wins = pair_wins_numpy
