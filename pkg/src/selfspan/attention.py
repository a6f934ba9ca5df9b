"""Dense and blocked-sparse attention in float32.

All kernels reduce strictly left to right (over the head dimension for dot
products, over positions for softmax sums and value accumulation) so repeated
calls on identical inputs are bit-identical.

The sparse decode kernel consumes a :class:`SpanMetadata`: a sorted list of
``(block_index, block_mask)`` pairs covering only the blocks that contain at
least one selected token. Blocks that are not listed are never read.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

DTYPE = np.float32
PERMIT = np.float32(0.0)
# Most negative finite float32. A literal -inf would turn the max-shift of
# the online softmax into inf - inf = nan when a whole block is masked.
PROHIBIT = np.float32(np.finfo(np.float32).min)

DEFAULT_BLOCK_SIZE = 64


class AttentionError(ValueError):
    pass


class DimensionMismatch(AttentionError):
    pass


class EmptySpan(AttentionError):
    pass


class InvalidSpan(AttentionError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float32 array with finite entries."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise AttentionError(f"{name} has non-finite entries")
    return arr


def causal_mask(n: int) -> np.ndarray:
    mask = np.full((n, n), PROHIBIT, dtype=DTYPE)
    mask[np.tril_indices(n)] = PERMIT
    return mask


def check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.ascontiguousarray(mask, dtype=DTYPE)
    ok = (mask == PERMIT) | (mask == PROHIBIT)
    if not ok.all():
        raise AttentionError("mask entries must be exactly PERMIT or PROHIBIT")
    return mask


@dataclass(frozen=True)
class AttentionTrace:
    """Pre-softmax scores and softmax probabilities, one row per query."""

    scores: np.ndarray
    probs: np.ndarray


@dataclass
class ReadStats:
    key_rows_read: int = 0
    value_rows_read: int = 0
    blocks_visited: int = 0
    blocks_skipped: int = 0

    @property
    def total_blocks(self) -> int:
        return self.blocks_visited + self.blocks_skipped

    def __iadd__(self, other: ReadStats) -> ReadStats:
        self.key_rows_read += other.key_rows_read
        self.value_rows_read += other.value_rows_read
        self.blocks_visited += other.blocks_visited
        self.blocks_skipped += other.blocks_skipped
        return self


def dense_read_stats(n: int, block_size: int = DEFAULT_BLOCK_SIZE) -> ReadStats:
    """Reads performed by a full-context pass, expressed in the same units."""
    nblocks = -(-n // block_size)
    return ReadStats(n, n, nblocks, 0)


# ---------------------------------------------------------------------------
# span metadata


class SpanMetadata:
    """Blocked encoding of an attention span.

    ``block_indices`` is strictly increasing; ``block_masks[i, j]`` says
    whether token ``block_indices[i] * block_size + j`` is attended. Blocks
    without any selected token are omitted.
    """

    __slots__ = ("block_size", "block_indices", "block_masks")

    def __init__(self, block_size: int, block_indices, block_masks):
        self.block_size = int(block_size)
        idx = np.asarray(block_indices, dtype=np.int64).reshape(-1)
        masks = np.asarray(block_masks, dtype=np.bool_).reshape(len(idx), self.block_size)
        if self.block_size < 1:
            raise InvalidSpan("block_size must be >= 1")
        if len(idx) and (idx[0] < 0 or np.any(np.diff(idx) <= 0)):
            raise InvalidSpan("block indices must be non-negative and strictly increasing")
        if len(idx) and not masks.any(axis=1).all():
            raise InvalidSpan("every listed block needs at least one set bit")
        idx.setflags(write=False)
        masks.setflags(write=False)
        self.block_indices = idx
        self.block_masks = masks

    @classmethod
    def _trusted(cls, block_size: int, idx: np.ndarray, masks: np.ndarray) -> SpanMetadata:
        # inputs already satisfy the invariants (built by encode_span)
        self = object.__new__(cls)
        idx.setflags(write=False)
        masks.setflags(write=False)
        self.block_size, self.block_indices, self.block_masks = block_size, idx, masks
        return self

    @property
    def entries(self) -> list[tuple[int, str]]:
        """``[(block_index, "0101..."), ...]`` with bit 0 printed first."""
        return [
            (int(b), "".join("1" if bit else "0" for bit in m))
            for b, m in zip(self.block_indices, self.block_masks)
        ]

    def __len__(self) -> int:
        return len(self.block_indices)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpanMetadata):
            return NotImplemented
        return (
            self.block_size == other.block_size
            and np.array_equal(self.block_indices, other.block_indices)
            and np.array_equal(self.block_masks, other.block_masks)
        )

    def __repr__(self) -> str:
        return f"SpanMetadata(block_size={self.block_size}, entries={self.entries})"

    def positions(self) -> np.ndarray:
        """Sorted token indices encoded by this metadata."""
        b, j = np.nonzero(self.block_masks)
        return self.block_indices[b] * self.block_size + j

    def validate(self, n: int) -> None:
        if len(self) == 0:
            raise EmptySpan("metadata lists no blocks")
        last = int(self.block_indices[-1]) * self.block_size
        hi = int(np.flatnonzero(self.block_masks[-1])[-1])
        if last + hi >= n:
            raise InvalidSpan(
                f"metadata selects token {last + hi} but the context has {n} tokens"
            )

    @classmethod
    def full(cls, n: int, block_size: int = DEFAULT_BLOCK_SIZE) -> SpanMetadata:
        return encode_span(np.arange(n), n, block_size)


def encode_span(selected, n: int, block_size: int = DEFAULT_BLOCK_SIZE) -> SpanMetadata:
    """Encode a set of token indices as block index / block mask pairs."""
    if block_size < 1:
        raise InvalidSpan("block_size must be >= 1")
    if isinstance(selected, (set, frozenset)):
        selected = sorted(selected)
    sel = np.asarray(selected, dtype=np.int64).reshape(-1)
    if sel.size == 0:
        raise EmptySpan("empty selection")
    if sel.size > 1 and not (sel[1:] > sel[:-1]).all():
        sel = np.unique(sel)
    if sel[0] < 0 or sel[-1] >= n:
        raise InvalidSpan(f"selected indices must lie in [0, {n})")
    blk = sel // block_size
    first = np.empty(len(blk), dtype=np.bool_)
    first[0] = True
    np.not_equal(blk[1:], blk[:-1], out=first[1:])
    idx = blk[first]
    masks = np.zeros((len(idx), block_size), dtype=np.bool_)
    masks[np.cumsum(first) - 1, sel - blk * block_size] = True
    return SpanMetadata._trusted(block_size, idx, masks)


def metadata_to_dense_mask(meta: SpanMetadata, n: int) -> np.ndarray:
    """Single additive mask row of length ``n`` equivalent to ``meta``."""
    meta.validate(n)
    row = np.full(n, PROHIBIT, dtype=DTYPE)
    row[meta.positions()] = PERMIT
    return row


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _dense_rows(Q, K, V, mask, scores, probs, out):
    l, d = Q.shape
    n = K.shape[0]
    denom = np.float32(math.sqrt(d))
    for i in range(l):
        m = PROHIBIT
        for j in range(n):
            acc = np.float32(0.0)
            for c in range(d):
                acc += Q[i, c] * K[j, c]
            s = acc / denom
            scores[i, j] = s
            x = s + mask[i, j]
            probs[i, j] = x
            if x > m:
                m = x
        total = np.float32(0.0)
        for j in range(n):
            p = np.exp(probs[i, j] - m)
            probs[i, j] = p
            total += p
        for j in range(n):
            probs[i, j] = probs[i, j] / total
        for c in range(d):
            out[i, c] = np.float32(0.0)
        for j in range(n):
            p = probs[i, j]
            for c in range(d):
                out[i, c] += p * V[j, c]


@numba.njit(cache=True)
def _dense_decode_mh(q, K, V, mask, n, out, work):
    # q: (H, dh); K, V: (>=n, H, dh); mask: (n,) additive, or empty for none.
    H, dh = q.shape
    denom = np.float32(math.sqrt(dh))
    use_mask = mask.shape[0] > 0
    for h in range(H):
        m = PROHIBIT
        for j in range(n):
            acc = np.float32(0.0)
            for c in range(dh):
                acc += q[h, c] * K[j, h, c]
            x = acc / denom
            if use_mask:
                x += mask[j]
            work[j] = x
            if x > m:
                m = x
        total = np.float32(0.0)
        for j in range(n):
            p = np.exp(work[j] - m)
            work[j] = p
            total += p
        for c in range(dh):
            out[h, c] = np.float32(0.0)
        for j in range(n):
            p = work[j] / total
            for c in range(dh):
                out[h, c] += p * V[j, h, c]


@numba.njit(cache=True)
def _sparse_decode_mh(q, K, V, block_idx, block_masks, bs, n, out, acc_o, work):
    # Online softmax over the listed blocks only: running max, running sum,
    # and a rescaled running output. Unlisted blocks are never touched.
    H, dh = q.shape
    denom = np.float32(math.sqrt(dh))
    nb = block_idx.shape[0]
    # Blocks whose mask is all ones skip the per-row check; masked rows get
    # the PROHIBIT score directly, which is what the dense twin rounds to.
    full = np.empty(nb, dtype=np.bool_)
    for b in range(nb):
        width = min(bs, n - block_idx[b] * bs)
        f = True
        for r in range(width):
            if not block_masks[b, r]:
                f = False
                break
        full[b] = f
    for h in range(H):
        m = PROHIBIT
        total = np.float32(0.0)
        for c in range(dh):
            acc_o[c] = np.float32(0.0)
        for b in range(nb):
            start = block_idx[b] * bs
            stop = min(start + bs, n)
            fb = full[b]
            bm = PROHIBIT
            for j in range(start, stop):
                if fb or block_masks[b, j - start]:
                    acc = np.float32(0.0)
                    for c in range(dh):
                        acc += q[h, c] * K[j, h, c]
                    x = acc / denom
                else:
                    x = PROHIBIT
                work[j - start] = x
                if x > bm:
                    bm = x
            if bm > m:
                alpha = np.exp(m - bm)
                total *= alpha
                for c in range(dh):
                    acc_o[c] *= alpha
                m = bm
            for j in range(start, stop):
                if not (fb or block_masks[b, j - start]):
                    continue
                p = np.exp(work[j - start] - m)
                total += p
                for c in range(dh):
                    acc_o[c] += p * V[j, h, c]
        for c in range(dh):
            out[h, c] = acc_o[c] / total


def dense_attention(Q, K, V, mask=None) -> tuple[np.ndarray, AttentionTrace]:
    """Full attention ``softmax(QK^T / sqrt(d) + mask) V`` for ``l`` query rows.

    ``mask`` is an additive ``l x n`` array of PERMIT/PROHIBIT values; ``None``
    means every position is permitted. Prohibited positions get probability
    exactly zero.
    """
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    l, d = Q.shape
    n = K.shape[0]
    if K.shape[1] != d or V.shape != K.shape:
        raise DimensionMismatch(f"Q {Q.shape}, K {K.shape}, V {V.shape} disagree")
    if mask is None:
        mask = np.zeros((l, n), dtype=DTYPE)
    else:
        mask = check_mask(np.atleast_2d(mask))
        if mask.shape != (l, n):
            raise DimensionMismatch(f"mask must be {(l, n)}, got {mask.shape}")
        if not (mask == PERMIT).any(axis=1).all():
            raise AttentionError("mask has a row with every position prohibited")
    scores = np.empty((l, n), dtype=DTYPE)
    probs = np.empty((l, n), dtype=DTYPE)
    out = np.empty((l, d), dtype=DTYPE)
    _dense_rows(Q, K, V, mask, scores, probs, out)
    return out, AttentionTrace(scores, probs)


_NO_MASK = np.zeros(0, dtype=DTYPE)


def dense_decode_attention(q, K, V, mask=None) -> np.ndarray:
    """Single-row dense attention, the decode-phase baseline.

    Accepts ``q`` of shape ``(d,)`` with ``K, V`` of shape ``(n, d)``, or the
    multi-head layout ``q: (H, dh)``, ``K, V: (n, H, dh)``.
    """
    q, K, V, single = _heads_layout(q, K, V)
    n = K.shape[0]
    if mask is None:
        mask = _NO_MASK
    else:
        mask = np.ascontiguousarray(mask, dtype=DTYPE)
        if mask.shape != (n,):
            raise DimensionMismatch(f"mask must have shape {(n,)}")
        if not (mask == PERMIT).any():
            raise AttentionError("mask prohibits every position")
    out = np.empty(q.shape, dtype=DTYPE)
    _dense_decode_mh(q, K, V, mask, n, out, np.empty(n, dtype=DTYPE))
    return out[0] if single else out


def sparse_decode_attention(q, K, V, meta: SpanMetadata) -> tuple[np.ndarray, ReadStats]:
    """Blocked sparse single-row attention over the tokens encoded by ``meta``.

    Same layouts as :func:`dense_decode_attention`. Returns the attention
    output and the rows/blocks actually read.
    """
    q, K, V, single = _heads_layout(q, K, V)
    n = K.shape[0]
    meta.validate(n)
    bs = meta.block_size
    out = np.empty(q.shape, dtype=DTYPE)
    _sparse_decode_mh(
        q, K, V, meta.block_indices, meta.block_masks, bs, n,
        out, np.empty(q.shape[1], dtype=DTYPE), np.empty(bs, dtype=DTYPE),
    )
    return (out[0] if single else out), sparse_read_stats(meta, n)


def sparse_read_stats(meta: SpanMetadata, n: int) -> ReadStats:
    bs = meta.block_size
    visited = len(meta)
    rows = visited * bs
    if visited and (int(meta.block_indices[-1]) + 1) * bs > n:
        rows -= (int(meta.block_indices[-1]) + 1) * bs - n
    return ReadStats(rows, rows, visited, -(-n // bs) - visited)


def batched_sparse_decode(Qb, caches, metas) -> list[tuple[np.ndarray, ReadStats]]:
    """Run :func:`sparse_decode_attention` independently per request."""
    if not (len(Qb) == len(caches) == len(metas)):
        raise DimensionMismatch(
            f"batch sizes disagree: {len(Qb)} queries, {len(caches)} caches, {len(metas)} metadata"
        )
    return [sparse_decode_attention(q, K, V, meta) for q, (K, V), meta in zip(Qb, caches, metas)]


def _heads_layout(q, K, V):
    q = np.ascontiguousarray(q, dtype=DTYPE)
    K = np.ascontiguousarray(K, dtype=DTYPE)
    V = np.ascontiguousarray(V, dtype=DTYPE)
    single = q.ndim == 1
    if single:
        if K.ndim != 2:
            raise DimensionMismatch("K must be (n, d) for a single query vector")
        q = q.reshape(1, -1)
        K = K.reshape(K.shape[0], 1, K.shape[1])
        V = V.reshape(V.shape[0], 1, V.shape[1])
    if K.ndim != 3 or K.shape[1:] != q.shape or V.shape != K.shape:
        raise DimensionMismatch(f"q {q.shape}, K {K.shape}, V {V.shape} disagree")
    if K.shape[0] == 0:
        raise DimensionMismatch("empty context")
    return q, K, V, single
