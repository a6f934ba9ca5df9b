"""Walk through span encoding and the blocked sparse decode kernel.

Run with ``python3 demos/span_kernel_walkthrough.py``.
"""
import numpy as np

from selfspan import (
    PROHIBIT,
    dense_decode_attention,
    encode_span,
    metadata_to_dense_mask,
    sparse_decode_attention,
)

rng = np.random.default_rng(0)

# A span is a sorted set of token positions. With block size 4 the
# positions {0, 1, 2, 3, 9} land in blocks 0 and 2.
meta = encode_span([0, 1, 2, 3, 9], n=12, block_size=4)
print("entries:", meta.entries)
print("positions back:", meta.positions())

# the same span as an additive mask row over the whole context
row = metadata_to_dense_mask(meta, 12)
print("permitted:", np.flatnonzero(row == 0))
print("prohibited value:", PROHIBIT)

# Sparse and dense-masked attention agree; the sparse kernel only touches
# the listed blocks.
n, d = 1000, 64
q = rng.standard_normal(d).astype(np.float32)
K = rng.standard_normal((n, d)).astype(np.float32)
V = rng.standard_normal((n, d)).astype(np.float32)
sel = np.concatenate([np.arange(0, 40), np.arange(600, 700), [999]])
meta = encode_span(sel, n, 64)

out, stats = sparse_decode_attention(q, K, V, meta)
ref = dense_decode_attention(q, K, V, metadata_to_dense_mask(meta, n))
print("max abs diff vs dense-masked:", np.abs(out - ref).max())
print(f"blocks visited {stats.blocks_visited}/{stats.total_blocks}, "
      f"key rows read {stats.key_rows_read} of {n}")

# the span is a read set: garbage outside it changes nothing
K2, V2 = K.copy(), V.copy()
outside = np.setdiff1d(np.arange(n), sel)
K2[outside] = 1e6
V2[outside] = np.nan
out2, _ = sparse_decode_attention(q, K2, V2, meta)
print("unchanged with poisoned rows outside the span:", np.array_equal(out, out2))
