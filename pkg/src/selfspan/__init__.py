"""Self-selected attention spans: sparse decode kernels, an anchor/reference
protocol, a toy decoder, and the arithmetic task that exercises them."""

__version__ = "0.1.0"

from .attention import (
    DEFAULT_BLOCK_SIZE,
    PERMIT,
    PROHIBIT,
    AttentionError,
    ReadStats,
    SpanMetadata,
    batched_sparse_decode,
    dense_attention,
    dense_decode_attention,
    encode_span,
    metadata_to_dense_mask,
    sparse_decode_attention,
)
from .protocol import PREV, AnchorTable, SpanRequest, Vocab, partition_context, resolve_references
from .arith import (
    BinOp,
    EvaluationTrace,
    GenConfig,
    Literal,
    check_answer,
    evaluate,
    gen_expression,
    oracle_schedule,
    solve_with_trace,
)
from .engine import DecoderWeights, KVCache, ModelConfig, decode_step, generate_batch, greedy_generate, prefill
