"""A small seeded decoder with a preallocated KV-cache.

Architecture: token embedding, ``n_layers`` pre-norm blocks (RMSNorm ->
multi-head attention -> residual, RMSNorm -> GELU FFN with 4x expansion ->
residual), final RMSNorm and output head. No positional encoding. The
weights are random; what matters here is that the attention kernels are
exercised exactly as a trained model would exercise them.

Decode steps accept an attention plan per request: ``None`` for the full
context, or a :class:`~selfspan.attention.SpanMetadata`. ``mode`` selects
how a restricted plan is executed:

``"sparse"``  blocked sparse kernel, unlisted blocks never read
``"masked"``  dense kernel with the equivalent additive mask (the twin)
``"dense"``   ignore the plan, attend to everything (the baseline)
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    DEFAULT_BLOCK_SIZE,
    DTYPE,
    ReadStats,
    SpanMetadata,
    causal_mask,
    dense_attention,
    dense_decode_attention,
    dense_read_stats,
    encode_span,
    metadata_to_dense_mask,
    sparse_decode_attention,
)
from .protocol import sparsity_of

FULL = None
MODES = ("sparse", "masked", "dense")
RMS_EPS = np.float32(1e-6)


class EngineError(ValueError):
    pass


class CapacityExceeded(EngineError):
    pass


class ScheduleMismatch(EngineError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class DecoderWeights:
    """All parameters, drawn from ``numpy.random.default_rng(seed)``.

    Draw order: embedding, then per layer W_Q, W_K, W_V, W_O, W_1, W_2,
    then the output head. Matrices are N(0, 1/fan_in); the embedding is
    N(0, 1); norm scales start at one.
    """

    config: ModelConfig
    embed: np.ndarray
    layers: list
    final_norm: np.ndarray
    head: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig) -> DecoderWeights:
        rng = np.random.default_rng(config.seed)
        d, f = config.d_model, config.d_model * config.ffn_mult
        if d % config.n_heads:
            raise EngineError("d_model must be divisible by n_heads")

        def mat(rows, cols):
            return (rng.standard_normal((rows, cols)) / math.sqrt(rows)).astype(DTYPE)

        embed = rng.standard_normal((config.vocab_size, d)).astype(DTYPE)
        layers = []
        for _ in range(config.n_layers):
            layers.append({
                "wq": mat(d, d), "wk": mat(d, d), "wv": mat(d, d), "wo": mat(d, d),
                "w1": mat(d, f), "w2": mat(f, d),
                "norm1": np.ones(d, DTYPE), "norm2": np.ones(d, DTYPE),
            })
        head = mat(d, config.vocab_size)
        return cls(config, embed, layers, np.ones(d, DTYPE), head)


class KVCache:
    """Preallocated keys and values for every layer.

    Storage is ``(n_layers, capacity, n_heads, head_dim)``. Rows below
    ``length`` are final: the only write path appends at the cursor.
    """

    def __init__(self, config: ModelConfig, capacity: int):
        shape = (config.n_layers, capacity, config.n_heads, config.head_dim)
        self.capacity = capacity
        self.length = 0
        self._k = np.zeros(shape, dtype=DTYPE)
        self._v = np.zeros(shape, dtype=DTYPE)

    def keys(self, layer: int, n: int | None = None) -> np.ndarray:
        view = self._k[layer, : self.length if n is None else n]
        view.flags.writeable = False
        return view

    def values(self, layer: int, n: int | None = None) -> np.ndarray:
        view = self._v[layer, : self.length if n is None else n]
        view.flags.writeable = False
        return view

    def _put(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        # write rows [length, length + len(k)) for one layer; advance() commits
        stop = self.length + len(k)
        if stop > self.capacity:
            raise CapacityExceeded(f"cache capacity {self.capacity} exceeded")
        self._k[layer, self.length : stop] = k
        self._v[layer, self.length : stop] = v

    def advance(self, count: int) -> None:
        if self.length + count > self.capacity:
            raise CapacityExceeded(f"cache capacity {self.capacity} exceeded")
        self.length += count

    def rewind(self, length: int) -> None:
        """Drop rows at and above ``length``. Benchmarks only."""
        if length > self.length:
            raise EngineError("cannot rewind forward")
        self.length = length

    def fill_random(self, length: int, rng) -> None:
        """Populate the first ``length`` rows with noise. Benchmarks only."""
        if length > self.capacity:
            raise CapacityExceeded(f"cache capacity {self.capacity} exceeded")
        self._k[:, :length] = rng.standard_normal(self._k[:, :length].shape)
        self._v[:, :length] = rng.standard_normal(self._v[:, :length].shape)
        self.length = length


def rmsnorm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True, dtype=DTYPE)
    return (x / np.sqrt(ms + RMS_EPS) * scale).astype(DTYPE)


_GELU_C = np.float32(math.sqrt(2.0 / math.pi))


def gelu(x: np.ndarray) -> np.ndarray:
    return (np.float32(0.5) * x * (np.float32(1.0) + np.tanh(_GELU_C * (x + np.float32(0.044715) * x**3)))).astype(DTYPE)


# ---------------------------------------------------------------------------
# forward passes


def prefill(weights: DecoderWeights, prompt, cache: KVCache) -> np.ndarray:
    """Batched causal pass over the prompt. Returns the last hidden state.

    Fills cache rows ``0..len(prompt)``; the next-token logits are
    ``logits_from_hidden(weights, hidden)``.
    """
    cfg = weights.config
    prompt = np.asarray(prompt, dtype=np.int64)
    l = len(prompt)
    if l == 0:
        raise EngineError("empty prompt")
    if cache.length != 0:
        raise EngineError("prefill needs an empty cache")
    if l > cache.capacity:
        raise CapacityExceeded(f"prompt of {l} tokens exceeds cache capacity {cache.capacity}")
    H, dh = cfg.n_heads, cfg.head_dim
    x = weights.embed[prompt]
    mask = causal_mask(l)
    for li, layer in enumerate(weights.layers):
        h = rmsnorm(x, layer["norm1"])
        q, k, v = h @ layer["wq"], h @ layer["wk"], h @ layer["wv"]
        cache._put(li, k.reshape(l, H, dh), v.reshape(l, H, dh))
        heads = [
            dense_attention(q[:, s], k[:, s], v[:, s], mask)[0]
            for s in (slice(j * dh, (j + 1) * dh) for j in range(H))
        ]
        x = x + np.concatenate(heads, axis=1) @ layer["wo"]
        x = x + gelu(rmsnorm(x, layer["norm2"]) @ layer["w1"]) @ layer["w2"]
    cache.advance(l)
    return x[-1].astype(DTYPE)


def logits_from_hidden(weights: DecoderWeights, hidden: np.ndarray) -> np.ndarray:
    return (rmsnorm(hidden, weights.final_norm) @ weights.head).astype(DTYPE)


@dataclass
class StepTimings:
    attention: float = 0.0
    ffn: float = 0.0
    other: float = 0.0
    total: float = 0.0


def forward_step(weights: DecoderWeights, caches, tokens, metas, mode: str = "sparse",
                 capture: list | None = None):
    """One decode step for a batch of requests, each with its own cache.

    Appends one K/V row per request and layer and returns
    ``(logits[B, vocab], [ReadStats per request], StepTimings)``. ``capture``,
    when given, receives the per-layer attention outputs (before W_O).
    """
    if mode not in MODES:
        raise EngineError(f"mode must be one of {MODES}")
    if not (len(caches) == len(tokens) == len(metas)):
        raise EngineError("batch sizes disagree")
    cfg = weights.config
    H, dh = cfg.n_heads, cfg.head_dim
    B = len(caches)
    clock = time.perf_counter
    tm = StepTimings()
    t_start = clock()
    for c in caches:
        if c.length == 0:
            raise EngineError("decode needs a non-empty cache; run prefill first")
        if c.length >= c.capacity:
            raise CapacityExceeded(f"cache capacity {c.capacity} exceeded")
    stats = [ReadStats() for _ in range(B)]
    x = weights.embed[np.asarray(tokens, dtype=np.int64)]
    t = clock()
    tm.other += t - t_start
    for li, layer in enumerate(weights.layers):
        t0 = clock()
        h = rmsnorm(x, layer["norm1"])
        t1 = clock()
        q, k, v = h @ layer["wq"], h @ layer["wk"], h @ layer["wv"]
        q = q.reshape(B, H, dh)
        att = np.empty((B, H, dh), dtype=DTYPE)
        for b, c in enumerate(caches):
            c._put(li, k[b].reshape(1, H, dh), v[b].reshape(1, H, dh))
            n = c.length + 1
            K, V = c._k[li, :n], c._v[li, :n]
            meta = metas[b]
            if meta is FULL or mode == "dense":
                att[b] = dense_decode_attention(q[b], K, V)
                stats[b] += dense_read_stats(n, DEFAULT_BLOCK_SIZE if meta is None else meta.block_size)
            elif mode == "sparse":
                att[b], st = sparse_decode_attention(q[b], K, V, meta)
                stats[b] += st
            else:
                att[b] = dense_decode_attention(q[b], K, V, metadata_to_dense_mask(meta, n))
                stats[b] += dense_read_stats(n, meta.block_size)
        flat = att.reshape(B, H * dh)
        if capture is not None:
            capture.append(flat.copy())
        x = x + flat @ layer["wo"]
        t2 = clock()
        h2 = rmsnorm(x, layer["norm2"])
        t3 = clock()
        x = x + gelu(h2 @ layer["w1"]) @ layer["w2"]
        t4 = clock()
        tm.other += (t1 - t0) + (t3 - t2)
        tm.attention += t2 - t1
        tm.ffn += t4 - t3
    t5 = clock()
    for c in caches:
        c.advance(1)
    logits = (rmsnorm(x, weights.final_norm) @ weights.head).astype(DTYPE)
    t6 = clock()
    tm.other += t6 - t5
    tm.total = t6 - t_start
    return logits, stats, tm


def decode_step(weights: DecoderWeights, cache: KVCache, meta, token: int,
                mode: str = "sparse") -> tuple[np.ndarray, ReadStats]:
    """Feed ``token`` at position ``cache.length`` and return next-token logits."""
    logits, stats, _ = forward_step(weights, [cache], [token], [meta], mode)
    return logits[0], stats[0]


def full_recompute_logits(weights: DecoderWeights, tokens) -> np.ndarray:
    """Next-token logits from a fresh causal pass, no cache reuse."""
    cache = KVCache(weights.config, len(tokens))
    return logits_from_hidden(weights, prefill(weights, tokens, cache))


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class StepRecord:
    position: int
    phase: str
    attended: int
    ignored: int
    sparsity: float


@dataclass
class GenerationResult:
    tokens: list
    predicted: list
    records: list
    margins: np.ndarray
    step_times: np.ndarray
    stats: ReadStats = field(default_factory=ReadStats)

    @property
    def min_margin(self) -> float:
        return float(self.margins.min()) if len(self.margins) else math.inf


@dataclass
class Request:
    prompt: list
    schedule: list
    forced: list | None = None


def top2_margin(logits: np.ndarray) -> float:
    if logits.shape[-1] < 2:
        return math.inf
    top = np.partition(logits, -2)[-2:]
    return float(top[1] - top[0])


def _meta_for(step, block_size: int):
    if step.selected is None:
        return FULL
    return encode_span(step.selected, step.position, block_size)


def generate_batch(weights: DecoderWeights, requests, mode: str = "sparse",
                   block_size: int = DEFAULT_BLOCK_SIZE, max_tokens: int | None = None,
                   capacity: int | None = None) -> list[GenerationResult]:
    """Greedy decoding for several requests in lockstep.

    Each request follows its own schedule: ``schedule[t]`` governs the
    attention used to produce the token at ``len(prompt) + t``. With
    ``forced`` set the request is teacher-forced: the model's argmax is
    still recorded in ``predicted`` but ``forced[t]`` is what gets fed back.
    Argmax ties go to the lowest token id.
    """
    if mode not in MODES:
        raise EngineError(f"mode must be one of {MODES}")
    states = []
    for r in requests:
        steps = r.schedule
        T = len(steps) if max_tokens is None else max_tokens
        if T > len(steps):
            raise ScheduleMismatch(f"schedule has {len(steps)} steps, {T} requested")
        if r.forced is not None and len(r.forced) < T:
            raise ScheduleMismatch("forced token list shorter than the generation")
        l = len(r.prompt)
        for t in range(T):
            if steps[t].position != l + t:
                raise ScheduleMismatch(
                    f"step {t} is planned for position {steps[t].position}, expected {l + t}"
                )
        need = l + max(T - 1, 0)
        cap = capacity if capacity is not None else max(need, 1)
        if need > cap:
            raise CapacityExceeded(f"generation needs {need} cache rows, capacity is {cap}")
        states.append({"req": r, "T": T, "cache": KVCache(weights.config, cap),
                       "tokens": [], "pred": [], "records": [], "margins": [], "times": [],
                       "stats": ReadStats(), "logits": None})

    # prompt: prefill all but the last token when the first step is restricted
    for s in states:
        r, cache = s["req"], s["cache"]
        if s["T"] == 0:
            continue
        first = r.schedule[0]
        t0 = time.perf_counter()
        if first.selected is None or mode == "dense":
            s["logits"] = logits_from_hidden(weights, prefill(weights, r.prompt, cache))
            st = dense_read_stats(len(r.prompt), block_size)
        else:
            if len(r.prompt) > 1:
                prefill(weights, r.prompt[:-1], cache)
            else:
                raise EngineError("a restricted first step needs a prompt of two or more tokens")
            logits, sts, _ = forward_step(weights, [cache], [r.prompt[-1]],
                                          [_meta_for(first, block_size)], mode)
            s["logits"] = logits[0]
            st = sts[0]
        s["times"].append(time.perf_counter() - t0)
        s["stats"] += st

    t = 0
    while True:
        active = [s for s in states if t < s["T"]]
        if not active:
            break
        feed = []
        for s in active:
            step = s["req"].schedule[t]
            logits = s["logits"]
            pred = int(np.argmax(logits))
            s["pred"].append(pred)
            s["margins"].append(top2_margin(logits))
            tok = pred if s["req"].forced is None else int(s["req"].forced[t])
            s["tokens"].append(tok)
            attended = step.position if (step.selected is None or mode == "dense") else len(step.selected)
            s["records"].append(StepRecord(
                step.position, step.phase, attended, step.position - attended,
                sparsity_of(range(attended), step.position),
            ))
            if t + 1 < s["T"]:
                feed.append(s)
        if feed:
            metas = [_meta_for(s["req"].schedule[t + 1], block_size) for s in feed]
            logits, stats, tm = forward_step(
                weights, [s["cache"] for s in feed], [s["tokens"][-1] for s in feed], metas, mode
            )
            for i, s in enumerate(feed):
                s["logits"] = logits[i]
                s["stats"] += stats[i]
                s["times"].append(tm.total)
        t += 1

    return [
        GenerationResult(s["tokens"], s["pred"], s["records"], np.asarray(s["margins"]),
                         np.asarray(s["times"]), s["stats"])
        for s in states
    ]


def greedy_generate(weights: DecoderWeights, prompt, schedule, max_tokens: int | None = None,
                    mode: str = "sparse", block_size: int = DEFAULT_BLOCK_SIZE,
                    forced=None, capacity: int | None = None) -> GenerationResult:
    """Single-request :func:`generate_batch`."""
    return generate_batch(weights, [Request(list(prompt), schedule, forced)], mode,
                          block_size, max_tokens, capacity)[0]


# ---------------------------------------------------------------------------
# runtime breakdown


@dataclass
class Breakdown:
    seq_len: int
    batch: int
    attention_ms: float
    ffn_ms: float
    other_ms: float
    total_ms: float

    def shares(self) -> dict:
        return {
            "attention": self.attention_ms / self.total_ms,
            "ffn": self.ffn_ms / self.total_ms,
            "other": self.other_ms / self.total_ms,
        }


def runtime_breakdown(weights: DecoderWeights, seq_len: int, batch: int = 8, reps: int = 31,
                      warmup: int = 3, seed: int = 0) -> Breakdown:
    """Median per-component wall time of one full-attention decode step.

    ``total_ms`` is the sum of the three component medians.

    Every request attends to ``seq_len`` tokens (``seq_len - 1`` cached
    rows plus the new one). Components: attention covers the Q/K/V/O
    projections and the kernel, FFN the two linear layers and activation,
    other the embedding lookup, norms, residual adds and output head.
    """
    if seq_len < 1:
        raise EngineError("seq_len must be positive")
    rng = np.random.default_rng(seed)
    caches = [KVCache(weights.config, seq_len) for _ in range(batch)]
    for c in caches:
        c.fill_random(seq_len - 1, rng)
    tokens = rng.integers(0, weights.config.vocab_size, batch)
    metas = [FULL] * batch
    rows = []
    for i in range(warmup + reps):
        _, _, tm = forward_step(weights, caches, tokens, metas, mode="dense")
        for c in caches:
            c.rewind(seq_len - 1)
        if i >= warmup:
            rows.append((tm.attention, tm.ffn, tm.other))
    # the total is the sum of the component medians so the shares add up
    med = [float(x) for x in np.median(np.asarray(rows), axis=0) * 1e3]
    return Breakdown(seq_len, batch, *med, sum(med))
