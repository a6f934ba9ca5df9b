import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfspan.arith import ANCHOR_EMIT, SPAN_SELECT, GenConfig, Step, full_schedule, gen_expression, oracle_schedule, solve_with_trace
from selfspan.attention import SpanMetadata, encode_span
from selfspan.engine import (
    FULL,
    CapacityExceeded,
    DecoderWeights,
    EngineError,
    KVCache,
    ModelConfig,
    Request,
    ScheduleMismatch,
    decode_step,
    forward_step,
    full_recompute_logits,
    generate_batch,
    greedy_generate,
    logits_from_hidden,
    prefill,
    runtime_breakdown,
    top2_margin,
)
from selfspan.protocol import TokenizeError, Vocab

VOCAB = Vocab()


@pytest.fixture(scope="module")
def weights():
    return DecoderWeights.init(ModelConfig(vocab_size=len(VOCAB), seed=0))


def rms64(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)


def test_weights_seeded():
    a = DecoderWeights.init(ModelConfig(seed=3))
    b = DecoderWeights.init(ModelConfig(seed=3))
    c = DecoderWeights.init(ModelConfig(seed=4))
    assert np.array_equal(a.layers[1]["w2"], b.layers[1]["w2"])
    assert not np.array_equal(a.embed, c.embed)
    assert all(np.isfinite(m).all() for layer in a.layers for m in layer.values())
    with pytest.raises(EngineError):
        DecoderWeights.init(ModelConfig(d_model=10, n_heads=4))


def test_single_token_prefill_by_hand():
    # one token: attention returns its own value row, so the whole pass is
    # a straight chain of matrix products
    cfg = ModelConfig(vocab_size=8, d_model=8, n_heads=2, n_layers=1, seed=1)
    w = DecoderWeights.init(cfg)
    cache = KVCache(cfg, 4)
    logits = logits_from_hidden(w, prefill(w, [5], cache))
    assert cache.length == 1
    L = w.layers[0]
    x = w.embed[5].astype(np.float64)
    x = x + (rms64(x) @ L["wv"]) @ L["wo"]
    h = rms64(x) @ L["w1"]
    g = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
    x = x + g @ L["w2"]
    expect = rms64(x) @ w.head
    assert np.abs(logits - expect).max() < 1e-4


def test_single_recent_token_meta_by_hand_d4():
    cfg = ModelConfig(vocab_size=6, d_model=4, n_heads=1, n_layers=1, seed=2)
    w = DecoderWeights.init(cfg)
    cache = KVCache(cfg, 8)
    prefill(w, [1, 2, 3], cache)
    cap = []
    # the step feeding token 4 at position 3 attends only to itself
    forward_step(w, [cache], [4], [encode_span([3], 4, 4)], "sparse", capture=cap)
    L = w.layers[0]
    e = w.embed[4].astype(np.float64)
    v = (e / np.sqrt(np.mean(e * e) + 1e-6)) @ L["wv"]
    assert np.abs(cap[0][0] - v).max() < 1e-5


def test_prefill_then_decode_matches_recompute(weights):
    rng = np.random.default_rng(0)
    toks = list(rng.integers(0, len(VOCAB), 17))
    cache = KVCache(weights.config, 17)
    prefill(weights, toks[:16], cache)
    logits, _ = decode_step(weights, cache, FULL, toks[16], mode="dense")
    assert np.abs(logits - full_recompute_logits(weights, toks)).max() <= 1e-5


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, len(VOCAB) - 1), min_size=2, max_size=128), st.data())
def test_cache_equivalence(toks, data):
    w = DecoderWeights.init(ModelConfig(vocab_size=len(VOCAB), seed=0))
    split = data.draw(st.integers(1, len(toks) - 1))
    cache = KVCache(w.config, len(toks))
    prefill(w, toks[:split], cache)
    for t in toks[split:]:
        logits, _ = decode_step(w, cache, FULL, t, mode="dense")
    assert np.abs(logits - full_recompute_logits(w, toks)).max() <= 1e-5


def test_capacity_errors(weights):
    cache = KVCache(weights.config, 4)
    with pytest.raises(CapacityExceeded):
        prefill(weights, [1] * 5, cache)
    prefill(weights, [1] * 4, cache)
    with pytest.raises(CapacityExceeded):
        decode_step(weights, cache, FULL, 1)
    with pytest.raises(EngineError):
        decode_step(weights, KVCache(weights.config, 4), FULL, 1)
    with pytest.raises(EngineError):
        prefill(weights, [1], cache)


def test_cache_immutability(weights):
    cache = KVCache(weights.config, 64)
    prefill(weights, list(range(10)), cache)
    k0, v0 = cache.keys(0).copy(), cache.values(1).copy()
    for t in range(20):
        decode_step(weights, cache, encode_span([0, cache.length], cache.length + 1, 8), t)
    assert cache.keys(0, 10).tobytes() == k0.tobytes()
    assert cache.values(1, 10).tobytes() == v0.tobytes()
    with pytest.raises(ValueError):
        cache.keys(0)[0, 0, 0] = 1.0


def test_full_span_meta_matches_full(weights):
    rng = np.random.default_rng(1)
    toks = list(rng.integers(0, len(VOCAB), 40))
    a, b = KVCache(weights.config, 41), KVCache(weights.config, 41)
    prefill(weights, toks, a)
    prefill(weights, toks, b)
    la, _ = decode_step(weights, a, FULL, 7)
    lb, stats = decode_step(weights, b, SpanMetadata.full(41, 16), 7)
    assert np.abs(la - lb).max() <= 1e-5
    assert stats.blocks_skipped == 0


def test_full_meta_vs_dense_argmax(weights):
    for seed in range(50):
        rng = np.random.default_rng(seed)
        prompt = list(rng.integers(0, len(VOCAB), 8))
        sched = full_schedule(8, 12)
        a = greedy_generate(weights, prompt, sched, mode="sparse")
        b = greedy_generate(weights, prompt, sched, mode="dense")
        assert a.tokens == b.tokens


def test_all_full_schedule_is_plain_greedy(weights):
    prompt = [3, 1, 4, 1, 5]
    res = greedy_generate(weights, prompt, full_schedule(5, 10))
    toks = list(prompt)
    for _ in range(10):
        toks.append(int(np.argmax(full_recompute_logits(weights, toks))))
    assert res.tokens == toks[5:]


def test_all_context_span_matches_full(weights):
    prompt = [3, 1, 4, 1, 5, 9, 2, 6]
    n = 16
    full = greedy_generate(weights, prompt, full_schedule(8, n))
    spans = [Step(8 + t, "content", np.arange(8 + t)) for t in range(n)]
    sparse = greedy_generate(weights, prompt, spans)
    assert full.tokens == sparse.tokens


def test_tie_break_lowest_id():
    cfg = ModelConfig(vocab_size=10, seed=0)
    w = DecoderWeights.init(cfg)
    w.head[:] = 0
    res = greedy_generate(w, [1, 2], full_schedule(2, 3))
    assert res.tokens == [0, 0, 0]
    assert top2_margin(np.array([1.0, 3.0, 2.5])) == 0.5


def test_schedule_mismatch(weights):
    with pytest.raises(ScheduleMismatch):
        greedy_generate(weights, [1, 2], full_schedule(3, 2))
    with pytest.raises(ScheduleMismatch):
        greedy_generate(weights, [1, 2], full_schedule(2, 2), max_tokens=3)
    with pytest.raises(EngineError):
        greedy_generate(weights, [1, 2], full_schedule(2, 2), mode="fast")
    with pytest.raises(CapacityExceeded):
        greedy_generate(weights, [1, 2], full_schedule(2, 5), capacity=4)


def _oracle_requests(n, min_len=0):
    reqs = []
    seed = 0
    while len(reqs) < n:
        t = solve_with_trace(gen_expression(GenConfig(seed=seed)))
        seed += 1
        try:
            s = oracle_schedule(t, VOCAB)
        except TokenizeError:
            continue
        if len(s) >= min_len:
            reqs.append(Request(s.prompt, s.steps, s.target))
    return reqs


def test_step_records_and_phases(weights):
    reqs = _oracle_requests(3, 100)
    for res, r in zip(generate_batch(weights, reqs, "sparse"), reqs):
        assert res.tokens == r.forced
        for rec, step in zip(res.records, r.schedule):
            assert rec.attended + rec.ignored == rec.position == step.position
            assert rec.sparsity == rec.ignored / rec.position
            if rec.phase in (SPAN_SELECT, ANCHOR_EMIT):
                assert rec.sparsity == 0
        assert any(rec.sparsity > 0 for rec in res.records)


def test_sparse_reads_less(weights):
    reqs = _oracle_requests(2, 300)
    sp = generate_batch(weights, reqs, "sparse")
    de = generate_batch(weights, reqs, "dense")
    for a, b in zip(sp, de):
        assert a.stats.key_rows_read < b.stats.key_rows_read


def test_batch_equals_individual(weights):
    reqs = _oracle_requests(4, 50)
    batch = generate_batch(weights, reqs, "sparse")
    for r, b in zip(reqs, batch):
        one = generate_batch(weights, [r], "sparse")[0]
        assert one.predicted == b.predicted


def test_sparse_vs_masked_twin_free_running(weights):
    reqs = _oracle_requests(5, 128)
    for r in reqs:
        free = Request(r.prompt, r.schedule)
        a = generate_batch(weights, [free], "sparse")[0]
        b = generate_batch(weights, [free], "masked")[0]
        if b.min_margin < 1e-4:
            continue
        assert a.tokens == b.tokens


def test_breakdown_accounting(weights):
    rows = [runtime_breakdown(weights, n, batch=4, reps=9) for n in (256, 512)]
    for b in rows:
        assert abs(sum(b.shares().values()) - 1) <= 0.02
    # FFN work does not depend on the context length
    ffn = np.array([b.ffn_ms for b in rows])
    assert np.all(np.abs(ffn / ffn.mean() - 1) <= 0.2)
    with pytest.raises(EngineError):
        runtime_breakdown(weights, 0)
