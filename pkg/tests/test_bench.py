import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfspan.arith import SPAN_SELECT, GenConfig, gen_expression, solve_with_trace
from selfspan.bench import (
    BenchError,
    InfeasibleMask,
    MaskSpec,
    achieved_sparsity,
    bench_kernel,
    block_size_sweep,
    geomean,
    random_block_mask,
    schedule_sparsity,
    sparsity_trace,
    speedup_by_sbs,
)
from selfspan.engine import DecoderWeights, ModelConfig
from selfspan.protocol import Vocab


def test_mask_examples():
    m = random_block_mask(MaskSpec(1024, 0.5, 64, seed=1))
    blocks = m.reshape(16, 64)
    assert blocks.all(axis=1).sum() == 8 and (~blocks.any(axis=1)).sum() == 8
    assert random_block_mask(MaskSpec(100, 0.0, 7)).all()
    m = random_block_mask(MaskSpec(1000, 0.5, 64, seed=2))
    assert abs(achieved_sparsity(m) - 0.5) <= 1 / 15


def test_mask_errors():
    with pytest.raises(InfeasibleMask):
        random_block_mask(MaskSpec(64, 0.99, 64))
    with pytest.raises(InfeasibleMask):
        random_block_mask(MaskSpec(64, 1.0, 8))
    with pytest.raises(InfeasibleMask):
        random_block_mask(MaskSpec(64, 0.5, 0))


@settings(max_examples=150, deadline=None)
@given(st.integers(16, 3000), st.floats(0.05, 0.9), st.integers(1, 300), st.integers(0, 10**6))
def test_mask_properties(n, s, sbs, seed):
    spec = MaskSpec(n, s, sbs, seed)
    try:
        m = random_block_mask(spec)
    except InfeasibleMask:
        assert round((1 - s) * n / sbs) == 0
        return
    assert np.array_equal(m, random_block_mask(spec))
    nblocks = -(-n // sbs)
    padded = np.zeros(nblocks * sbs, dtype=m.dtype)
    padded[:n] = m
    rows = padded.reshape(nblocks, sbs)
    # each block is either untouched or filled up to the end of the context
    for b, row in enumerate(rows):
        width = min(sbs, n - b * sbs)
        assert row[:width].all() or not row.any()
    if (n * (1 - s) / sbs).is_integer() and n % sbs == 0:
        assert achieved_sparsity(m) == pytest.approx(s)


def test_bench_read_accounting():
    rows = bench_kernel(n_list=(256, 1000), sbs_list=(32, 64, 128), reps=2, warmup=1, batch=2)
    assert len(rows) == 8
    for r in rows:
        assert r.rows_read_ratio == pytest.approx(r.stats.blocks_visited / r.stats.total_blocks, abs=64 / r.n)
        assert r.speedup == r.dense_ms / r.sparse_ms
    aligned = [r for r in rows if r.sparsity == 0.5 and r.sbs % r.kernel_block == 0 and r.n == 256]
    assert aligned and all(r.rows_read_ratio == 0.5 for r in aligned)
    assert all(r.stats.blocks_skipped == r.stats.blocks_visited for r in aligned)
    control = [r for r in rows if r.sparsity == 0.0]
    assert len(control) == 2 and all(r.rows_read_ratio == 1 for r in control)


def test_bench_non_timing_columns_deterministic():
    a = bench_kernel(n_list=(512,), reps=1, warmup=0, batch=1, seed=5)
    b = bench_kernel(n_list=(512,), reps=1, warmup=0, batch=1, seed=5)
    key = lambda rows: [(r.n, r.sparsity, r.sbs, r.kernel_block, r.rows_read_sparse, r.achieved) for r in rows]
    assert key(a) == key(b)


def test_bench_skips_infeasible():
    notes = []
    rows = bench_kernel(n_list=(128,), sbs_list=(256,), sparsity=0.9, reps=1, warmup=0, batch=1,
                        include_full=False, log=notes.append)
    assert rows == [] and notes


def test_geomean_and_grouping():
    assert geomean([1, 4]) == pytest.approx(2)

    class R:
        def __init__(self, sbs, s):
            self.sbs, self.speedup, self.sparsity = sbs, s, 0.5

    g = speedup_by_sbs([R(64, 1.0), R(64, 4.0), R(32, 2.0)])
    assert g == {32: pytest.approx(2.0), 64: pytest.approx(2.0)}


def test_sweep():
    res = block_size_sweep([256], 0.5, [64], sbs=64, reps=1, warmup=0, batch=1)
    assert res.best == 64 and len(res.table) == 1
    res = block_size_sweep([256, 512], 0.5, [16, 64, 256], sbs=64, reps=3, warmup=1, batch=1)
    assert len(res.table) == 6
    score = {c: geomean(t for _, cc, t in res.table if cc == c) for c in (16, 64, 256)}
    assert score[res.best] == min(score.values())
    with pytest.raises(BenchError):
        block_size_sweep([256], 0.5, [])


def _traces(n):
    return [solve_with_trace(gen_expression(GenConfig(seed=s))) for s in range(n)]


def test_sparsity_trace_small_bin():
    vocab = Vocab()
    w = DecoderWeights.init(ModelConfig(vocab_size=len(vocab)))
    traces = []
    for t in _traces(200):
        try:
            t.tokens(vocab)
        except ValueError:
            continue
        traces.append(t)
    tr = sparsity_trace(traces, w, vocab, lo=256, hi=512, runs=2)
    assert len(tr.runs) == 2
    assert list(tr.rows())[0][0] == 0
    assert np.all(tr.select_sparsities() == 0)
    assert len(list(tr.rows())) == sum(tr.output_lengths)
    # engine-side records agree with the schedule's own accounting
    chosen = [t for t in traces if 256 <= t.output_length(vocab) < 512][:2]
    for recs, t in zip(tr.runs, chosen):
        assert np.allclose([r.sparsity for r in recs], schedule_sparsity(t, vocab))
        assert all(r.sparsity == 0 for r in recs if r.phase == SPAN_SELECT)
    with pytest.raises(BenchError):
        sparsity_trace(traces, w, vocab, lo=10**6, hi=10**6 + 1)
