"""Controlled kernel benchmarks and sparsity accounting.

Timing numbers are medians over repetitions, with warmup iterations
discarded and variants interleaved within each repetition so slow drifts
(frequency scaling, cache state) hit every variant alike. All non-timing
outputs are fully determined by the seed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    DEFAULT_BLOCK_SIZE,
    DTYPE,
    ReadStats,
    dense_decode_attention,
    encode_span,
    sparse_decode_attention,
    sparse_read_stats,
)
from .arith import SPAN_SELECT, EvaluationTrace, oracle_schedule
from .engine import DecoderWeights, Request, generate_batch
from .protocol import Vocab

DEFAULT_N_LIST = (1024, 2048, 4096, 8192)
DEFAULT_SBS_LIST = (32, 64, 128, 256)
DEFAULT_REPS = 31
DEFAULT_WARMUP = 3
DEFAULT_BATCH = 8


class BenchError(ValueError):
    pass


class InfeasibleMask(BenchError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    n: int
    sparsity: float
    sparsity_block_size: int
    seed: int = 0


def random_block_mask(spec: MaskSpec) -> np.ndarray:
    """Binary mask of length ``n`` built from aligned runs of ones.

    The context is cut into ``ceil(n / sbs)`` blocks and
    ``round((1 - sparsity) * n / sbs)`` of them, drawn without replacement,
    are filled with ones.
    """
    n, s, sbs = spec.n, spec.sparsity, spec.sparsity_block_size
    if not 0 <= s < 1:
        raise InfeasibleMask("sparsity must lie in [0, 1)")
    if sbs < 1 or n < 1:
        raise InfeasibleMask("n and sparsity block size must be positive")
    nblocks = -(-n // sbs)
    mask = np.zeros(n, dtype=np.uint8)
    if s == 0:
        mask[:] = 1
        return mask
    k = min(nblocks, int(round((1 - s) * n / sbs)))
    if k == 0:
        raise InfeasibleMask(f"sparsity {s} leaves no block of {sbs} in {n} tokens")
    rng = np.random.default_rng(spec.seed)
    for b in np.sort(rng.choice(nblocks, size=k, replace=False)):
        mask[b * sbs : (b + 1) * sbs] = 1
    return mask


def achieved_sparsity(mask: np.ndarray) -> float:
    return 1.0 - float(np.count_nonzero(mask)) / len(mask)


@dataclass
class BenchRow:
    n: int
    sparsity: float
    sbs: int
    kernel_block: int
    dense_ms: float
    sparse_ms: float
    rows_read_sparse: int
    rows_read_dense: int
    achieved: float
    stats: ReadStats = field(default_factory=ReadStats)

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.sparse_ms

    @property
    def rows_read_ratio(self) -> float:
        return self.rows_read_sparse / self.rows_read_dense


def _batch_data(n: int, d: int, batch: int, rng):
    q = rng.standard_normal((batch, d)).astype(DTYPE)
    K = rng.standard_normal((batch, n, d)).astype(DTYPE)
    V = rng.standard_normal((batch, n, d)).astype(DTYPE)
    return q, K, V


def _interleaved_medians(fns: dict, reps: int, warmup: int) -> dict:
    samples = {k: [] for k in fns}
    clock = time.perf_counter
    for i in range(warmup + reps):
        for name, fn in fns.items():
            t0 = clock()
            fn()
            dt = clock() - t0
            if i >= warmup:
                samples[name].append(dt)
    return {k: float(np.median(v)) * 1e3 for k, v in samples.items()}


def bench_kernel(n_list=DEFAULT_N_LIST, sparsity: float = 0.5, sbs_list=DEFAULT_SBS_LIST,
                 kernel_block_size: int = DEFAULT_BLOCK_SIZE, batch: int = DEFAULT_BATCH,
                 reps: int = DEFAULT_REPS, warmup: int = DEFAULT_WARMUP, d: int = 64,
                 seed: int = 0, include_full: bool = True, log=None) -> list[BenchRow]:
    """Dense single-row decode vs the sparse kernel on identical data.

    For every ``n`` one row per sparsity block size, plus (with
    ``include_full``) an overhead-control row at sparsity 0 where the sparse
    kernel receives metadata covering the whole context. Configurations that
    cannot be allocated or masked are skipped with a notice on ``log``.
    """
    rows: list[BenchRow] = []
    for ni, n in enumerate(n_list):
        rng = np.random.default_rng([seed, ni])
        try:
            q, K, V = _batch_data(n, d, batch, rng)
        except MemoryError:
            if log:
                log(f"skipping n={n}: out of memory")
            continue
        variants = {}
        metas = {}
        masks = {}
        specs = [(sbs, sparsity) for sbs in sbs_list]
        if include_full:
            specs.append((kernel_block_size, 0.0))
        for sbs, s in specs:
            try:
                mask = random_block_mask(MaskSpec(n, s, sbs, seed=seed * 100003 + n * 7 + sbs))
            except InfeasibleMask as exc:
                if log:
                    log(f"skipping n={n} sbs={sbs}: {exc}")
                continue
            meta = encode_span(np.flatnonzero(mask), n, kernel_block_size)
            metas[(sbs, s)] = meta
            masks[(sbs, s)] = mask
            variants[(sbs, s)] = _sparse_runner(q, K, V, meta)
        variants["dense"] = _dense_runner(q, K, V)
        med = _interleaved_medians(variants, reps, warmup)
        for key, meta in metas.items():
            sbs, s = key
            st = sparse_read_stats(meta, n)
            rows.append(BenchRow(
                n, s, sbs, kernel_block_size, med["dense"], med[key],
                st.key_rows_read * batch, n * batch, achieved_sparsity(masks[key]), st,
            ))
    return rows


def _dense_runner(q, K, V):
    def run():
        for b in range(len(q)):
            dense_decode_attention(q[b], K[b], V[b])
    return run


def _sparse_runner(q, K, V, meta):
    def run():
        for b in range(len(q)):
            sparse_decode_attention(q[b], K[b], V[b], meta)
    return run


def geomean(xs) -> float:
    xs = np.asarray(list(xs), dtype=np.float64)
    return float(np.exp(np.mean(np.log(xs))))


def speedup_by_sbs(rows, sparsity: float = 0.5) -> dict:
    """Geometric-mean speedup over context lengths, keyed by sparsity block size."""
    by: dict[int, list] = {}
    for r in rows:
        if r.sparsity == sparsity:
            by.setdefault(r.sbs, []).append(r.speedup)
    return {k: geomean(v) for k, v in sorted(by.items())}


@dataclass
class SweepResult:
    best: int
    table: list  # (n, kernel_block, median_ms)


def block_size_sweep(n_list, sparsity: float, candidates, sbs: int = 256,
                     batch: int = DEFAULT_BATCH, reps: int = DEFAULT_REPS,
                     warmup: int = DEFAULT_WARMUP, d: int = 64, seed: int = 0) -> SweepResult:
    """Time the sparse kernel for each candidate block size.

    The winner minimises the geometric mean of median times over ``n_list``;
    ties go to the larger block.
    """
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise BenchError("no candidate block sizes")
    if isinstance(n_list, int):
        n_list = [n_list]
    table = []
    for ni, n in enumerate(n_list):
        rng = np.random.default_rng([seed, ni])
        q, K, V = _batch_data(n, d, batch, rng)
        mask = random_block_mask(MaskSpec(n, sparsity, sbs, seed=seed))
        sel = np.flatnonzero(mask)
        runners = {c: _sparse_runner(q, K, V, encode_span(sel, n, c)) for c in candidates}
        med = _interleaved_medians(runners, reps, warmup)
        table.extend((n, c, med[c]) for c in candidates)
    if len(candidates) == 1:
        return SweepResult(candidates[0], table)
    score = {c: geomean(t for _, cc, t in table if cc == c) for c in candidates}
    best = min(candidates, key=lambda c: (score[c], -c))
    return SweepResult(best, table)


# ---------------------------------------------------------------------------
# achieved sparsity over generation


@dataclass
class SparsityTrace:
    runs: list  # one list of StepRecord per run
    output_lengths: list

    def series(self) -> list[np.ndarray]:
        return [np.array([r.sparsity for r in recs]) for recs in self.runs]

    @property
    def mean(self) -> float:
        return float(np.mean(np.concatenate(self.series())))

    def quartile_means(self) -> list[float]:
        """Mean sparsity over each quarter of the generated positions, pooled over runs."""
        parts = [[], [], [], []]
        for s in self.series():
            for i, chunk in enumerate(np.array_split(s, 4)):
                parts[i].append(chunk)
        return [float(np.mean(np.concatenate(p))) for p in parts]

    def select_sparsities(self) -> np.ndarray:
        return np.array([r.sparsity for recs in self.runs for r in recs if r.phase == SPAN_SELECT])

    def rows(self):
        for run, recs in enumerate(self.runs):
            for r in recs:
                yield run, r.position, r.phase, r.attended, r.ignored, r.sparsity


def traces_in_bin(traces, vocab: Vocab, lo: int, hi: int) -> list:
    return [t for t in traces if lo <= t.output_length(vocab) < hi]


def sparsity_trace(traces, weights: DecoderWeights, vocab: Vocab, lo: int = 768, hi: int = 1024,
                   runs: int | None = 3, block_size: int = DEFAULT_BLOCK_SIZE) -> SparsityTrace:
    """Per-token achieved sparsity from teacher-forced sparse generation.

    Uses the first ``runs`` traces whose ground-truth output length lies in
    ``[lo, hi)`` (all of them when ``runs`` is None).
    """
    chosen = traces_in_bin(traces, vocab, lo, hi)
    if not chosen:
        raise BenchError(f"no trace with output length in [{lo}, {hi})")
    if runs is not None:
        chosen = chosen[:runs]
    reqs = []
    for t in chosen:
        sched = oracle_schedule(t, vocab)
        reqs.append(Request(sched.prompt, sched.steps, sched.target))
    results = generate_batch(weights, reqs, mode="sparse", block_size=block_size)
    return SparsityTrace([r.records for r in results], [len(r.tokens) for r in results])


def schedule_sparsity(trace: EvaluationTrace, vocab: Vocab) -> np.ndarray:
    """Sparsity per generated position straight from the oracle schedule."""
    steps = oracle_schedule(trace, vocab).steps
    return np.array([
        0.0 if st.selected is None else (st.position - len(st.selected)) / st.position
        for st in steps
    ])

