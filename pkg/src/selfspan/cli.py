"""Command-line entry point.

    python -m selfspan gen-arith --count 1000 --seed 0 --out data.jsonl
    python -m selfspan run --dataset data.jsonl --mode both --csv run.csv
    python -m selfspan bench --csv bench.csv
    python -m selfspan sparsity-trace --dataset data.jsonl --csv trace.csv
    python -m selfspan breakdown --csv breakdown.csv
    python -m selfspan sweep --candidates 16,64,256 --csv sweep.csv

Data goes to the named file (or standard output when no file is given),
diagnostics go to standard error. Every file written is accompanied by a
``<file>.manifest.json`` recording the command, its configuration, the seed,
the package version and start/end timestamps.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .arith import SPAN_SELECT, EvaluationTrace, GenConfig, check_answer, gen_expression, oracle_schedule, solve_with_trace
from .bench import block_size_sweep, bench_kernel, sparsity_trace
from .engine import DecoderWeights, ModelConfig, Request, generate_batch, runtime_breakdown
from .protocol import ProtocolError, Vocab

SCHEMA_VERSION = 1

DATASET_FIELDS = ("expression", "answer", "lines", "bin", "seed")
RUN_COLUMNS = ("index", "bin", "mode", "tokens", "correct", "mean_sparsity", "rows_read",
               "tok_s_inclusive", "tok_s_exclusive", "token_identical")
BENCH_COLUMNS = ("n", "sparsity", "sbs", "kernel_block", "dense_ms", "sparse_ms", "speedup",
                 "rows_read_ratio")
TRACE_COLUMNS = ("run", "position", "phase", "attended", "ignored", "sparsity")
BREAKDOWN_COLUMNS = ("seq_len", "batch", "attention_ms", "ffn_ms", "other_ms", "total_ms",
                     "attention_share", "ffn_share", "other_share")
SWEEP_COLUMNS = ("n", "kernel_block", "median_ms")

# columns whose values depend on the wall clock
TIMING_COLUMNS = {"tok_s_inclusive", "tok_s_exclusive", "dense_ms", "sparse_ms", "speedup",
                  "attention_ms", "ffn_ms", "other_ms", "total_ms", "attention_share",
                  "ffn_share", "other_share", "median_ms"}

TIE_GUARD = 1e-4


class CliError(Exception):
    pass


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


@contextmanager
def _output(path, command: str, config: dict):
    """Yield a text stream for ``path`` (stdout for None) and write its manifest."""
    started = _now()
    if path is None:
        yield sys.stdout
        return
    path = Path(path)
    buf = io.StringIO()
    yield buf
    try:
        path.write_text(buf.getvalue())
        manifest = {
            "command": command,
            "config": config,
            "seed": config.get("seed"),
            "version": __version__,
            "schema": SCHEMA_VERSION,
            "started": started,
            "finished": _now(),
        }
        Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from None


def _write_csv(stream, columns, rows) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])


def _config_of(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


# ---------------------------------------------------------------------------
# dataset


def example_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def build_dataset(count: int = 1000, seed: int = 0, max_digits: int = 10, bin_width: int = 256,
                  max_len: int = 1536, max_attempts: int | None = None, vocab: Vocab | None = None):
    """Seeded examples spread evenly over output-length bins.

    Bin ``b`` holds traces whose output-token length lies in
    ``[b * bin_width, (b + 1) * bin_width)``; quotas are ``count // nbins``
    with the remainder going to the shortest bins. Traces the vocabulary
    cannot encode (too many anchors) are skipped. Returns the records and
    per-bin ``(filled, quota)`` pairs.
    """
    vocab = vocab or Vocab()
    nbins = max_len // bin_width
    if nbins < 1:
        raise CliError("max length must be at least one bin width")
    quota = [count // nbins + (1 if b < count % nbins else 0) for b in range(nbins)]
    filled = [0] * nbins
    records = []
    attempts = max_attempts if max_attempts is not None else max(50 * count, 1000)
    for i in range(attempts):
        if len(records) == count:
            break
        s = example_seed(seed, i)
        trace = solve_with_trace(gen_expression(GenConfig(max_digits=max_digits, seed=s)))
        try:
            length = trace.output_length(vocab)
        except ProtocolError:
            continue
        b = length // bin_width
        if b >= nbins or filled[b] >= quota[b]:
            continue
        filled[b] += 1
        rec = trace.to_record()
        rec["bin"] = b
        rec["seed"] = s
        records.append(rec)
    return records, list(zip(filled, quota))


def load_dataset(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise CliError(f"dataset {path} does not exist")
    recs = []
    with path.open() as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{ln}: {exc}") from None
            missing = [k for k in DATASET_FIELDS if k not in rec]
            if missing:
                raise CliError(f"{path}:{ln}: missing fields {missing}")
            recs.append(rec)
    return recs


def dataset_overhead(records, vocab: Vocab | None = None) -> float:
    """Anchor and reference tokens over all tokens, pooled over the dataset."""
    vocab = vocab or Vocab()
    extra = total = 0
    for rec in records:
        toks = np.asarray(EvaluationTrace.from_record(rec).tokens(vocab))
        extra += int(np.count_nonzero(toks >= vocab.anchor_base))
        total += len(toks)
    return extra / total if total else 0.0


def cmd_gen_arith(args) -> int:
    records, fill = build_dataset(args.count, args.seed, args.max_digits, args.bin_width,
                                  args.max_len, args.max_attempts)
    short = [(b, f, q) for b, (f, q) in enumerate(fill) if f < q]
    for b, f, q in short:
        log(f"bin {b} [{b * args.bin_width}, {(b + 1) * args.bin_width}): filled {f} of {q}")
    with _output(args.out, "gen-arith", _config_of(args)) as out:
        for rec in records:
            out.write(json.dumps(rec, separators=(",", ":")) + "\n")
    log(f"wrote {len(records)} examples")
    if short:
        raise CliError("could not fill every bin; raise --max-attempts or lower --count")
    return 0


# ---------------------------------------------------------------------------
# engine runs


def _throughput(res) -> tuple[float, float]:
    times = res.step_times
    incl = len(res.tokens) / times.sum() if times.sum() > 0 else 0.0
    keep = np.array([r.phase != SPAN_SELECT for r in res.records])
    t_ex = times[keep].sum()
    excl = keep.sum() / t_ex if t_ex > 0 else 0.0
    return float(incl), float(excl)


def _identical(a, b, margins) -> bool:
    """Token identity with steps under the tie-margin guard excluded."""
    return all(x == y for x, y, m in zip(a, b, margins) if m >= TIE_GUARD)


def run_examples(records, mode: str = "both", block_size: int = 64, batch: int = 8,
                 seed: int = 0, vocab: Vocab | None = None) -> list[tuple]:
    """Teacher-forced generation over ``records``; returns one row per example and mode."""
    vocab = vocab or Vocab()
    weights = DecoderWeights.init(ModelConfig(vocab_size=len(vocab), seed=seed))
    modes = ("dense", "sparse") if mode == "both" else (mode,)
    rows = []
    if records:
        # compile the kernels outside the timed region
        sched = oracle_schedule(EvaluationTrace.from_record(records[0]), vocab)
        warm = [Request(sched.prompt, sched.steps, sched.target)]
        for m in modes + ("masked",):
            generate_batch(weights, warm, mode=m, block_size=block_size, max_tokens=min(16, len(sched)))
    for lo in range(0, len(records), batch):
        chunk = records[lo : lo + batch]
        traces = [EvaluationTrace.from_record(r) for r in chunk]
        scheds = [oracle_schedule(t, vocab) for t in traces]
        reqs = [Request(s.prompt, s.steps, s.target) for s in scheds]
        results = {m: generate_batch(weights, reqs, mode=m, block_size=block_size) for m in modes}
        twin = generate_batch(weights, reqs, mode="masked", block_size=block_size) if mode == "both" else None
        for i, rec in enumerate(chunk):
            same = ""
            if twin is not None:
                same = _identical(results["sparse"][i].predicted, twin[i].predicted, twin[i].margins)
            for m in modes:
                res = results[m][i]
                text = vocab.detokenize(res.tokens)
                incl, excl = _throughput(res)
                rows.append((
                    lo + i, rec["bin"], m, len(res.tokens), check_answer(text, int(rec["answer"])),
                    float(np.mean([r.sparsity for r in res.records])), res.stats.key_rows_read,
                    incl, excl, same,
                ))
    return rows


def cmd_run(args) -> int:
    if args.block_size < 1 or args.batch < 1:
        raise CliError("--block-size and --batch must be positive")
    records = load_dataset(args.dataset)
    if args.limit is not None:
        records = records[: args.limit]
    rows = run_examples(records, args.mode, args.block_size, args.batch, args.seed)
    with _output(args.csv, "run", _config_of(args)) as out:
        _write_csv(out, RUN_COLUMNS, rows)
    for m in sorted({r[2] for r in rows}):
        sel = [r for r in rows if r[2] == m]
        acc = np.mean([r[4] for r in sel])
        log(f"{m}: accuracy {acc:.3f}, mean tok/s {np.mean([r[7] for r in sel]):.1f}")
    if args.mode == "both":
        bad = sum(1 for r in rows if r[2] == "sparse" and not r[9])
        log(f"token identity failures: {bad}")
    return 0


# ---------------------------------------------------------------------------
# benchmarks


def cmd_bench(args) -> int:
    rows = bench_kernel(args.n_list, args.sparsity, args.sparsity_block_size, args.block_size,
                        args.batch, args.reps, args.warmup, seed=args.seed,
                        include_full=not args.no_control, log=log)
    with _output(args.csv, "bench", _config_of(args)) as out:
        _write_csv(out, BENCH_COLUMNS, [
            (r.n, r.sparsity, r.sbs, r.kernel_block, r.dense_ms, r.sparse_ms, r.speedup,
             r.rows_read_ratio)
            for r in rows
        ])
    return 0


def cmd_sparsity_trace(args) -> int:
    vocab = Vocab()
    traces = [EvaluationTrace.from_record(r) for r in load_dataset(args.dataset)]
    weights = DecoderWeights.init(ModelConfig(vocab_size=len(vocab), seed=args.seed))
    try:
        tr = sparsity_trace(traces, weights, vocab, args.lo, args.hi, args.runs, args.block_size)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    with _output(args.csv, "sparsity-trace", _config_of(args)) as out:
        _write_csv(out, TRACE_COLUMNS, tr.rows())
    q = tr.quartile_means()
    log(f"mean sparsity {tr.mean:.4f}; quartiles " + " ".join(f"{x:.3f}" for x in q))
    return 0


def cmd_breakdown(args) -> int:
    vocab = Vocab()
    weights = DecoderWeights.init(ModelConfig(vocab_size=len(vocab), seed=args.seed))
    rows = []
    for n in args.seq_lens:
        b = runtime_breakdown(weights, n, args.batch, args.reps, args.warmup, seed=args.seed)
        sh = b.shares()
        rows.append((b.seq_len, b.batch, b.attention_ms, b.ffn_ms, b.other_ms, b.total_ms,
                     sh["attention"], sh["ffn"], sh["other"]))
    with _output(args.csv, "breakdown", _config_of(args)) as out:
        _write_csv(out, BREAKDOWN_COLUMNS, rows)
    return 0


def cmd_sweep(args) -> int:
    res = block_size_sweep(args.n_list, args.sparsity, args.candidates, args.sparsity_block_size,
                           args.batch, args.reps, args.warmup, seed=args.seed)
    with _output(args.csv, "sweep", _config_of(args)) as out:
        _write_csv(out, SWEEP_COLUMNS, res.table)
    log(f"best kernel block size: {res.best}")
    return 0


# ---------------------------------------------------------------------------


def _bench_flags(p, sbs_default, n_default):
    p.add_argument("--n-list", type=_int_list, default=list(n_default))
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--sparsity-block-size", type=_int_list, default=list(sbs_default))
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--reps", type=int, default=31)
    p.add_argument("--warmup", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfspan", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-arith", help="generate the arithmetic dataset (JSONL)")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--max-digits", type=int, default=10)
    p.add_argument("--bin-width", type=int, default=256)
    p.add_argument("--max-len", type=int, default=1536)
    p.add_argument("--max-attempts", type=int, default=None)
    p.set_defaults(func=cmd_gen_arith)

    p = sub.add_parser("run", help="teacher-forced generation over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("dense", "sparse", "both"), default="both")
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="dense vs sparse decode kernel")
    _bench_flags(p, (32, 64, 128, 256), (1024, 2048, 4096, 8192))
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--no-control", action="store_true", help="skip the full-metadata rows")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sparsity-trace", help="per-token sparsity during generation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--lo", type=int, default=768)
    p.add_argument("--hi", type=int, default=1024)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_sparsity_trace)

    p = sub.add_parser("breakdown", help="decoder step time split by component")
    p.add_argument("--seq-lens", type=_int_list, default=[512, 1024, 2048])
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--reps", type=int, default=31)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_breakdown)

    p = sub.add_parser("sweep", help="pick the kernel block size by timing")
    _bench_flags(p, (256,), (2048,))
    p.add_argument("--candidates", type=_int_list, default=[16, 32, 64, 128, 256])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "sweep":
        if len(args.sparsity_block_size) != 1:
            log("error: sweep takes a single --sparsity-block-size")
            return 2
        args.sparsity_block_size = args.sparsity_block_size[0]
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
