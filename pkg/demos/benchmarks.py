"""Small versions of the kernel benchmark, runtime breakdown and sweep.

The CLI runs the full sizes; this script keeps them short enough to read
the output as it scrolls past. Run with ``python3 demos/benchmarks.py``.
"""
from selfspan.bench import bench_kernel, block_size_sweep, speedup_by_sbs
from selfspan.engine import DecoderWeights, ModelConfig, runtime_breakdown
from selfspan.protocol import Vocab

rows = bench_kernel(n_list=(1024, 4096), reps=9, warmup=2)
print(f"{'n':>6} {'sparsity':>8} {'sbs':>5} {'dense ms':>9} {'sparse ms':>9} {'speedup':>7}")
for r in rows:
    print(f"{r.n:>6} {r.sparsity:>8.2f} {r.sbs:>5} {r.dense_ms:>9.3f} {r.sparse_ms:>9.3f} {r.speedup:>7.2f}")

# larger sparsity blocks keep the kernel on fewer, fuller blocks
for sbs, g in sorted(speedup_by_sbs(rows).items()):
    print(f"sbs {sbs:>3}: geo-mean speedup {g:.2f}x")

w = DecoderWeights.init(ModelConfig(vocab_size=len(Vocab())))
print("\nper-step runtime shares")
for n in (512, 1024, 2048):
    b = runtime_breakdown(w, n, reps=9)
    s = b.shares()
    print(f"  {n:>5}: attention {s['attention']:.2f}  ffn {s['ffn']:.2f}  other {s['other']:.2f}")

res = block_size_sweep([2048], 0.5, [16, 64, 256], sbs=256, reps=5, warmup=1)
print("\nbest kernel block size:", res.best)
