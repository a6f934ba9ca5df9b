"""Generate expressions, solve them with anchors, and inspect the spans.

Run with ``python3 demos/annotated_traces.py``.
"""
import numpy as np

from selfspan import (
    GenConfig,
    Vocab,
    check_answer,
    gen_expression,
    oracle_schedule,
    partition_context,
    solve_with_trace,
)
from selfspan.arith import parse_expression
from selfspan.protocol import protocol_overhead

vocab = Vocab()

# the worked example: each finished group gets an anchor, and each new
# line names the anchors it depends on
trace = solve_with_trace(parse_expression("(42 * 56) + (5 * 32)"))
print(trace.text())
print()

toks = trace.tokens(vocab)
table = partition_context(toks, vocab)
for k in sorted(table.ranges):
    s, e = table[k]
    print(f"anchor {k}: tokens {s}..{e}  {vocab.detokenize(toks[s:e + 1])!r}")
print("answer", trace.answer, "checked:", check_answer(trace.output_text(), trace.answer))
print()

# a leftmost-innermost walk on a precedence example
print(solve_with_trace(parse_expression("10 + 42 * 3")).text())
print()

# random expressions: depth ~ N(5, 2), up to 10 digits per literal
for seed in range(3):
    t = solve_with_trace(gen_expression(GenConfig(seed=seed)))
    print(f"seed {seed}: {t.prompt} = {t.answer}  ({len(t.lines)} lines)")

# how much of the context does each generated token actually need?
t = solve_with_trace(gen_expression(GenConfig(seed=11)))
sched = oracle_schedule(t, vocab)
sp = np.array([0.0 if st.selected is None else 1 - len(st.selected) / st.position
               for st in sched.steps])
print(f"\nseed 11: {len(sched)} output tokens, mean sparsity {sp.mean():.3f}, "
      f"protocol overhead {protocol_overhead(t.tokens(vocab), vocab):.3f}")
for q, chunk in enumerate(np.array_split(sp, 4)):
    print(f"  quarter {q + 1}: {chunk.mean():.3f}")
