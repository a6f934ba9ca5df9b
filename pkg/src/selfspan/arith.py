"""Random arithmetic expressions and annotated step-by-step solutions.

An expression is solved by repeatedly evaluating the leftmost ready
operation (both operands literal). Every finished sub-expression gets an
anchor; the line that starts a new sub-expression references the task
anchor ``0`` plus the anchors of all results not yet consumed by a later
step. Multiplications and divisions whose operands both have two or more
significant digits are expanded by place value over one line, then
summarised on a ``So ...`` line that references only the expansion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .protocol import (
    PREV,
    AnchorTable,
    SpanRequest,
    Vocab,
    format_refs,
    line_ranges,
    parse_refs,
    partition_context,
    referenced_positions,
)

OPS = ("+", "-", "*", "/")


class ArithError(ValueError):
    pass


@dataclass(frozen=True)
class Literal:
    value: int


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "ExprNode"
    right: "ExprNode"


ExprNode = Union[Literal, BinOp]


def apply_op(op: str, a: int, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0:
            raise ZeroDivisionError("integer division by zero")
        return a // b
    raise ArithError(f"unknown operator {op!r}")


def evaluate(node: ExprNode) -> int:
    if isinstance(node, Literal):
        return node.value
    return apply_op(node.op, evaluate(node.left), evaluate(node.right))


def depth(node: ExprNode) -> int:
    if isinstance(node, Literal):
        return 0
    return 1 + max(depth(node.left), depth(node.right))


def literals(node: ExprNode) -> list[int]:
    if isinstance(node, Literal):
        return [node.value]
    return literals(node.left) + literals(node.right)


def render(node: ExprNode) -> str:
    """Infix text; every compound operand is parenthesised."""
    if isinstance(node, Literal):
        return str(node.value)

    def side(child):
        return f"({render(child)})" if isinstance(child, BinOp) else render(child)

    return f"{side(node.left)} {node.op} {side(node.right)}"


def parse_expression(text: str) -> ExprNode:
    """Inverse of :func:`render` (also accepts standard precedence)."""
    toks = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else None

    def take():
        nonlocal pos
        pos += 1
        return toks[pos - 1]

    def atom():
        t = take()
        if t == "(":
            node = additive()
            if take() != ")":
                raise ArithError("unbalanced parentheses")
            return node
        if not t.isdigit():
            raise ArithError(f"unexpected token {t!r}")
        return Literal(int(t))

    def term():
        node = atom()
        while peek() in ("*", "/"):
            node = BinOp(take(), node, atom())
        return node

    def additive():
        node = term()
        while peek() in ("+", "-"):
            node = BinOp(take(), node, term())
        return node

    node = additive()
    if pos != len(toks):
        raise ArithError(f"trailing tokens in {text!r}")
    return node


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GenConfig:
    depth_mean: float = 5.0
    depth_std: float = 2.0
    digits_mean: float = 5.0
    digits_std: float = 2.0
    max_digits: int = 10
    max_depth: int = 10
    seed: int = 0


def _clamped_normal(rng, mean, std, hi) -> int:
    return int(min(max(round(rng.normal(mean, std)), 1), hi))


def _random_literal(rng, ndigits: int) -> int:
    if ndigits == 1:
        return int(rng.integers(0, 10))
    return int(rng.integers(10 ** (ndigits - 1), 10**ndigits))


def gen_expression(cfg: GenConfig) -> ExprNode:
    """Random expression tree whose depth equals a clamped Gaussian draw.

    One child of every operator carries the remaining depth; the other
    gets a uniform depth below it. Every number appearing anywhere in the
    solution (literals and intermediate results) stays within
    ``cfg.max_digits`` digits: operators that would overflow are redrawn.
    Subtraction operands are ordered so results are never negative, and
    zero divisors are resampled.
    """
    rng = np.random.default_rng(cfg.seed)
    target = _clamped_normal(rng, cfg.depth_mean, cfg.depth_std, cfg.max_depth)
    limit = 10**cfg.max_digits

    def literal():
        nd = _clamped_normal(rng, cfg.digits_mean, cfg.digits_std, cfg.max_digits)
        v = _random_literal(rng, nd)
        return Literal(v), v

    def build(d):
        if d == 0:
            return literal()
        other = int(rng.integers(0, d))
        right_depth = other if rng.random() < 0.5 else d - 1
        left_depth = d - 1 if right_depth == other else other
        (left, lv), (right, rv) = build(left_depth), build(right_depth)
        for _ in range(8):
            if rv != 0:
                break
            right, rv = build(right_depth)
        for op in rng.permutation(OPS):
            a, b, l, r = lv, rv, left, right
            if op == "-" and a < b:
                a, b, l, r = b, a, r, l
            if op == "/" and b == 0:
                continue
            v = apply_op(op, a, b)
            if v < limit:
                return BinOp(str(op), l, r), v
        # rv == 0 after resampling and + would overflow: subtraction always fits
        a, b, l, r = (lv, rv, left, right) if lv >= rv else (rv, lv, right, left)
        return BinOp("-", l, r), a - b

    node, _ = build(target)
    return node


# ---------------------------------------------------------------------------
# traces


@dataclass
class TraceLine:
    refs: tuple
    text: str
    anchor: int | None = None
    kind: str = "single"
    dependency_ranges: list = field(default_factory=list)

    def render(self) -> str:
        s = f"{format_refs(self.refs)} {self.text}"
        if self.anchor is not None:
            s += f" [{self.anchor}]"
        return s


@dataclass
class EvaluationTrace:
    """Prompt (always anchored ``0``) plus annotated solution lines."""

    expression: ExprNode
    prompt: str
    lines: list
    answer: int

    def text(self) -> str:
        return "\n".join([f"{self.prompt} [0]"] + [ln.render() for ln in self.lines])

    def output_text(self) -> str:
        return "\n".join(ln.render() for ln in self.lines)

    def tokens(self, vocab: Vocab) -> list[int]:
        return vocab.tokenize(self.text())

    def prompt_length(self, vocab: Vocab) -> int:
        return len(vocab.tokenize(f"{self.prompt} [0]"))

    def output_length(self, vocab: Vocab) -> int:
        return len(self.tokens(vocab)) - self.prompt_length(vocab)

    def to_record(self) -> dict:
        return {
            "expression": self.prompt,
            "answer": str(self.answer),
            "lines": [
                {"refs": [_ref_to_json(r) for r in ln.refs], "text": ln.text, "anchor": ln.anchor}
                for ln in self.lines
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> EvaluationTrace:
        lines = [
            TraceLine(tuple(_ref_from_json(r) for r in ln["refs"]), ln["text"], ln["anchor"],
                      kind=_kind_of(ln["text"], ln["anchor"]))
            for ln in rec["lines"]
        ]
        trace = cls(parse_expression(rec["expression"]), rec["expression"], lines, int(rec["answer"]))
        _attach_dependencies(trace)
        return trace


def _kind_of(text: str, anchor) -> str:
    if text.startswith("So "):
        return "summary"
    if ":" in text or text.count("=") > 1:
        return "expand"
    if anchor is None:
        return "final"
    return "single"


def _ref_to_json(r):
    if r is PREV:
        return "prev"
    if isinstance(r, tuple):
        return [r[0], r[1]]
    return r


def _ref_from_json(r):
    if r == "prev":
        return PREV
    if isinstance(r, list):
        return (r[0], r[1])
    return int(r)


def significant_digits(v: int) -> int:
    s = str(abs(v)).rstrip("0")
    return len(s) if s else 1


def needs_expansion(op: str, a: int, b: int) -> bool:
    return op in ("*", "/") and significant_digits(a) >= 2 and significant_digits(b) >= 2


def place_parts(v: int) -> list[int]:
    """``5076 -> [5000, 70, 6]``: non-zero digits times their place value."""
    s = str(v)
    parts = [int(ch) * 10 ** (len(s) - 1 - i) for i, ch in enumerate(s) if ch != "0"]
    return parts or [0]


def expand_multiplication(a: int, b: int) -> str:
    """``a * b`` rewritten so each product has one multi-digit factor."""
    if significant_digits(b) > significant_digits(a):
        parts = place_parts(a)
        split = f"({' + '.join(map(str, parts))}) * {b}"
        terms = [p * b for p in parts]
    else:
        parts = place_parts(b)
        split = f"{a} * ({' + '.join(map(str, parts))})"
        terms = [a * p for p in parts]
    return f"{a} * {b}={split}={' + '.join(map(str, terms))}={a * b}"


def expand_division(a: int, b: int) -> str:
    """Long division by repeated subtraction of place-value multiples.

    ``8880 / 37: 8880 - 37 * 200=1480, 1480 - 37 * 40=0, 200 + 40=240``
    """
    steps = []
    quotients: list[int] = []
    rest = a
    while rest >= b:
        q = rest // b
        part = int(str(q)[0]) * 10 ** (len(str(q)) - 1)
        quotients.append(part)
        steps.append(f"{rest} - {b} * {part}={rest - part * b}")
        rest -= part * b
    if len(quotients) > 1:
        steps.append(f"{' + '.join(map(str, quotients))}={a // b}")
    elif not quotients:
        steps.append(f"{a} < {b}")
    return f"{a} / {b}: " + ", ".join(steps)


def _ready_leftmost(node: ExprNode, path=()):
    """Path to the leftmost operation whose operands are both literals."""
    if isinstance(node, Literal):
        return None
    found = _ready_leftmost(node.left, path + ("left",))
    if found is not None:
        return found
    found = _ready_leftmost(node.right, path + ("right",))
    if found is not None:
        return found
    if isinstance(node.left, Literal) and isinstance(node.right, Literal):
        return path
    return None


def _get(node, path):
    for p in path:
        node = getattr(node, p)
    return node


def _replace(node, path, new):
    if not path:
        return new
    head, rest = path[0], path[1:]
    if head == "left":
        return BinOp(node.op, _replace(node.left, rest, new), node.right)
    return BinOp(node.op, node.left, _replace(node.right, rest, new))


@dataclass(frozen=True)
class _Result(Literal):
    anchor: int = -1


def solve_with_trace(expr: ExprNode) -> EvaluationTrace:
    """Evaluate ``expr`` step by step with anchor/reference annotations."""
    prompt = render(expr)
    lines: list[TraceLine] = []
    live: list[int] = []
    prev_anchor: int | None = 0
    next_anchor = 1
    tree = expr

    def opening_refs():
        want = [0] + sorted(live)
        # a reference set that is exactly the previous line is written [-1]
        if want == [prev_anchor]:
            return (PREV,)
        return tuple(want)

    while True:
        if isinstance(tree, Literal):
            lines.append(TraceLine(opening_refs(), str(tree.value), None, "final"))
            break
        path = _ready_leftmost(tree)
        node = _get(tree, path)
        a, b = node.left.value, node.right.value
        value = apply_op(node.op, a, b)
        final = not path
        refs = opening_refs()
        if needs_expansion(node.op, a, b):
            body = expand_multiplication(a, b) if node.op == "*" else expand_division(a, b)
            lines.append(TraceLine(refs, body, None, "expand"))
            if final:
                lines.append(TraceLine((PREV,), str(value), None, "final"))
                break
            anchor = next_anchor
            lines.append(TraceLine((PREV,), f"So {a} {node.op} {b}={value}", anchor, "summary"))
        elif final:
            lines.append(TraceLine(refs, str(value), None, "final"))
            break
        else:
            anchor = next_anchor
            lines.append(TraceLine(refs, f"{a} {node.op} {b}={value}", anchor, "single"))
        next_anchor += 1
        for child in (node.left, node.right):
            if isinstance(child, _Result):
                live.remove(child.anchor)
        live.append(anchor)
        prev_anchor = anchor
        tree = _replace(tree, path, _Result(value, anchor))

    trace = EvaluationTrace(expr, prompt, lines, evaluate(expr))
    _attach_dependencies(trace)
    return trace


_LAYOUT_VOCAB = Vocab(max_anchor=1024)


def _attach_dependencies(trace: EvaluationTrace) -> None:
    """Fill each line's ground-truth dependency ranges from its references."""
    toks = trace.tokens(_LAYOUT_VOCAB)
    lines = line_ranges(toks, _LAYOUT_VOCAB)
    table = partition_context(toks, _LAYOUT_VOCAB)
    for i, ln in enumerate(trace.lines, start=1):
        ranges = []
        for r in ln.refs:
            if r is PREV:
                ranges.append(lines[i - 1])
            elif isinstance(r, tuple):
                ranges.extend(table[k] for k in range(r[0], r[1] + 1))
            else:
                ranges.append(table[r])
        ln.dependency_ranges = ranges


def check_answer(output_text: str, truth: int) -> bool:
    """Split on whitespace, parse the last term as an integer, compare."""
    terms = output_text.split()
    if not terms:
        return False
    try:
        return int(terms[-1]) == int(truth)
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# oracle span schedule

SPAN_SELECT = "span_select"
CONTENT = "content"
ANCHOR_EMIT = "anchor_emit"


@dataclass(frozen=True)
class Step:
    """Plan for generating the token at ``position``.

    ``selected`` is ``None`` for full attention, otherwise the sorted token
    indices (all ``< position``) the step may attend to.
    """

    position: int
    phase: str
    selected: np.ndarray | None


@dataclass
class Schedule:
    prompt: list
    target: list
    steps: list

    def __len__(self) -> int:
        return len(self.steps)


def oracle_schedule(trace: EvaluationTrace, vocab: Vocab) -> Schedule:
    """Replay the trace's own references as a per-token attention plan.

    Newline and reference tokens are span-selection steps and anchors are
    anchor-emission steps; both see the full context. Every other token is a
    content step restricted to its line's references plus the line so far.
    """
    toks = trace.tokens(vocab)
    lines = line_ranges(toks, vocab)
    table = partition_context(toks, vocab)
    l = trace.prompt_length(vocab)
    steps = []
    for li in range(1, len(lines)):
        start, end = lines[li]
        base = referenced_positions(trace.lines[li - 1].refs, table, lines, li)
        for p in range(start, end + 1):
            tok = toks[p]
            if tok == vocab.newline_id or vocab.is_ref(tok):
                steps.append(Step(p, SPAN_SELECT, None))
            elif vocab.is_anchor(tok):
                steps.append(Step(p, ANCHOR_EMIT, None))
            else:
                own = np.arange(start, p, dtype=np.int64)
                steps.append(Step(p, CONTENT, np.union1d(base, own)))
    return Schedule(toks[:l], toks[l:], steps)


def full_schedule(prompt_len: int, n_tokens: int) -> list:
    return [Step(prompt_len + t, CONTENT, None) for t in range(n_tokens)]
