"""Anchor/reference grammar and the token alphabet it lives in.

A trace is a sequence of lines. Line 0 is the prompt; every later line
starts with a newline token followed by its reference tokens. A line that
names itself for later use ends with a single ``ANCHOR(k)`` token, so an
anchor group runs from the line's first token (its leading newline) up to and
including the anchor. References are single tokens too: ``REF(k)`` selects
anchor group ``k``, ``REF_PREV`` selects the whole previous line, and
``REF_RANGE(a, b)`` selects anchors ``a..b`` inclusive.

Text form::

    (42 * 56) + (5 * 32) [0]
    [-1] 42 * 56=42 * (50 + 6)=2100 + 252=2352
    [-1] So 42 * 56=2352 [1]
    [0,1] 5 * 32=160 [2]
    [0,1,2] 2512

A bracket group at the start of a line is a reference list; a bracket group
anywhere else is an anchor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

DIGITS = tuple("0123456789")
SYMBOLS = ("+", "-", "*", "/", "(", ")", "=", " ", "\n", ":", ",", "<")
WORDS = ("So",)
NEWLINE = "\n"

DEFAULT_MAX_ANCHOR = 63


class ProtocolError(ValueError):
    pass


class DuplicateAnchor(ProtocolError):
    pass


class MisplacedAnchor(ProtocolError):
    pass


class UnknownAnchor(ProtocolError):
    pass


class NoPreviousLine(ProtocolError):
    pass


class TokenizeError(ProtocolError):
    pass


class _Prev:
    """Reference to the previous line; use the ``PREV`` singleton."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "PREV"

    def __reduce__(self):
        return (_Prev, ())


PREV = _Prev()

Ref = Union[int, _Prev, tuple]


class Vocab:
    """Closed token alphabet with dedicated anchor and reference tokens.

    Range references are only materialised when ``range_refs`` is set; the
    arithmetic task never emits them and they would otherwise dominate the
    vocabulary size.
    """

    def __init__(self, max_anchor: int = DEFAULT_MAX_ANCHOR, range_refs: bool = False):
        self.max_anchor = max_anchor
        self.range_refs = range_refs
        self.itos: list = list(DIGITS + SYMBOLS + WORDS)
        self.anchor_base = len(self.itos)
        self.itos += [("anchor", k) for k in range(max_anchor + 1)]
        self.ref_base = len(self.itos)
        self.itos += [("ref", k) for k in range(max_anchor + 1)]
        self.prev_id = len(self.itos)
        self.itos.append(("ref", PREV))
        self._range_ids: dict[tuple[int, int], int] = {}
        if range_refs:
            for a in range(max_anchor + 1):
                for b in range(a + 1, max_anchor + 1):
                    self._range_ids[(a, b)] = len(self.itos)
                    self.itos.append(("ref", (a, b)))
        self.stoi = {s: i for i, s in enumerate(self.itos) if isinstance(s, str)}
        self.newline_id = self.stoi[NEWLINE]

    def __len__(self) -> int:
        return len(self.itos)

    # token classification --------------------------------------------------

    def anchor(self, k: int) -> int:
        if not 0 <= k <= self.max_anchor:
            raise TokenizeError(f"anchor id {k} outside vocabulary (max {self.max_anchor})")
        return self.anchor_base + k

    def ref(self, r: Ref) -> int:
        if r is PREV:
            return self.prev_id
        if isinstance(r, tuple):
            try:
                return self._range_ids[(int(r[0]), int(r[1]))]
            except KeyError:
                raise TokenizeError(f"range reference {r} not in vocabulary") from None
        if not 0 <= r <= self.max_anchor:
            raise TokenizeError(f"reference id {r} outside vocabulary")
        return self.ref_base + r

    def is_anchor(self, tok: int) -> bool:
        return self.anchor_base <= tok < self.ref_base

    def is_ref(self, tok: int) -> bool:
        return tok >= self.ref_base

    def anchor_id(self, tok: int) -> int:
        return tok - self.anchor_base

    def ref_value(self, tok: int) -> Ref:
        return self.itos[tok][1]

    # text <-> tokens -------------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        out: list[int] = []
        i = 0
        line_start = True
        while i < len(text):
            ch = text[i]
            if ch == "[":
                j = text.find("]", i)
                if j < 0:
                    raise TokenizeError(f"unclosed bracket at offset {i}")
                body = text[i + 1 : j]
                if line_start:
                    out.extend(self.ref(r) for r in parse_refs(body))
                else:
                    try:
                        out.append(self.anchor(int(body)))
                    except ValueError:
                        raise TokenizeError(f"bad anchor '[{body}]'") from None
                i = j + 1
                line_start = False
                continue
            if text.startswith("So", i):
                out.append(self.stoi["So"])
                i += 2
            elif ch in self.stoi:
                out.append(self.stoi[ch])
                i += 1
            else:
                raise TokenizeError(f"character {ch!r} at offset {i} is not in the vocabulary")
            line_start = ch == NEWLINE
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        parts: list[str] = []
        pending: list[Ref] = []
        for tok in ids:
            tok = int(tok)
            if self.is_ref(tok):
                pending.append(self.ref_value(tok))
                continue
            if pending:
                parts.append(format_refs(pending))
                pending = []
            if self.is_anchor(tok):
                parts.append(f"[{self.anchor_id(tok)}]")
            else:
                parts.append(self.itos[tok])
        if pending:
            parts.append(format_refs(pending))
        return "".join(parts)


def parse_refs(body: str) -> list[Ref]:
    refs: list[Ref] = []
    for item in body.split(","):
        item = item.strip()
        if item == "-1":
            refs.append(PREV)
        elif "-" in item[1:]:
            a, b = item.split("-", 1)
            refs.append((int(a), int(b)))
        else:
            refs.append(int(item))
    return refs


def format_refs(refs: Iterable[Ref]) -> str:
    items = []
    for r in refs:
        if r is PREV:
            items.append("-1")
        elif isinstance(r, tuple):
            items.append(f"{r[0]}-{r[1]}")
        else:
            items.append(str(r))
    return "[" + ",".join(items) + "]"


# ---------------------------------------------------------------------------
# context partitioning


def line_ranges(tokens: Sequence[int], vocab: Vocab) -> list[tuple[int, int]]:
    """Inclusive ``(start, end)`` token range of every line.

    The newline separating two lines belongs to the line it opens.
    """
    ranges = []
    start = 0
    for i, tok in enumerate(tokens):
        if tok == vocab.newline_id and i > 0:
            ranges.append((start, i - 1))
            start = i
    if len(tokens):
        ranges.append((start, len(tokens) - 1))
    return ranges


@dataclass(frozen=True)
class AnchorTable:
    """Anchor id -> inclusive token range of the group it names."""

    ranges: dict = field(default_factory=dict)

    def __getitem__(self, k: int) -> tuple[int, int]:
        try:
            return self.ranges[k]
        except KeyError:
            raise UnknownAnchor(f"anchor {k} is not defined") from None

    def __contains__(self, k) -> bool:
        return k in self.ranges

    def __len__(self) -> int:
        return len(self.ranges)


def partition_context(tokens: Sequence[int], vocab: Vocab, rule: str = "line") -> AnchorTable:
    """Group the context into lines and record the anchor closing each one."""
    if rule != "line":
        raise ProtocolError(f"unsupported partition rule {rule!r}")
    table: dict[int, tuple[int, int]] = {}
    for start, end in line_ranges(tokens, vocab):
        for i in range(start, end + 1):
            if not vocab.is_anchor(tokens[i]):
                continue
            k = vocab.anchor_id(tokens[i])
            if i != end:
                raise MisplacedAnchor(f"anchor {k} at token {i} does not end its line")
            if k in table:
                raise DuplicateAnchor(f"anchor {k} defined twice")
            table[k] = (start, end)
    return AnchorTable(table)


@dataclass(frozen=True)
class SpanRequest:
    refs: tuple
    current_line_start: int


def _line_of(position: int, lines: Sequence[tuple[int, int]]) -> int:
    for i, (s, e) in enumerate(lines):
        if s <= position <= e:
            return i
    raise ProtocolError(f"token {position} lies outside every line")


def referenced_positions(refs: Sequence[Ref], table: AnchorTable,
                         lines: Sequence[tuple[int, int]], current_line: int) -> np.ndarray:
    """Token indices selected by ``refs`` alone, without the current line."""
    chunks = []
    for r in refs:
        if r is PREV:
            if current_line == 0:
                raise NoPreviousLine("previous-line reference on the first line")
            s, e = lines[current_line - 1]
            chunks.append(np.arange(s, e + 1))
        elif isinstance(r, tuple):
            for k in range(r[0], r[1] + 1):
                s, e = table[k]
                chunks.append(np.arange(s, e + 1))
        else:
            s, e = table[r]
            chunks.append(np.arange(s, e + 1))
    if not chunks:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(chunks).astype(np.int64))


def resolve_references(req: SpanRequest, table: AnchorTable,
                       lines: Sequence[tuple[int, int]], position: int | None = None) -> np.ndarray:
    """Sorted token indices a content step may attend to.

    Union of the referenced groups and the in-progress line from
    ``current_line_start`` up to ``position`` (exclusive). With ``position``
    omitted the whole current line is included.
    """
    cur = _line_of(req.current_line_start, lines)
    base = referenced_positions(req.refs, table, lines, cur)
    stop = lines[cur][1] + 1 if position is None else position
    own = np.arange(req.current_line_start, stop, dtype=np.int64)
    sel = np.union1d(base, own)
    if sel.size == 0:
        raise ProtocolError("resolved span is empty")
    return sel


def sparsity_of(selected, position: int) -> float:
    """Fraction of the ``position`` context tokens left out of ``selected``."""
    if position <= 0:
        raise ProtocolError("position must be positive")
    return (position - len(selected)) / position


def protocol_overhead(tokens: Sequence[int], vocab: Vocab) -> float:
    if len(tokens) == 0:
        return 0.0
    tok = np.asarray(tokens)
    extra = np.count_nonzero(tok >= vocab.anchor_base)
    return extra / len(tok)
