import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfspan.arith import parse_expression, solve_with_trace
from selfspan.protocol import (
    PREV,
    AnchorTable,
    DuplicateAnchor,
    MisplacedAnchor,
    NoPreviousLine,
    ProtocolError,
    SpanRequest,
    TokenizeError,
    UnknownAnchor,
    Vocab,
    format_refs,
    line_ranges,
    parse_refs,
    partition_context,
    protocol_overhead,
    referenced_positions,
    resolve_references,
    sparsity_of,
)

FIG5 = (
    "(42 * 56) + (5 * 32) [0]\n"
    "[-1] 42 * 56=42 * (50 + 6)=2100 + 252=2352\n"
    "[-1] So 42 * 56=2352 [1]\n"
    "[0,1] 5 * 32=160 [2]\n"
    "[0,1,2] 2512"
)


@pytest.fixture
def vocab():
    return Vocab()


def test_vocab_layout(vocab):
    assert len(vocab) == 23 + 64 + 64 + 1
    assert vocab.ref(PREV) == vocab.prev_id
    assert vocab.is_anchor(vocab.anchor(0)) and not vocab.is_ref(vocab.anchor(63))
    assert vocab.is_ref(vocab.ref(5)) and vocab.ref_value(vocab.ref(5)) == 5
    with pytest.raises(TokenizeError):
        vocab.anchor(64)
    with pytest.raises(TokenizeError):
        vocab.ref((1, 3))


def test_range_refs_optional():
    v = Vocab(max_anchor=10, range_refs=True)
    tok = v.tokenize("1 [0]\n[0-3] 2")
    assert v.ref_value(tok[-3]) == (0, 3)
    assert v.detokenize(tok) == "1 [0]\n[0-3] 2"


def test_fig5_roundtrip(vocab):
    toks = vocab.tokenize(FIG5)
    assert vocab.detokenize(toks) == FIG5
    assert sum(1 for t in toks if vocab.is_anchor(t)) == 3
    assert sum(1 for t in toks if vocab.is_ref(t)) == 7


def test_tokenize_errors(vocab):
    with pytest.raises(TokenizeError):
        vocab.tokenize("1 + x")
    with pytest.raises(TokenizeError):
        vocab.tokenize("1 [0")
    with pytest.raises(TokenizeError):
        vocab.tokenize("1 [a]")


def test_ref_text_forms():
    assert parse_refs("0,1,2") == [0, 1, 2]
    assert parse_refs("-1") == [PREV]
    assert parse_refs("3-7") == [(3, 7)]
    assert format_refs([PREV]) == "[-1]"
    assert format_refs([0, (2, 4)]) == "[0,2-4]"


def test_newline_opens_its_line(vocab):
    toks = vocab.tokenize("1 [0]\n[-1] 1")
    lines = line_ranges(toks, vocab)
    assert lines == [(0, 2), (3, len(toks) - 1)]
    assert toks[lines[1][0]] == vocab.newline_id


def test_partition_fig5(vocab):
    toks = vocab.tokenize(FIG5)
    table = partition_context(toks, vocab)
    lines = line_ranges(toks, vocab)
    # anchors 0, 1, 2 name the prompt line, line 3 and line 4 (1-based)
    assert table.ranges == {0: lines[0], 1: lines[2], 2: lines[3]}
    assert table.ranges == {0: (0, 21), 1: (62, 80), 2: (81, 96)}
    for k, (s, e) in table.ranges.items():
        assert toks[e] == vocab.anchor(k)
    spans = sorted(table.ranges.values())
    assert all(a[1] < b[0] for a, b in zip(spans, spans[1:]))


def test_partition_errors(vocab):
    assert len(partition_context(vocab.tokenize("1 + 2"), vocab)) == 0
    with pytest.raises(DuplicateAnchor):
        partition_context(vocab.tokenize("1 [0]\n[-1] 2 [0]"), vocab)
    toks = vocab.tokenize("1 [0]")
    with pytest.raises(MisplacedAnchor):
        partition_context([toks[-1]] + toks, vocab)
    with pytest.raises(ProtocolError):
        partition_context(toks, vocab, rule="sentence")


def test_resolve_fig5(vocab):
    toks = vocab.tokenize(FIG5)
    table = partition_context(toks, vocab)
    lines = line_ranges(toks, vocab)
    start = lines[4][0]
    sel = resolve_references(SpanRequest((0, 1, 2), start), table, lines)
    expect = set()
    for s, e in list(table.ranges.values()) + [lines[4]]:
        expect |= set(range(s, e + 1))
    assert set(sel) == expect
    # PREV on line 3 is the whole of line 2
    prev = referenced_positions([PREV], table, lines, 2)
    assert list(prev) == list(range(lines[1][0], lines[1][1] + 1))


def test_resolve_errors(vocab):
    toks = vocab.tokenize(FIG5)
    table = partition_context(toks, vocab)
    lines = line_ranges(toks, vocab)
    with pytest.raises(UnknownAnchor):
        resolve_references(SpanRequest((7,), lines[4][0]), table, lines)
    with pytest.raises(NoPreviousLine):
        resolve_references(SpanRequest((PREV,), 0), table, lines)
    with pytest.raises(UnknownAnchor):
        AnchorTable()[3]


def test_resolve_includes_current_line_prefix(vocab):
    toks = vocab.tokenize(FIG5)
    table = partition_context(toks, vocab)
    lines = line_ranges(toks, vocab)
    start = lines[3][0]
    sel = resolve_references(SpanRequest((0, 1), start), table, lines, position=start + 3)
    assert {start, start + 1, start + 2} <= set(sel)
    assert start + 3 not in sel


def test_sparsity_of():
    assert sparsity_of(range(8), 20) == 0.6
    assert sparsity_of(range(20), 20) == 0.0
    with pytest.raises(ProtocolError):
        sparsity_of([], 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.data())
def test_sparsity_range(position, data):
    k = data.draw(st.integers(1, position))
    s = sparsity_of(range(k), position)
    assert 0 <= s < 1
    assert (s == 0) == (k == position)


def test_overhead(vocab):
    assert protocol_overhead(vocab.tokenize("1 + 2"), vocab) == 0.0
    toks = vocab.tokenize(FIG5)
    # 3 anchors and 7 references over 106 tokens
    assert len(toks) == 106
    assert protocol_overhead(toks, vocab) == 10 / 106
    assert protocol_overhead(toks, vocab) < 0.15


def test_overhead_amortises(vocab):
    short = vocab.tokenize("1 [0]\n[-1] 12 + 34=46")
    long_ = vocab.tokenize("1 [0]\n[-1] 12 + 34=46 12 + 34=46 12 + 34=46 12 + 34=46 12 + 34=46")
    a, b = protocol_overhead(short, vocab), protocol_overhead(long_, vocab)
    assert b < a
    # two protocol tokens either way; ratio scales inversely with length
    assert round(a * len(short)) == round(b * len(long_)) == 2


def test_dataset_roundtrip(vocab):
    from selfspan.arith import GenConfig, gen_expression

    for seed in range(200):
        t = solve_with_trace(gen_expression(GenConfig(seed=seed)))
        text = t.text()
        try:
            toks = vocab.tokenize(text)
        except TokenizeError:
            continue
        assert vocab.detokenize(toks) == text


def test_fig5_trace_is_generated(vocab):
    t = solve_with_trace(parse_expression("(42 * 56) + (5 * 32)"))
    assert t.text() == FIG5
