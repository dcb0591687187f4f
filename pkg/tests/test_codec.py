from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evosearch.codec import (
    DEFAULT_VOCAB, EncodingError, RolloutRecord, SpanKind, TrajectoryParseError, char_distance, encode, parse_text,
    parse_trajectory, policy_text, serialize_trajectory, trajectory_distance,
)

V = DEFAULT_VOCAB


def lev_oracle(a: str, b: str) -> int:
    # textbook full-table dynamic program
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def test_vocab_layout():
    assert V.size == 107
    assert V.id("\n") == 0
    assert V.id(" ") == 1
    assert V.id("<think>") == 96
    assert V.decode(encode("a<answer>b</answer>")) == "a<answer>b</answer>"


def test_encode_characters():
    assert encode("ab") == [V.id("a"), V.id("b")]


def test_encode_atomic_tags():
    assert encode("<search>ab</search>") == [V.id("<search>"), V.id("a"), V.id("b"), V.id("</search>")]


def test_encode_unknown_char():
    with pytest.raises(EncodingError) as err:
        encode("aβ")
    assert err.value.offset == 1
    assert err.value.char == "β"


def test_partial_tag_is_plain_text():
    assert encode("<sea") == [V.id(c) for c in "<sea"]


def test_parse_think_answer():
    tr = parse_text("<think>x</think><answer>y</answer>")
    assert [s.kind for s in tr.spans] == [SpanKind.THINK, SpanKind.ANSWER]
    # atomic tags make this 6 tokens; every one of them is policy-written
    assert len(tr.tokens) == 6
    assert tr.policy_positions == frozenset(range(len(tr.tokens)))
    assert tr.complete and tr.answer == "y"


def test_parse_information_excluded():
    text = "<search>q</search><information>d</information><answer>y</answer>"
    tr = parse_text(text)
    assert [s.kind for s in tr.spans] == [SpanKind.SEARCH, SpanKind.INFORMATION, SpanKind.ANSWER]
    d_pos = tr.tokens.index(V.id("d"))
    assert d_pos == 4
    assert d_pos not in tr.policy_positions
    # engine-written information tags are excluded too
    assert 3 not in tr.policy_positions and 5 not in tr.policy_positions
    assert tr.policy_positions == frozenset({0, 1, 2, 6, 7, 8})
    assert tr.n_srch == 1 and tr.n_info == 1


def test_parse_unterminated_answer():
    tr = parse_text("<answer>y")
    assert not tr.complete
    assert len(tr.spans) == 1
    span = tr.spans[0]
    assert (span.kind, span.text, span.start, span.end, span.closed) == (SpanKind.ANSWER, "y", 0, 2, False)
    assert tr.answer == "y"


@pytest.mark.parametrize("text, pos", [
    ("</answer>", 0),
    ("<think><search>", 1),
    ("<think>a</answer>", 2),
    ("x<answer>y</answer>", 0),
    ("<answer>y</answer><think>", 3),
    ("<information>d</information>", 0),
    ("<think>a</think><information>d</information>", 3),
])
def test_parse_errors(text, pos):
    with pytest.raises(TrajectoryParseError) as err:
        parse_text(text)
    assert err.value.position == pos


def test_parse_rejects_control_tokens():
    with pytest.raises(TrajectoryParseError):
        parse_trajectory([V.id("<answer>"), V.id("<pad>")])


def test_forcing_text_after_information():
    text = "<search>q</search><information>d</information>\nAnswer now.\n<answer>y</answer>"
    tr = parse_text(text)
    assert tr.forced_text == "\nAnswer now.\n"
    lo, hi = tr.forced_range
    assert not any(p in tr.policy_positions for p in range(lo, hi))
    assert serialize_trajectory(tr) == text
    assert policy_text(tr) == "<search>q</search><answer>y</answer>"


def test_serialize_examples():
    assert serialize_trajectory(parse_text("<think>x</think><answer>y</answer>")) == "<think>x</think><answer>y</answer>"
    assert serialize_trajectory(parse_text("<think></think><answer>y</answer>")) == "<think></think><answer>y</answer>"


@pytest.mark.parametrize("a, b, d", [("abc", "abc", 0), ("kitten", "sitting", 3), ("", "ab", 2), ("ab", "", 2)])
def test_char_distance_examples(a, b, d):
    assert char_distance(a, b) == d


def test_char_distance_matches_table_oracle():
    rng = np.random.default_rng(3)
    for _ in range(300):
        a = "".join(rng.choice(list("abc<>"), size=rng.integers(0, 14)))
        b = "".join(rng.choice(list("abc<>"), size=rng.integers(0, 14)))
        assert char_distance(a, b) == lev_oracle(a, b)


def test_trajectory_distance_modes():
    a = parse_text("<search>q</search><information>aaaa</information><answer>y</answer>")
    b = parse_text("<search>q</search><information>bbbb</information><answer>y</answer>")
    assert trajectory_distance(a, b, "full") == 4
    assert trajectory_distance(a, b, "policy") == 0
    with pytest.raises(ValueError):
        trajectory_distance(a, b, "tokens")


def test_record_json_roundtrip():
    tr = parse_text("<search>q</search><information>d</information><answer>y</answer>")
    rec = RolloutRecord.build("q00001", tr, 1)
    line = rec.to_json()
    assert set(json.loads(line)) == {"question_id", "trajectory_text", "reward", "n_srch", "length"}
    back = RolloutRecord.from_json(line)
    assert back == rec
    bad = json.loads(line)
    bad["n_srch"] = 3
    with pytest.raises(ValueError):
        RolloutRecord.from_json(json.dumps(bad))


# randomized valid trajectories -------------------------------------------

TEXT = st.text(alphabet="abcxyz 0123.?\n", max_size=8)


@st.composite
def trajectories(draw):
    parts = []
    n_steps = draw(st.integers(0, 4))
    for _ in range(n_steps):
        kind = draw(st.sampled_from(["think", "search"]))
        if kind == "think":
            parts.append(f"<think>{draw(TEXT)}</think>")
        else:
            parts.append(f"<search>{draw(TEXT)}</search>")
            if draw(st.booleans()):
                parts.append(f"<information>{draw(TEXT)}</information>")
                if draw(st.booleans()):
                    parts.append("\nforced\n")
                    parts.append(f"<answer>{draw(TEXT)}</answer>")
                    return "".join(parts)
    ending = draw(st.sampled_from(["answer", "open", "none"]))
    if ending == "answer":
        parts.append(f"<answer>{draw(TEXT)}</answer>")
    elif ending == "open":
        parts.append(f"<answer>{draw(TEXT)}")
    return "".join(parts)


@settings(max_examples=200, deadline=None)
@given(trajectories())
def test_roundtrip_property(text):
    tokens = encode(text)
    assert V.decode(tokens) == text
    tr = parse_trajectory(tokens)
    assert serialize_trajectory(tr) == text
    assert parse_text(serialize_trajectory(tr)) == tr


@settings(max_examples=200, deadline=None)
@given(trajectories())
def test_mask_invariants(text):
    tr = parse_text(text)
    info = set()
    for s in tr.spans:
        if s.kind is SpanKind.INFORMATION:
            info.update(range(s.start, s.end))
    assert not info & tr.policy_positions
    assert tr.distill_positions <= tr.policy_positions
    assert tr.n_srch == sum(1 for s in tr.spans if s.kind is SpanKind.SEARCH and s.closed)
    assert RolloutRecord.build("q", tr, 0).n_srch == tr.n_srch


@settings(max_examples=150, deadline=None)
@given(st.text("abc", max_size=10), st.text("abc", max_size=10), st.text("abc", max_size=10))
def test_char_distance_metric_axioms(a, b, c):
    dab = char_distance(a, b)
    assert dab == char_distance(b, a)
    assert (dab == 0) == (a == b)
    assert char_distance(a, c) <= dab + char_distance(b, c)
