"""Conversation model, tokenizers, parsing, and synthesis."""

from __future__ import annotations

import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nextquery.conversation import (
    BytesTokenizer,
    Conversation,
    Turn,
    WhitespaceTokenizer,
    normalize_text,
    parse_conversations,
    split_context_target,
    synthesize_conversations,
    truncate_to_tokens,
)


def test_turn_rejects_empty_query():
    with pytest.raises(ValueError):
        Turn("", "a response")
    with pytest.raises(ValueError):
        Turn("   ", "a response")


def test_conversation_requires_target_and_turns():
    with pytest.raises(ValueError):
        Conversation(id="x", turns=(), target="next")
    with pytest.raises(ValueError):
        Conversation(id="x", turns=(Turn("q", "r"),), target="  ")


def test_empty_response_allowed_only_on_final_turn():
    Conversation(id="x", turns=(Turn("q1", "r1"), Turn("q2", "")), target="next")
    with pytest.raises(ValueError):
        Conversation(id="x", turns=(Turn("q1", ""), Turn("q2", "r2")), target="next")


def test_source_vocabulary_enforced():
    with pytest.raises(ValueError):
        Conversation(id="x", turns=(Turn("q", "r"),), target="next", source="scraped")


def test_split_context_target_takes_last_query():
    turns = [Turn("q1", "r1"), Turn("q2", "r2"), Turn("q3", "discarded response")]
    conv = split_context_target("s-1", turns, source="wild")
    assert conv.target == "q3"
    assert len(conv.turns) == 2
    assert conv.turns[-1].query == "q2"


def test_split_context_target_needs_two_turns():
    with pytest.raises(ValueError, match="insufficient context"):
        split_context_target("s-1", [Turn("only", "one")], source="wild")


def test_normalize_text_collapses_whitespace():
    assert normalize_text("  a\t b\n\nc  ") == "a b c"


def test_whitespace_tokenizer_counts_words():
    tok = WhitespaceTokenizer()
    assert tok.count("") == 0
    assert tok.count("   ") == 0
    assert tok.count("one two  three") == 3


def test_bytes_tokenizer_ceil_division():
    tok = BytesTokenizer()
    assert tok.count("") == 0
    assert tok.count("abcd") == 1
    assert tok.count("abcde") == 2


@given(st.text(max_size=80), st.text(max_size=80))
@settings(max_examples=60, deadline=None)
def test_tokenizers_monotone_under_concatenation(a, b):
    for tok in (WhitespaceTokenizer(), BytesTokenizer()):
        joined = tok.count(a + " " + b)
        assert joined >= tok.count(a)
        assert joined >= tok.count(b)


def test_truncate_to_exact_budget():
    tok = WhitespaceTokenizer()
    text = " ".join(f"w{i}" for i in range(900))
    cut = truncate_to_tokens(tok, text, 500)
    assert tok.count(cut) == 500
    assert text.startswith(cut)


def test_truncate_noop_when_under_budget():
    tok = WhitespaceTokenizer()
    assert truncate_to_tokens(tok, "a b c", 10) == "a b c"


@given(st.integers(1, 40), st.integers(1, 60))
@settings(max_examples=40, deadline=None)
def test_truncate_never_exceeds_budget(limit, n_words):
    tok = WhitespaceTokenizer()
    text = " ".join(f"tok{i}" for i in range(n_words))
    cut = truncate_to_tokens(tok, text, limit)
    assert tok.count(cut) <= limit
    assert text.startswith(cut)


def test_parse_conversations_reports_line_errors():
    lines = [
        json.dumps({"id": "ok-1", "turns": [{"query": "q1", "response": "r1"}], "target": "next"}),
        "{not json",
        json.dumps({"id": "missing", "turns": [{"query": "q", "response": "r"}]}),
        "",
    ]
    report = parse_conversations(io.StringIO("\n".join(lines)))
    assert [c.id for c in report.conversations] == ["ok-1"]
    assert len(report.errors) == 2
    assert report.errors[0].line == 2
    assert "malformed JSON" in report.errors[0].error
    assert report.errors[1].line == 3
    assert "target" in report.errors[1].error


def test_parse_conversations_allow_unsplit_derives_target():
    raw = json.dumps(
        {
            "id": "s-9",
            "turns": [
                {"query": "q1", "response": "r1"},
                {"query": "q2", "response": "r2"},
                {"query": "the real target", "response": ""},
            ],
            "source": "wild",
        }
    )
    report = parse_conversations(io.StringIO(raw), allow_unsplit=True)
    assert len(report.conversations) == 1
    conv = report.conversations[0]
    assert conv.target == "the real target"
    assert len(conv.turns) == 2


def test_json_round_trip(small_conv):
    line = small_conv.to_json_line()
    report = parse_conversations(io.StringIO(line))
    assert report.conversations[0] == small_conv
    assert not report.errors


def test_synthesize_exact_word_counts():
    convs = synthesize_conversations(n=3, turns=4, query_words=8, response_words=24, seed=5)
    assert len(convs) == 3
    for c, conv in enumerate(convs):
        assert conv.id == f"syn-5-{c}"
        assert len(conv.turns) == 4
        for t, turn in enumerate(conv.turns, start=1):
            assert len(turn.query.split()) == 8
            assert turn.query.startswith(f"c{c}t{t} ")
            assert len(turn.response.split()) == 24
        assert conv.target.startswith(f"c{c}target")


def test_synthesize_deterministic():
    a = synthesize_conversations(n=2, turns=3, seed=9)
    b = synthesize_conversations(n=2, turns=3, seed=9)
    assert a == b
    c = synthesize_conversations(n=2, turns=3, seed=10)
    assert a != c
