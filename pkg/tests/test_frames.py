"""Frame rendering and strict/lenient parsing."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from nextquery.frames import FrameParse, frame_output, parse_frame


def test_render_with_memory():
    out = frame_output("state", ["a", "b"])
    assert out == "<memory>state</memory>\n<prediction 1>a</prediction 1>\n<prediction 2>b</prediction 2>"


def test_render_without_memory():
    assert frame_output(None, ["only"]) == "<prediction 1>only</prediction 1>"


def test_strict_parse_accepts_exact_frame():
    parsed = parse_frame(frame_output("m", ["x", "y", "z"]), n=3)
    assert parsed == FrameParse(memory="m", candidates=("x", "y", "z"), ok=True)


def test_strict_parse_without_memory_requirement():
    parsed = parse_frame(frame_output(None, ["x"]), n=1, require_memory=False)
    assert parsed.ok
    assert parsed.memory is None
    assert parsed.candidates == ("x",)


def test_missing_memory_fails_strict_but_recovers_candidates():
    parsed = parse_frame(frame_output(None, ["x", "y"]), n=2, require_memory=True)
    assert not parsed.ok
    assert parsed.memory is None
    assert parsed.candidates == ("x", "y")


def test_stray_memory_fails_strict_when_not_required():
    # a memory section counts as unexpected text when the interface has none
    parsed = parse_frame(frame_output("m", ["x"]), n=1, require_memory=False)
    assert not parsed.ok
    assert parsed.memory == "m"
    assert parsed.candidates == ("x",)


def test_wrong_candidate_count_fails_strict():
    parsed = parse_frame(frame_output("m", ["x", "y"]), n=3)
    assert not parsed.ok
    assert parsed.candidates == ("x", "y")


def test_out_of_order_numbering_fails_strict():
    raw = "<memory>m</memory>\n<prediction 2>b</prediction 2>\n<prediction 1>a</prediction 1>"
    parsed = parse_frame(raw, n=2)
    assert not parsed.ok
    # lenient extraction still pairs each tag with its own body
    assert set(parsed.candidates) == {"a", "b"}


def test_trailing_garbage_fails_strict():
    parsed = parse_frame(frame_output("m", ["x"]) + "\nSure, here you go!", n=1)
    assert not parsed.ok
    assert parsed.memory == "m"
    assert parsed.candidates == ("x",)


def test_leading_chatter_fails_strict():
    parsed = parse_frame("Here is my answer:\n" + frame_output("m", ["x"]), n=1)
    assert not parsed.ok
    assert parsed.candidates == ("x",)


def test_unclosed_memory_recovered_up_to_first_prediction():
    raw = "<memory>dangling state\n<prediction 1>q</prediction 1>"
    parsed = parse_frame(raw, n=1)
    assert not parsed.ok
    assert parsed.memory == "dangling state"
    assert parsed.candidates == ("q",)


def test_mismatched_prediction_tags_are_dropped():
    raw = "<memory>m</memory>\n<prediction 1>good</prediction 1>\n<prediction 2>bad</prediction 3>"
    parsed = parse_frame(raw, n=2)
    assert not parsed.ok
    assert parsed.candidates == ("good",)


def test_empty_reply_parses_to_nothing():
    parsed = parse_frame("", n=3)
    assert not parsed.ok
    assert parsed.memory is None
    assert parsed.candidates == ()


def test_whitespace_around_frame_is_tolerated():
    parsed = parse_frame("  \n" + frame_output("m", ["x"]) + "\n  ", n=1)
    assert parsed.ok


def test_multiline_bodies_survive():
    parsed = parse_frame(frame_output("line1\nline2", ["a\nb"]), n=1)
    assert parsed.ok
    assert parsed.memory == "line1\nline2"
    assert parsed.candidates == ("a\nb",)


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        parse_frame("anything", n=0)


_body = st.text(
    alphabet=st.characters(blacklist_characters="<>", blacklist_categories=("Cs",)),
    min_size=1,
    max_size=40,
).map(str.strip).filter(bool)


@given(memory=_body, candidates=st.lists(_body, min_size=1, max_size=5))
def test_round_trip_is_strict_ok(memory, candidates):
    parsed = parse_frame(frame_output(memory, candidates), n=len(candidates))
    assert parsed.ok
    assert parsed.memory == memory
    assert list(parsed.candidates) == candidates


@given(candidates=st.lists(_body, min_size=1, max_size=5))
def test_round_trip_without_memory(candidates):
    parsed = parse_frame(frame_output(None, candidates), n=len(candidates), require_memory=False)
    assert parsed.ok
    assert list(parsed.candidates) == candidates


@given(raw=st.text(max_size=200), n=st.integers(min_value=1, max_value=4))
def test_parse_never_raises_on_arbitrary_text(raw, n):
    parsed = parse_frame(raw, n=n)
    assert isinstance(parsed, FrameParse)
    assert isinstance(parsed.candidates, tuple)
