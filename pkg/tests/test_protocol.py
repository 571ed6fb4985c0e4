from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gen import well_formed_traces
from toolverify.errors import RenderError, StrictFormatError
from toolverify.protocol import (
    INTERLEAVE_ORDER,
    MISSING_ANSWER,
    NESTED_TAG,
    ORPHAN_INFORMATION,
    UNCLOSED_TAG,
    Answer,
    Information,
    Kind,
    Search,
    Think,
    Trajectory,
    escape_tags,
    extract_judgment,
    parse,
    render,
    validate_format,
)

CASE_STUDY = Path(__file__).parent / "fixtures" / "case_study_judgment.txt"


def test_minimal_trace():
    t = parse("<think>ok</think><answer>1</answer>")
    assert [s.kind for s in t.segments] == [Kind.THINK, Kind.ANSWER]
    assert [s.text for s in t.segments] == ["ok", "1"]
    assert t.terminal
    assert validate_format(t).well_formed


def test_search_round_shape():
    t = parse("<think>a</think><search>q</search><information>d</information><answer>0</answer>")
    assert [s.kind for s in t.segments] == [Kind.THINK, Kind.SEARCH, Kind.INFORMATION, Kind.ANSWER]
    assert t.terminal


def test_missing_close_is_lenient():
    t = parse("<think>a<answer>1</answer>")
    v = validate_format(t)
    assert v.violations == (UNCLOSED_TAG,)
    assert not v.well_formed


def test_strict_mode_raises_with_offset():
    with pytest.raises(StrictFormatError) as exc:
        parse("<think>é<answer>1</answer>", strict=True)
    assert exc.value.violation == UNCLOSED_TAG
    # 'é' is two bytes, so the stray <answer> starts at byte 9
    assert exc.value.offset == len("<think>é".encode())


def test_nested_tag_flagged():
    v = validate_format(parse("<think>a<search>q</search>b</think><answer>1</answer>"))
    assert NESTED_TAG in v.violations


def test_orphan_information():
    v = validate_format(parse("<think>a</think><information>d</information><answer>1</answer>"))
    assert v.violations == (ORPHAN_INFORMATION,)


def test_missing_answer_and_non_terminal():
    v = validate_format(parse("<think>a</think><search>q</search><information>d</information>"))
    assert MISSING_ANSWER in v.violations
    assert not v.well_formed


def test_answer_before_think_is_order_violation():
    assert INTERLEAVE_ORDER in validate_format(parse("<answer>1</answer>")).violations


def test_stray_text_outside_tags():
    v = validate_format(parse("Sure! <think>a</think><answer>1</answer>"))
    assert v.violations == (INTERLEAVE_ORDER,)
    v = validate_format(parse("<think>a</think><answer>1</answer> done"))
    assert INTERLEAVE_ORDER in v.violations


def test_eleven_answers_still_well_formed():
    v = validate_format(parse("<think>x</think>" + "<answer>1</answer>" * 11))
    assert v.well_formed and v.answer_pair_count == 11


def test_render_canonical():
    assert render(Trajectory.from_segments([Think("x"), Answer("1")])) == "<think>x</think><answer>1</answer>"
    assert render(Trajectory.from_segments([Search("q")])) == "<search>q</search>"


def test_render_rejects_raw_tags_in_payload():
    with pytest.raises(RenderError):
        render(Trajectory.from_segments([Think("a <answer>1</answer>"), Answer("1")]))


def test_escape_makes_payload_renderable():
    payload = escape_tags("see <answer>1</answer>")
    t = Trajectory.from_segments([Think(payload), Answer("1")])
    assert parse(render(t)).segments[0].text == payload


def test_extract_judgment():
    assert extract_judgment(parse("<think>a</think><answer>0</answer>")) == 0
    assert extract_judgment(parse("<think>a</think><answer>1</answer><answer>0</answer>")) == 0
    assert extract_judgment(parse("<think>a</think><answer>maybe</answer>")) is None
    assert extract_judgment(parse("<think>a</think><answer> 1\n</answer>")) == 1
    assert extract_judgment(parse("<think>a</think>")) is None


def test_case_study_parses_into_documented_sequence():
    raw = CASE_STUDY.read_text(encoding="utf-8")
    t = parse(raw, strict=True)
    assert [s.kind for s in t.segments] == [Kind.THINK, Kind.SEARCH, Kind.INFORMATION, Kind.THINK, Kind.ANSWER]
    assert t.segments[1].text.strip() == "common side effects of cisplatin chemotherapy"
    assert validate_format(t).well_formed
    assert extract_judgment(t) == 0
    assert render(t) == raw


@settings(max_examples=300, deadline=None)
@given(well_formed_traces())
def test_round_trip_property(raw):
    t = parse(raw)
    assert validate_format(t).well_formed
    assert render(t) == raw
    assert parse(render(t)) == t


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(list("ab <>/\n") + ["<think>", "</think>", "<search>", "</search>", "<information>",
                                                     "</information>", "<answer>", "</answer>", "0", "1"]), max_size=30))
def test_parse_is_total_and_validate_idempotent(pieces):
    raw = "".join(pieces)
    t = parse(raw)
    v1, v2 = validate_format(t), validate_format(t)
    assert v1 == v2
    assert v1.well_formed == (not v1.violations)
    counts = t.tag_pair_counts()
    assert sum(counts.values()) == sum(1 for s in t.segments if s.closed)
    if extract_judgment(t) is not None:
        assert t.count(Kind.ANSWER) >= 1


@settings(max_examples=200, deadline=None)
@given(well_formed_traces())
def test_segment_order_matches_source(raw):
    t = parse(raw)
    positions = []
    cursor = 0
    for seg in t.segments:
        idx = raw.index(seg.kind.open_tag, cursor)
        positions.append(idx)
        cursor = idx + len(seg.kind.open_tag)
    assert positions == sorted(positions)


def test_information_helper_renders():
    t = Trajectory.from_segments([Think("a"), Search("q"), Information("d"), Answer("1")])
    assert validate_format(t).well_formed
