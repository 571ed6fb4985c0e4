"""Tagged trajectory grammar emitted by the verifier.

A trajectory is a flat run of ``<think>``, ``<search>``, ``<information>`` and
``<answer>`` segments. Whitespace between segments is legal and is kept on the
segment that follows it (``Segment.prefix``) so that parsing and rendering
round-trip byte for byte.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import RenderError, StrictFormatError


class Kind(str, enum.Enum):
    THINK = "think"
    SEARCH = "search"
    INFORMATION = "information"
    ANSWER = "answer"

    @property
    def open_tag(self) -> str:
        return f"<{self.value}>"

    @property
    def close_tag(self) -> str:
        return f"</{self.value}>"


UNCLOSED_TAG = "UNCLOSED_TAG"
NESTED_TAG = "NESTED_TAG"
ORPHAN_INFORMATION = "ORPHAN_INFORMATION"
MISSING_ANSWER = "MISSING_ANSWER"
INTERLEAVE_ORDER = "INTERLEAVE_ORDER"

ALL_TAGS = tuple(t for k in Kind for t in (k.open_tag, k.close_tag))
STOP_SEQUENCES = (Kind.SEARCH.close_tag, Kind.ANSWER.close_tag)
MAX_ANSWER_PAIRS = 10

_TAG_RE = re.compile(r"<(/?)(think|search|information|answer)>")


@dataclass(frozen=True)
class Violation:
    code: str
    offset: int  # byte offset into the UTF-8 encoded source


@dataclass(frozen=True)
class Segment:
    kind: Kind
    text: str
    prefix: str = ""
    closed: bool = True

    @property
    def is_canonical_answer(self) -> bool:
        return self.kind is Kind.ANSWER and self.text.strip() in ("0", "1")

    def render(self) -> str:
        close = self.kind.close_tag if self.closed else ""
        return f"{self.prefix}{self.kind.open_tag}{self.text}{close}"


def Think(text: str, prefix: str = "") -> Segment:
    return Segment(Kind.THINK, text, prefix)


def Search(text: str, prefix: str = "") -> Segment:
    return Segment(Kind.SEARCH, text, prefix)


def Information(text: str, prefix: str = "") -> Segment:
    return Segment(Kind.INFORMATION, text, prefix)


def Answer(text: str, prefix: str = "") -> Segment:
    return Segment(Kind.ANSWER, text, prefix)


@dataclass(frozen=True)
class Trajectory:
    segments: tuple[Segment, ...]
    raw_text: str
    terminal: bool
    trailing: str = ""
    issues: tuple[Violation, ...] = ()

    @classmethod
    def from_segments(cls, segments: Iterable[Segment], trailing: str = "") -> "Trajectory":
        segs = tuple(segments)
        raw = "".join(s.render() for s in segs) + trailing
        return cls(segs, raw, _is_terminal(segs), trailing)

    def tag_pair_counts(self) -> dict[Kind, int]:
        counts = {k: 0 for k in Kind}
        for seg in self.segments:
            if seg.closed:
                counts[seg.kind] += 1
        return counts

    def count(self, kind: Kind) -> int:
        return sum(1 for s in self.segments if s.kind is kind)


@dataclass(frozen=True)
class FormatVerdict:
    well_formed: bool
    answer_pair_count: int
    violations: tuple[str, ...] = field(default_factory=tuple)


def _is_terminal(segments: tuple[Segment, ...]) -> bool:
    return bool(segments) and segments[-1].kind is Kind.ANSWER


def _byte_offset(raw: str, index: int) -> int:
    return len(raw[:index].encode("utf-8"))


def parse(raw: str, strict: bool = False) -> Trajectory:
    """Parse tagged verifier output into segments.

    Lenient by default: malformed input still yields a trajectory, with the
    problems recorded on ``Trajectory.issues``. With ``strict=True`` the first
    problem raises ``StrictFormatError``.
    """
    segments: list[Segment] = []
    issues: list[Violation] = []

    def flag(code: str, index: int) -> None:
        v = Violation(code, _byte_offset(raw, index))
        if strict:
            raise StrictFormatError(v.code, v.offset)
        issues.append(v)

    pos = 0
    pending = ""  # text seen outside any segment, attached to the next one
    open_kind: Optional[Kind] = None
    open_prefix = ""
    content_start = 0

    while True:
        m = _TAG_RE.search(raw, pos)
        if open_kind is None:
            end = m.start() if m else len(raw)
            gap = raw[pos:end]
            if gap.strip():
                flag(INTERLEAVE_ORDER, pos + (len(gap) - len(gap.lstrip())))
            pending += gap
            if m is None:
                break
            if m.group(1):
                flag(UNCLOSED_TAG, m.start())
                pending += m.group(0)
                pos = m.end()
                continue
            open_kind = Kind(m.group(2))
            open_prefix, pending = pending, ""
            content_start = pos = m.end()
            continue

        if m is None:
            flag(UNCLOSED_TAG, content_start)
            segments.append(Segment(open_kind, raw[content_start:], open_prefix, closed=False))
            open_kind = None
            pos = len(raw)
            break
        if m.group(1) and m.group(2) == open_kind.value:
            segments.append(Segment(open_kind, raw[content_start:m.start()], open_prefix))
            open_kind = None
            pos = m.end()
            continue
        # Foreign tag inside an open segment: nesting if our close tag shows up
        # before our kind is opened again, otherwise the segment was never closed.
        own_close = raw.find(open_kind.close_tag, m.end())
        next_open = raw.find(open_kind.open_tag, m.end())
        if own_close != -1 and (next_open == -1 or own_close < next_open):
            flag(NESTED_TAG, m.start())
            segments.append(Segment(open_kind, raw[content_start:own_close], open_prefix))
            pos = own_close + len(open_kind.close_tag)
        else:
            flag(UNCLOSED_TAG, m.start())
            segments.append(Segment(open_kind, raw[content_start:m.start()], open_prefix, closed=False))
            pos = m.start()
        open_kind = None

    segs = tuple(segments)
    return Trajectory(segs, raw, _is_terminal(segs), pending, tuple(issues))


def render(t: Trajectory) -> str:
    for seg in t.segments:
        if not seg.closed:
            raise RenderError(f"segment {seg.kind.value!r} is not closed")
        if _TAG_RE.search(seg.text):
            raise RenderError(f"payload of {seg.kind.value!r} segment contains a raw tag")
        if seg.prefix.strip():
            raise RenderError("non-whitespace text between segments")
    if t.trailing.strip():
        raise RenderError("non-whitespace text after the last segment")
    return "".join(seg.render() for seg in t.segments) + t.trailing


def validate_format(t: Trajectory) -> FormatVerdict:
    codes: list[str] = [v.code for v in t.issues]
    segs = t.segments

    for i, seg in enumerate(segs):
        if seg.kind is Kind.INFORMATION and (i == 0 or segs[i - 1].kind is not Kind.SEARCH):
            codes.append(ORPHAN_INFORMATION)

    answer_idx = [i for i, s in enumerate(segs) if s.kind is Kind.ANSWER]
    if not answer_idx:
        codes.append(MISSING_ANSWER)
    else:
        first = answer_idx[0]
        if not any(s.kind is Kind.THINK for s in segs[:first]):
            codes.append(INTERLEAVE_ORDER)
        if not t.terminal:
            codes.append(INTERLEAVE_ORDER)

    violations = tuple(dict.fromkeys(codes))
    pairs = sum(1 for s in segs if s.kind is Kind.ANSWER and s.closed)
    return FormatVerdict(not violations, pairs, violations)


def extract_judgment(t: Trajectory) -> Optional[int]:
    for seg in reversed(t.segments):
        if seg.kind is Kind.ANSWER:
            # a truncated answer is not a judgment
            payload = seg.text.strip()
            return int(payload) if seg.closed and payload in ("0", "1") else None
    return None


def escape_tags(text: str) -> str:
    """Neutralise protocol tags inside free text (e.g. retrieved documents)."""
    return _TAG_RE.sub(lambda m: "&lt;" + m.group(0)[1:], text)
