"""Structured verifiable reward: correctness times format."""

from __future__ import annotations

from dataclasses import dataclass

from .protocol import MAX_ANSWER_PAIRS, Trajectory, extract_judgment, validate_format

FORMAT_OVERFLOW = 0.25


@dataclass(frozen=True)
class RewardBreakdown:
    correctness: int
    format: float
    total: float

    def as_dict(self) -> dict:
        return {"correctness": self.correctness, "format": self.format, "total": self.total}


def correctness_reward(t: Trajectory, gold: int) -> int:
    judgment = extract_judgment(t)
    return int(judgment is not None and judgment == gold)


def format_reward(t: Trajectory) -> float:
    verdict = validate_format(t)
    if not verdict.well_formed:
        return 0.0
    if verdict.answer_pair_count <= MAX_ANSWER_PAIRS:
        return 1.0
    return FORMAT_OVERFLOW


def total_reward(t: Trajectory, gold: int) -> RewardBreakdown:
    rc = correctness_reward(t, gold)
    rf = format_reward(t)
    return RewardBreakdown(rc, rf, rc * rf)
