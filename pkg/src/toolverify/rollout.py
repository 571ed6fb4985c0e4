"""Multi-turn verification loop: generate, search, append evidence, repeat."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

from .backends import Backend, GenerationRequest, DEFAULT_TEMPERATURE, DEFAULT_TOP_P
from .drgrpo import group_advantages
from .errors import RetrievalBackendError, ToolVerifyError
from .protocol import STOP_SEQUENCES, Kind, Trajectory, parse
from .rewards import RewardBreakdown, total_reward

logger = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "You are a reasoning validator for medical problems. Your task is to think step by step "
    "and evaluate whether the given reasoning trace of a medical problem contains errors.\n"
    "First, you must always perform a step-by-step analysis to examine the entire reasoning "
    "process. Then, based on your analysis, you will make a definitive judgment.\n"
    "- Use 1 if the reasoning trace is free of errors.\n"
    "- Use 0 if the reasoning trace contains one or more errors.\n"
    "Output Instruction:\n"
    "You must conduct your step-by-step analysis inside <think> and </think> first every time "
    "you get new information. After reasoning, if you find you lack some knowledge, you can call "
    "a search engine by <search> query </search> and it will return the top searched results "
    "between <information> and </information>. You can search as many times as you want. If you "
    "find no further external knowledge needed, you can directly provide the answer inside "
    "<answer> and </answer>, without detailed illustrations.\n"
    "\n"
    "Medical Problem:\n"
    "{question}\n"
    "Reasoning Trace:\n"
    "{trace}\n"
)


@dataclass(frozen=True)
class VerificationInstance:
    instance_id: str
    question: str
    trace_steps: tuple[str, ...]
    gold_label: int

    def __post_init__(self) -> None:
        if not self.trace_steps:
            raise ValueError(f"instance {self.instance_id}: trace_steps is empty")
        if self.gold_label not in (0, 1):
            raise ValueError(f"instance {self.instance_id}: gold_label must be 0 or 1")

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "question": self.question,
            "trace_steps": list(self.trace_steps),
            "gold_label": self.gold_label,
        }

    @classmethod
    def from_json(cls, row: dict) -> "VerificationInstance":
        return cls(str(row["instance_id"]), row["question"], tuple(row["trace_steps"]), int(row["gold_label"]))


def load_instances(path: str | Path) -> list[VerificationInstance]:
    with open(path, encoding="utf-8") as fh:
        return [VerificationInstance.from_json(json.loads(line)) for line in fh if line.strip()]


def save_instances(instances: Iterable[VerificationInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class RolloutLimits:
    max_turns: int = 10
    max_new_tokens_per_turn: int = 512
    max_context_chars: int = 32_000
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P

    def __post_init__(self) -> None:
        if min(self.max_turns, self.max_new_tokens_per_turn, self.max_context_chars) < 1:
            raise ValueError("rollout limits must be positive")


class Retriever(Protocol):
    def information(self, query: str) -> str: ...


@dataclass
class Rollout:
    instance_id: str
    rollout_index: int
    prompt: str
    trajectory: Trajectory
    # (text, from_environment) in the order they were appended
    pieces: list[tuple[str, bool]]
    retrieval_calls: int
    events: list[str] = field(default_factory=list)


@dataclass
class RolloutGroup:
    instance: VerificationInstance
    trajectories: list[Trajectory]
    rewards: list[RewardBreakdown]
    advantages: list[float]
    rollouts: list[Rollout] = field(default_factory=list)

    @property
    def reward_values(self) -> list[float]:
        return [r.total for r in self.rewards]


def assemble_prompt(instance: VerificationInstance) -> str:
    return PROMPT_TEMPLATE.format(question=instance.question, trace="\n".join(instance.trace_steps))


def derive_seed(*parts: object) -> int:
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _last_query(transcript: str) -> str:
    start = transcript.rfind(Kind.SEARCH.open_tag)
    end = transcript.rfind(Kind.SEARCH.close_tag)
    if start == -1 or end < start:
        return ""
    return transcript[start + len(Kind.SEARCH.open_tag) : end].strip()


def run_rollout(
    policy: Backend,
    retriever: Retriever,
    instance: VerificationInstance,
    limits: RolloutLimits = RolloutLimits(),
    rollout_index: int = 0,
    seed: int = 0,
) -> Rollout:
    prompt = assemble_prompt(instance)
    transcript = ""
    pieces: list[tuple[str, bool]] = []
    events: list[str] = []
    searches = 0
    turn = 0
    while True:
        if len(prompt) + len(transcript) >= limits.max_context_chars:
            events.append("context_overflow")
            break
        req = GenerationRequest(
            context=prompt + transcript,
            stop_sequences=STOP_SEQUENCES,
            temperature=limits.temperature,
            top_p=limits.top_p,
            max_new_tokens=limits.max_new_tokens_per_turn,
            prompt_chars=len(prompt),
            instance_id=instance.instance_id,
            rollout_index=rollout_index,
            turn_index=turn,
            seed=derive_seed(seed, instance.instance_id, rollout_index, turn),
        )
        try:
            result = policy.generate(req)
        except ToolVerifyError as exc:
            events.append(f"backend_error: {exc}")
            logger.warning("generation failed for %s/%d: %s", instance.instance_id, rollout_index, exc)
            break
        turn += 1
        text = result.text
        transcript += text
        pieces.append((text, False))
        if text.endswith(Kind.ANSWER.close_tag):
            break
        if not text.endswith(Kind.SEARCH.close_tag):
            events.append(f"stopped: {result.stop_reason.value}")
            break
        if searches >= limits.max_turns:
            events.append("max_turns")
            break
        searches += 1
        try:
            info = retriever.information(_last_query(transcript))
        except RetrievalBackendError as exc:
            events.append(f"retrieval_error: {exc}")
            logger.warning("retrieval failed for %s/%d: %s", instance.instance_id, rollout_index, exc)
            info = ""
        block = f"{Kind.INFORMATION.open_tag}{info}{Kind.INFORMATION.close_tag}"
        transcript += block
        pieces.append((block, True))
    return Rollout(instance.instance_id, rollout_index, prompt, parse(transcript), pieces, searches, events)


def run_verification(
    policy: Backend,
    retriever: Retriever,
    instance: VerificationInstance,
    limits: RolloutLimits = RolloutLimits(),
    rollout_index: int = 0,
    seed: int = 0,
) -> Trajectory:
    return run_rollout(policy, retriever, instance, limits, rollout_index, seed).trajectory


def rollout_group(
    policy: Backend,
    retriever: Retriever,
    instance: VerificationInstance,
    G: int,
    limits: RolloutLimits = RolloutLimits(),
    seed: int = 0,
) -> RolloutGroup:
    if G < 2:
        raise ValueError("group size must be at least 2")
    rollouts = [run_rollout(policy, retriever, instance, limits, g, seed) for g in range(G)]
    trajectories = [r.trajectory for r in rollouts]
    rewards = [total_reward(t, instance.gold_label) for t in trajectories]
    return RolloutGroup(instance, trajectories, rewards, group_advantages([r.total for r in rewards]), rollouts)


def rollout_groups(
    policy: Backend,
    retriever: Retriever,
    instances: Sequence[VerificationInstance],
    G: int,
    limits: RolloutLimits = RolloutLimits(),
    seed: int = 0,
    workers: int = 1,
) -> list[RolloutGroup]:
    """Grouped rollouts for many instances, results in input order."""
    if workers <= 1:
        return [rollout_group(policy, retriever, inst, G, limits, seed) for inst in instances]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda inst: rollout_group(policy, retriever, inst, G, limits, seed), instances))


def rollout_records(group: RolloutGroup, **extra: object) -> list[dict]:
    rows = []
    for r, reward in zip(group.rollouts, group.rewards):
        row = {
            "instance_id": r.instance_id,
            "rollout_index": r.rollout_index,
            "raw_text": r.trajectory.raw_text,
            "reward": reward.as_dict(),
            "terminal": r.trajectory.terminal,
            "retrieval_calls": r.retrieval_calls,
        }
        row.update(extra)
        rows.append(row)
    return rows


ROLLOUT_RECORD_SCHEMA = {
    "type": "object",
    "required": ["instance_id", "rollout_index", "raw_text", "reward", "terminal", "retrieval_calls"],
    "properties": {
        "instance_id": {"type": "string"},
        "rollout_index": {"type": "integer", "minimum": 0},
        "raw_text": {"type": "string"},
        "reward": {
            "type": "object",
            "required": ["correctness", "format", "total"],
            "properties": {
                "correctness": {"enum": [0, 1]},
                "format": {"enum": [0, 0.25, 1]},
                "total": {"enum": [0, 0.25, 1]},
            },
        },
        "terminal": {"type": "boolean"},
        "retrieval_calls": {"type": "integer", "minimum": 0},
    },
}
