"""Variance-based curriculum: keep only instances whose rollout group disagrees."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backends import Backend
from .errors import BatchInfeasibleError, DegenerateGroupError
from .rollout import Retriever, RolloutGroup, RolloutLimits, VerificationInstance, rollout_groups

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CurriculumConfig:
    budget: int = 200
    group_size: int = 8
    balance_labels: bool = True
    max_resample_rounds: int = 50
    workers: int = 1

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError("budget must be positive")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.max_resample_rounds < 1:
            raise ValueError("max_resample_rounds must be positive")


@dataclass
class CurriculumStats:
    examined: int = 0
    retained: int = 0
    all_correct: int = 0
    all_wrong: int = 0
    mixed_degenerate: int = 0
    label_histogram: dict[int, int] = field(default_factory=lambda: {0: 0, 1: 0})
    rounds: int = 0
    budget_unmet: bool = False

    def as_dict(self) -> dict:
        d = asdict(self)
        d["label_histogram"] = {str(k): v for k, v in sorted(self.label_histogram.items())}
        return d


@dataclass
class Curriculum:
    groups: list[RolloutGroup]

    @property
    def instances(self) -> list[VerificationInstance]:
        return [g.instance for g in self.groups]

    @property
    def instance_ids(self) -> list[str]:
        return [g.instance.instance_id for g in self.groups]


def has_learning_signal(rewards: Sequence[float]) -> bool:
    if len(rewards) < 2:
        raise DegenerateGroupError("need at least two rewards")
    first = rewards[0]
    return any(r != first for r in rewards[1:])


def _split_by_label(pool: Sequence[VerificationInstance]) -> dict[int, list[VerificationInstance]]:
    by_label: dict[int, list[VerificationInstance]] = {0: [], 1: []}
    for inst in pool:
        by_label[inst.gold_label].append(inst)
    return by_label


def sample_balanced_batch(pool: Sequence[VerificationInstance], B: int, seed: int) -> list[VerificationInstance]:
    """floor(B/2) label-1 and ceil(B/2) label-0 instances, without replacement."""
    want = {1: B // 2, 0: B - B // 2}
    by_label = _split_by_label(pool)
    for label, n in want.items():
        if len(by_label[label]) < n:
            raise BatchInfeasibleError(f"pool has {len(by_label[label])} label-{label} instances, need {n}")
    rng = np.random.default_rng(seed)
    batch = []
    for label in (1, 0):
        idx = rng.choice(len(by_label[label]), size=want[label], replace=False)
        batch.extend(by_label[label][i] for i in idx)
    order = rng.permutation(len(batch))
    return [batch[i] for i in order]


def _classify(rewards: Sequence[float]) -> str:
    if has_learning_signal(rewards):
        return "retained"
    if rewards[0] == 1:
        return "all_correct"
    if rewards[0] == 0:
        return "all_wrong"
    return "mixed_degenerate"


def build_curriculum(
    pool: Sequence[VerificationInstance],
    policy: Backend,
    retriever: Retriever,
    config: CurriculumConfig = CurriculumConfig(),
    seed: int = 0,
    limits: RolloutLimits = RolloutLimits(),
) -> tuple[Curriculum, CurriculumStats]:
    """Resample and filter until the budget is filled or the pool runs dry.

    With label balancing on, each round draws only as many candidates of each
    label as are still missing, so a skewed retention rate is corrected by the
    next round.
    """
    rng = np.random.default_rng(seed)
    if config.balance_labels:
        queues = {label: [insts[i] for i in rng.permutation(len(insts))] for label, insts in _split_by_label(pool).items()}
        targets = {1: config.budget // 2, 0: config.budget - config.budget // 2}
    else:
        queues = {-1: [pool[i] for i in rng.permutation(len(pool))]}
        targets = {-1: config.budget}

    stats = CurriculumStats()
    kept: dict[int, int] = Counter()
    retained: list[RolloutGroup] = []
    seen: set[str] = set()

    for round_index in range(config.max_resample_rounds):
        candidates: list[VerificationInstance] = []
        for key, queue in queues.items():
            take = min(targets[key] - kept[key], len(queue))
            if take > 0:
                candidates.extend(queue[:take])
                del queue[:take]
        if not candidates:
            break
        stats.rounds = round_index + 1
        groups = rollout_groups(
            policy, retriever, candidates, config.group_size, limits, seed=seed, workers=config.workers
        )
        for group in groups:
            inst = group.instance
            if inst.instance_id in seen:
                continue
            seen.add(inst.instance_id)
            stats.examined += 1
            verdict = _classify(group.reward_values)
            setattr(stats, verdict, getattr(stats, verdict) + 1)
            if verdict == "retained":
                retained.append(group)
                kept[inst.gold_label if config.balance_labels else -1] += 1
                stats.label_histogram[inst.gold_label] += 1
        if len(retained) >= config.budget:
            break

    if len(retained) < config.budget:
        stats.budget_unmet = True
        logger.warning("curriculum short of budget: %d of %d retained", len(retained), config.budget)
    return Curriculum(retained), stats


def curriculum_manifest(
    iteration: int, seed: int, config: CurriculumConfig, curriculum: Curriculum, stats: CurriculumStats, **extra: object
) -> dict:
    manifest = {
        "iteration": iteration,
        "seed": seed,
        "config": asdict(config),
        "retained_instance_ids": curriculum.instance_ids,
        "stats": stats.as_dict(),
    }
    manifest.update(extra)
    return manifest
