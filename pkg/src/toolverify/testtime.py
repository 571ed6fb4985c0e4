"""Verifier-guided answer selection over N sampled generator traces."""

from __future__ import annotations

import csv
import enum
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .backends import Backend, GenerationRequest, judgment_confidence
from .errors import LogitsUnavailableError, NoAnswerableCandidateError, ToolVerifyError
from .protocol import Kind, extract_judgment
from .rollout import Retriever, RolloutLimits, VerificationInstance, derive_seed, run_rollout

logger = logging.getLogger(__name__)

SCALING_BUDGETS = (1, 2, 4, 8, 16, 32)

_ANSWER_RE = re.compile(r"the answer is\s*\(\s*([A-Za-z])\s*\)", re.IGNORECASE)


class Strategy(str, enum.Enum):
    SELF_CONSISTENCY = "self_consistency"
    BEST_OF_N = "best_of_n"
    HARD_WEIGHTED = "hard_weighted_sc"
    SOFT_WEIGHTED = "soft_weighted_sc"


@dataclass(frozen=True)
class Candidate:
    trace_text: str
    extracted_answer: Optional[str] = None
    judgment: Optional[int] = None
    confidence: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.judgment == 1 and self.confidence < 0.5:
            logger.debug("verified candidate with confidence %.3f < 0.5", self.confidence)


@dataclass
class AggregationResult:
    chosen_answer: str
    strategy: Strategy
    per_answer_scores: dict[str, float]
    n_candidates: int
    n_verified: int
    fallback: bool = False


def extract_answer(trace_text: str) -> Optional[str]:
    matches = _ANSWER_RE.findall(trace_text)
    return matches[-1].upper() if matches else None


def _answerable(candidates: Sequence[Candidate]) -> list[tuple[int, Candidate]]:
    return [(i, c) for i, c in enumerate(candidates) if c.extracted_answer is not None]


def _n_verified(candidates: Sequence[Candidate]) -> int:
    return sum(1 for c in candidates if c.judgment == 1)


def _vote(scores: dict[str, float]) -> str:
    # highest score, then lexicographically smallest key
    return min(scores, key=lambda a: (-scores[a], a))


def plain_self_consistency(candidates: Sequence[Candidate]) -> AggregationResult:
    pool = _answerable(candidates)
    if not pool:
        raise NoAnswerableCandidateError("no candidate has an extractable answer")
    scores: dict[str, float] = {}
    for _, c in pool:
        scores[c.extracted_answer] = scores.get(c.extracted_answer, 0) + 1
    return AggregationResult(_vote(scores), Strategy.SELF_CONSISTENCY, scores, len(candidates), _n_verified(candidates))


def best_of_n(candidates: Sequence[Candidate]) -> AggregationResult:
    pool = _answerable(candidates)
    if not pool:
        raise NoAnswerableCandidateError("no candidate has an extractable answer")
    best_i, best = pool[0]
    scores: dict[str, float] = {}
    for i, c in pool:
        scores[c.extracted_answer] = max(scores.get(c.extracted_answer, 0.0), c.confidence)
        if c.confidence > best.confidence:
            best_i, best = i, c
    return AggregationResult(best.extracted_answer, Strategy.BEST_OF_N, scores, len(candidates), _n_verified(candidates))


def hard_weighted_sc(candidates: Sequence[Candidate]) -> AggregationResult:
    pool = _answerable(candidates)
    if not pool:
        raise NoAnswerableCandidateError("no candidate has an extractable answer")
    verified = _n_verified(candidates)
    if not any(c.judgment == 1 for _, c in pool):
        logger.debug("no verified candidate; falling back to plain self-consistency")
        result = plain_self_consistency(candidates)
        result.strategy = Strategy.HARD_WEIGHTED
        result.fallback = True
        return result
    scores: dict[str, float] = {}
    for _, c in pool:
        scores[c.extracted_answer] = scores.get(c.extracted_answer, 0) + (1 if c.judgment == 1 else 0)
    return AggregationResult(_vote(scores), Strategy.HARD_WEIGHTED, scores, len(candidates), verified)


def soft_weighted_sc(candidates: Sequence[Candidate]) -> AggregationResult:
    pool = _answerable(candidates)
    if not pool:
        raise NoAnswerableCandidateError("no candidate has an extractable answer")
    scores: dict[str, float] = {}
    for _, c in pool:
        scores[c.extracted_answer] = scores.get(c.extracted_answer, 0.0) + c.confidence
    return AggregationResult(_vote(scores), Strategy.SOFT_WEIGHTED, scores, len(candidates), _n_verified(candidates))


STRATEGIES: dict[Strategy, Callable[[Sequence[Candidate]], AggregationResult]] = {
    Strategy.SELF_CONSISTENCY: plain_self_consistency,
    Strategy.BEST_OF_N: best_of_n,
    Strategy.HARD_WEIGHTED: hard_weighted_sc,
    Strategy.SOFT_WEIGHTED: soft_weighted_sc,
}


def aggregate(strategy: Strategy | str, candidates: Sequence[Candidate]) -> AggregationResult:
    return STRATEGIES[Strategy(strategy)](candidates)


# benchmark evaluation


@dataclass(frozen=True)
class BenchmarkQuestion:
    question_id: str
    question: str
    options: dict[str, str]
    gold_key: str

    @classmethod
    def from_json(cls, row: dict) -> "BenchmarkQuestion":
        return cls(str(row["question_id"]), row["question"], dict(row["options"]), row["gold_key"])

    def to_json(self) -> dict:
        return {"question_id": self.question_id, "question": self.question, "options": self.options, "gold_key": self.gold_key}

    def render(self) -> str:
        opts = " ".join(f"({k}) {v}" for k, v in sorted(self.options.items()))
        return f"Question: {self.question}\nOptions: {opts}\n"


def load_benchmark(path: str | Path) -> list[BenchmarkQuestion]:
    with open(path, encoding="utf-8") as fh:
        return [BenchmarkQuestion.from_json(json.loads(line)) for line in fh if line.strip()]


def _trace_steps(trace: str) -> tuple[str, ...]:
    steps = tuple(s for s in trace.splitlines() if s.strip())
    return steps or (trace,)


def verify_candidate(
    verifier: Backend,
    retriever: Retriever,
    question: BenchmarkQuestion,
    trace: str,
    index: int,
    limits: RolloutLimits,
    seed: int,
) -> Candidate:
    """Run a verification rollout and read the confidence at the final answer position."""
    inst = VerificationInstance(f"{question.question_id}/{index}", question.render().strip(), _trace_steps(trace), 1)
    rollout = run_rollout(verifier, retriever, inst, limits, 0, seed)
    judgment = extract_judgment(rollout.trajectory)
    context = rollout.prompt + rollout.trajectory.raw_text
    cut = context.rfind(Kind.ANSWER.open_tag)
    confidence = float(judgment or 0)
    if cut != -1 and cut >= len(rollout.prompt):
        try:
            confidence = judgment_confidence(verifier, context[: cut + len(Kind.ANSWER.open_tag)])
        except LogitsUnavailableError:
            pass
    return Candidate(trace, extract_answer(trace), judgment, confidence)


@dataclass
class BenchmarkReport:
    n: int
    strategies: list[str]
    accuracy: dict[str, float]
    curve: list[dict]
    n_questions: int
    skipped: int
    unanswerable_candidates: int
    fallbacks: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "n": self.n,
            "strategies": self.strategies,
            "accuracy": self.accuracy,
            "curve": self.curve,
            "n_questions": self.n_questions,
            "skipped": self.skipped,
            "unanswerable_candidates": self.unanswerable_candidates,
            "fallbacks": self.fallbacks,
        }
        d.update(self.extra)
        return d

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", *self.strategies])
            for row in self.curve:
                writer.writerow([row["n"], *(row[s] for s in self.strategies)])


def score_candidate_sets(
    candidate_sets: Sequence[tuple[str, Sequence[Candidate]]],
    n: int,
    strategies: Sequence[Strategy | str],
    budgets: Iterable[int] = SCALING_BUDGETS,
) -> tuple[dict[str, float], list[dict], int]:
    """Accuracy per strategy at ``n`` and along the prefix-budget curve.

    Each entry is ``(gold_key, candidates)``; a budget ``m`` uses the first
    ``m`` candidates. Questions with no answerable candidate count as wrong.
    """
    names = [Strategy(s).value for s in strategies]
    points = sorted({b for b in budgets if b <= n} | {n})
    correct = {(m, s): 0 for m in points for s in names}
    fallbacks = 0
    for gold, cands in candidate_sets:
        for m in points:
            for s in names:
                try:
                    res = aggregate(s, cands[:m])
                except NoAnswerableCandidateError:
                    continue
                correct[m, s] += res.chosen_answer == gold
                if m == n and res.fallback:
                    fallbacks += 1
    total = max(len(candidate_sets), 1)
    curve = [{"n": m, **{s: correct[m, s] / total for s in names}} for m in points]
    return {s: correct[n, s] / total for s in names}, curve, fallbacks


def evaluate_benchmark(
    questions: Sequence[BenchmarkQuestion],
    generator: Backend,
    verifier: Backend,
    retriever: Retriever,
    N: int,
    strategies: Sequence[Strategy | str] = tuple(Strategy),
    limits: RolloutLimits = RolloutLimits(),
    seed: int = 0,
    generator_max_tokens: int = 1024,
) -> BenchmarkReport:
    if N < 1:
        raise ValueError("N must be at least 1")
    candidate_sets = []
    skipped = unanswerable = 0
    for q in questions:
        try:
            cands = []
            for j in range(N):
                req = GenerationRequest(
                    context=q.render(),
                    stop_sequences=(),
                    temperature=limits.temperature,
                    top_p=limits.top_p,
                    max_new_tokens=generator_max_tokens,
                    instance_id=q.question_id,
                    rollout_index=j,
                    seed=derive_seed(seed, "gen", q.question_id, j),
                )
                trace = generator.generate(req).text
                cands.append(verify_candidate(verifier, retriever, q, trace, j, limits, seed))
        except ToolVerifyError as exc:
            logger.warning("skipping question %s: %s", q.question_id, exc)
            skipped += 1
            continue
        unanswerable += sum(c.extracted_answer is None for c in cands)
        candidate_sets.append((q.gold_key, cands))
    accuracy, curve, fallbacks = score_candidate_sets(candidate_sets, N, strategies)
    return BenchmarkReport(
        N, [Strategy(s).value for s in strategies], accuracy, curve, len(questions), skipped, unanswerable, fallbacks
    )


# simulation


@dataclass(frozen=True)
class SimulationModel:
    """Synthetic generator/verifier pair for scaling studies.

    Per-question accuracy is drawn from a Beta with mean ``p`` (so questions
    differ in difficulty), wrong answers concentrate on per-question
    distractors, and the verifier's judgment is right with probability ``q``.
    """

    p: float = 0.55
    q: float = 0.8
    n_options: int = 5
    difficulty_concentration: float = 2.0
    distractor_concentration: float = 0.5

    def sample_question(self, rng: np.random.Generator, n: int) -> tuple[str, list[Candidate]]:
        keys = [chr(ord("A") + i) for i in range(self.n_options)]
        gold = keys[int(rng.integers(self.n_options))]
        wrong = [k for k in keys if k != gold]
        kappa = self.difficulty_concentration
        p_q = rng.beta(self.p * kappa, (1 - self.p) * kappa)
        weights = rng.dirichlet([self.distractor_concentration] * len(wrong))
        cands = []
        for _ in range(n):
            is_right = rng.random() < p_q
            answer = gold if is_right else wrong[int(rng.choice(len(wrong), p=weights))]
            judged_right = is_right if rng.random() < self.q else not is_right
            conf = 0.5 + 0.5 * rng.random() if judged_right else 0.5 * rng.random()
            trace = f"Simulated reasoning. The answer is ({answer})."
            cands.append(Candidate(trace, answer, int(judged_right), float(conf)))
        return gold, cands


def simulate_scaling(
    model: SimulationModel,
    n_questions: int,
    seed: int = 0,
    budgets: Sequence[int] = SCALING_BUDGETS,
    strategies: Sequence[Strategy | str] = tuple(Strategy),
) -> dict[str, np.ndarray]:
    """Per-question correctness for every strategy and budget.

    Returns ``{strategy: bool array of shape (n_questions, len(budgets))}``;
    budgets share one candidate draw per question (prefixes), which keeps
    comparisons across N paired.
    """
    rng = np.random.default_rng(seed)
    n_max = max(budgets)
    names = [Strategy(s).value for s in strategies]
    out = {s: np.zeros((n_questions, len(budgets)), dtype=bool) for s in names}
    for qi in range(n_questions):
        gold, cands = model.sample_question(rng, n_max)
        for bi, m in enumerate(budgets):
            for s in names:
                out[s][qi, bi] = aggregate(s, cands[:m]).chosen_answer == gold
    return out
