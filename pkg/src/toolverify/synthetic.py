"""Bundled synthetic verification task: dosage arithmetic with planted errors.

Each trace adds a morning and an evening dose and states the total as a
compact claim such as ``7+5=13``. The gold label is 1 iff the claim is right.
The corpus holds one fact card per addition fact, so a verifier that searches
can look the sum up.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .backends import GenerationRequest, MockPolicy
from .protocol import Kind
from .retrieval import Document
from .rollout import VerificationInstance, derive_seed, save_instances
from .testtime import BenchmarkQuestion, extract_answer


@dataclass(frozen=True)
class SyntheticTask:
    n_task_facts: int = 12
    max_a: int = 20
    max_b: int = 10
    error_offsets: tuple[int, ...] = (-1, 1)

    def corpus(self) -> list[Document]:
        docs = []
        for a in range(1, self.max_a + 1):
            for b in range(1, self.max_b + 1):
                docs.append(
                    Document(
                        id=f"fact-{a:02d}-{b:02d}",
                        title=f"Addition fact {a} + {b}",
                        text=f"{a} plus {b} equals {a + b}. The sum of {a} and {b} is {a + b}.",
                    )
                )
        return docs

    def task_facts(self, seed: int = 0) -> list[tuple[int, int]]:
        rng = np.random.default_rng(seed)
        all_facts = [(a, b) for a in range(1, self.max_a + 1) for b in range(1, self.max_b + 1)]
        idx = rng.choice(len(all_facts), size=self.n_task_facts, replace=False)
        return [all_facts[i] for i in sorted(idx)]

    def instance(self, iid: str, a: int, b: int, label: int, rng: np.random.Generator) -> VerificationInstance:
        c = a + b if label == 1 else a + b + int(rng.choice(self.error_offsets))
        question = (
            f"A patient takes {a} tablets in the morning and {b} tablets in the evening. "
            "How many tablets does the patient take per day?"
        )
        steps = (
            f"Step 1: The morning dose is {a} tablets.",
            f"Step 2: The evening dose is {b} tablets.",
            f"Step 3: Adding both doses gives {a}+{b}={c}",
        )
        return VerificationInstance(iid, question, steps, label)

    def instances(self, n: int, seed: int, prefix: str = "syn", fact_seed: int = 0) -> list[VerificationInstance]:
        """Balanced instances (labels alternate) drawn from the task facts."""
        facts = self.task_facts(fact_seed)
        rng = np.random.default_rng(seed)
        out = []
        for i in range(n):
            a, b = facts[int(rng.integers(len(facts)))]
            out.append(self.instance(f"{prefix}-{i:05d}", a, b, 1 - i % 2, rng))
        return out

    def benchmark(self, n: int, seed: int, fact_seed: int = 0) -> list[BenchmarkQuestion]:
        facts = self.task_facts(fact_seed)
        rng = np.random.default_rng(seed)
        out = []
        for i in range(n):
            a, b = facts[int(rng.integers(len(facts)))]
            values = sorted({a + b, *(a + b + d for d in (-2, -1, 1, 2))})
            keys = [chr(ord("A") + j) for j in range(len(values))]
            order = rng.permutation(len(values))
            options = {keys[j]: str(values[order[j]]) for j in range(len(values))}
            gold = next(k for k, v in options.items() if v == str(a + b))
            question = (
                f"A patient takes {a} tablets in the morning and {b} tablets in the evening. "
                "How many tablets does the patient take per day?"
            )
            out.append(BenchmarkQuestion(f"bench-{i:05d}", question, options, gold))
        return out


def write_bundle(out_dir: str | Path, task: SyntheticTask = SyntheticTask(), pool_size: int = 600,
                 heldout_size: int = 200, benchmark_size: int = 200, seed: int = 0) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.jsonl",
        "pool": out / "pool.jsonl",
        "heldout": out / "heldout.jsonl",
        "benchmark": out / "benchmark.jsonl",
    }
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for d in task.corpus():
            fh.write(json.dumps({"id": d.id, "title": d.title, "text": d.text}) + "\n")
    save_instances(task.instances(pool_size, seed, "pool"), paths["pool"])
    save_instances(task.instances(heldout_size, seed + 1, "heldout"), paths["heldout"])
    with open(paths["benchmark"], "w", encoding="utf-8") as fh:
        for q in task.benchmark(benchmark_size, seed + 2):
            fh.write(json.dumps(q.to_json()) + "\n")
    return paths


# simulated generator / verifier backends for the benchmark harness

_QUESTION_RE = re.compile(r"(\d+) tablets in the morning and (\d+) tablets in the evening")
_OPTION_RE = re.compile(r"\(([A-Z])\) (-?\d+)")


def _options(text: str) -> dict[str, int]:
    return {k: int(v) for k, v in _OPTION_RE.findall(text)}


def simulated_generator(p: float = 0.55) -> MockPolicy:
    """Answers correctly with probability ``p``; the trace ends with its arithmetic claim."""

    def respond(req: GenerationRequest) -> str:
        m = _QUESTION_RE.search(req.context)
        opts = _options(req.context.split("Options:", 1)[-1])
        a, b = int(m.group(1)), int(m.group(2))
        rng = np.random.default_rng(req.seed)
        if rng.random() < p:
            value = a + b
        else:
            value = int(rng.choice([v for v in opts.values() if v != a + b]))
        key = next(k for k, v in opts.items() if v == value)
        return (
            f"Step 1: Add the morning and evening doses.\n"
            f"Step 2: The answer is ({key}).\n"
            f"Step 3: Hence {a}+{b}={value}"
        )

    return MockPolicy(responder=respond)


def simulated_verifier(q: float = 0.8) -> MockPolicy:
    """Judges the trace's claim correctly with probability ``q``.

    The decision is a deterministic function of the verification prompt so
    that the generated judgment and the confidence read back later agree.
    """

    def decide(prompt: str) -> tuple[int, float]:
        m = _QUESTION_RE.search(prompt)
        claim = re.findall(r"(\d+)\+(\d+)=(-?\d+)", prompt)
        truth = bool(m and claim and int(claim[-1][2]) == int(m.group(1)) + int(m.group(2)))
        rng = np.random.default_rng(derive_seed("simverifier", prompt))
        judged = truth if rng.random() < q else not truth
        conf = 0.5 + 0.5 * rng.random() if judged else 0.5 * rng.random()
        return int(judged), float(conf)

    def respond(req: GenerationRequest) -> str:
        judged, _ = decide(req.prompt)
        return f"<think>check the final claim</think><answer>{judged}</answer>"

    def logits(context: str) -> tuple[float, float]:
        cut = context.find(Kind.THINK.open_tag, context.rfind("Reasoning Trace:"))
        _, conf = decide(context[:cut] if cut != -1 else context)
        conf = min(max(conf, 1e-12), 1 - 1e-12)
        return float(np.log(conf / (1 - conf))), 0.0

    return MockPolicy(responder=respond, logits=logits)


def oracle_answer(question: BenchmarkQuestion) -> Optional[str]:
    m = _QUESTION_RE.search(question.question)
    if not m:
        return None
    total = int(m.group(1)) + int(m.group(2))
    return next((k for k, v in question.options.items() if int(v) == total), None)
