"""Iterative sample -> filter -> train loop with resumable persistence."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backends import Backend, RemoteChatPolicy
from .config import RunConfig
from .curriculum import build_curriculum, curriculum_manifest
from .drgrpo import TokenBatch, encode_groups, train_step_with_metrics
from .errors import ConfigError, ResumeMismatchError
from .protocol import extract_judgment
from .retrieval import LexicalRetriever, RemoteRetriever, SearchIndex, build_index, load_corpus
from .rollout import RolloutLimits, VerificationInstance, derive_seed, load_instances, rollout_records, run_verification
from .toypolicy import ToySoftmaxPolicy

logger = logging.getLogger(__name__)


@dataclass
class IterationRecord:
    iteration: int
    curriculum: dict
    training: dict
    eval_accuracy: float
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        # wall-clock lives in timings.jsonl so records stay reproducible
        return {
            "iteration": self.iteration,
            "curriculum": self.curriculum,
            "training": self.training,
            "eval_accuracy": self.eval_accuracy,
        }


def make_retriever(cfg: RunConfig):
    r = cfg.retrieval
    if r.backend == "remote":
        if not r.endpoint:
            raise ConfigError("retrieval.endpoint is required for the remote backend")
        return RemoteRetriever(r.endpoint, k=r.k, max_chars=r.max_chars)
    if not r.corpus_path:
        raise ConfigError("retrieval.corpus_path is required for the lexical backend")
    if str(r.corpus_path).endswith(".json") or Path(r.corpus_path).is_dir():
        index = SearchIndex.load(r.corpus_path)
    else:
        index = build_index(load_corpus(r.corpus_path), k1=r.k1, b=r.b)
    return LexicalRetriever(index, k=r.k, max_chars=r.max_chars)


def make_policy(cfg: RunConfig, checkpoint: Optional[str] = None) -> Backend:
    p = cfg.policy
    if p.backend == "remote":
        if not p.base_url:
            raise ConfigError("policy.base_url is required for the remote backend")
        return RemoteChatPolicy(p.base_url, model=p.model, max_in_flight=p.max_in_flight)
    policy = ToySoftmaxPolicy.with_format_prior(
        feature_dim=p.feature_dim, strength=p.prior_strength, bias=p.prior_bias, noise=p.prior_noise, seed=cfg.seed
    )
    if checkpoint:
        theta = np.load(checkpoint)
        if theta.shape != policy.theta.shape:
            raise ConfigError(f"checkpoint shape {theta.shape} does not match policy {policy.theta.shape}")
        policy.theta = theta
    return policy


def evaluate_policy(
    policy: Backend, retriever, instances: Sequence[VerificationInstance], limits: RolloutLimits, seed: int = 0
) -> float:
    """Greedy verification accuracy: judgment equals the gold label."""
    greedy = replace(limits, temperature=0.0)
    hits = sum(
        extract_judgment(run_verification(policy, retriever, inst, greedy, 0, seed)) == inst.gold_label
        for inst in instances
    )
    return hits / len(instances) if instances else 0.0


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def train_on_curriculum(
    policy: ToySoftmaxPolicy, groups, cfg: RunConfig, iteration: int, seed: int
) -> tuple[dict, list[dict]]:
    """Epochs of minibatch gradient ascent on the filtered rollout groups."""
    grpo = cfg.grpo
    batch = encode_groups(policy, groups, grpo)
    rng = np.random.default_rng(seed)
    metrics: list[dict] = []
    step = 0
    for _ in range(grpo.epochs_per_iteration):
        order = rng.permutation(len(batch.groups))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            mini = TokenBatch([batch.groups[i] for i in idx])
            _, m = train_step_with_metrics(policy, mini, grpo)
            step += 1
            rewards = [r.total for i in idx for r in groups[i].rewards]
            metrics.append(
                {
                    "iteration": iteration,
                    "step": step,
                    "objective": m.objective,
                    "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
                    "clip_fraction": m.clip_fraction,
                    "grad_norm": m.grad_norm,
                }
            )
    summary = {
        "steps": step,
        "groups": len(groups),
        "first_objective": metrics[0]["objective"] if metrics else 0.0,
        "last_objective": metrics[-1]["objective"] if metrics else 0.0,
        "mean_clip_fraction": float(np.mean([m["clip_fraction"] for m in metrics])) if metrics else 0.0,
    }
    return summary, metrics


class RunState:
    """Files under the output directory.

    ``run.json`` (config, hash, baseline accuracy), ``records.jsonl``,
    ``metrics.jsonl``, ``rollouts_NNN.jsonl``, ``curriculum_NNN.json`` and
    ``checkpoints/iter_NNN.npy``. Wall-clock goes to ``timings.jsonl`` only.
    """

    def __init__(self, out_dir: Path, cfg: RunConfig) -> None:
        self.out = out_dir
        self.cfg = cfg
        self.ckpt_dir = out_dir / "checkpoints"
        self.records_path = out_dir / "records.jsonl"
        self.metrics_path = out_dir / "metrics.jsonl"
        self.timings_path = out_dir / "timings.jsonl"
        self.run_path = out_dir / "run.json"

    def open(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(exist_ok=True)
        if self.run_path.exists():
            meta = json.loads(self.run_path.read_text(encoding="utf-8"))
            if meta.get("config_hash") != self.cfg.hash():
                raise ResumeMismatchError(
                    f"{self.out} holds a run with config hash {meta.get('config_hash')}, not {self.cfg.hash()}"
                )
            return meta
        return {}

    def completed(self) -> list[dict]:
        if not self.records_path.exists():
            return []
        rows = [json.loads(l) for l in self.records_path.read_text(encoding="utf-8").splitlines() if l.strip()]
        # only trust records whose checkpoint made it to disk
        return [r for r in rows if (self.ckpt_dir / f"iter_{r['iteration']:03d}.npy").exists()]

    def save_iteration(
        self, record: IterationRecord, theta: np.ndarray, metrics: list[dict], manifest: dict, groups=()
    ) -> None:
        t = record.iteration
        rows = [row for g in groups for row in rollout_records(g, iteration=t, **self.stamp())]
        _atomic_write(self.out / f"rollouts_{t:03d}.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        ckpt = self.ckpt_dir / f"iter_{t:03d}.npy"
        tmp = self.ckpt_dir / f"iter_{t:03d}.tmp.npy"
        np.save(tmp, theta)
        os.replace(tmp, ckpt)
        _atomic_write(self.out / f"curriculum_{t:03d}.json", json.dumps(manifest, indent=2, sort_keys=True))
        rows = self.completed()
        rows = [r for r in rows if r["iteration"] < t] + [record.to_json() | self.stamp()]
        _atomic_write(self.records_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        kept = []
        if self.metrics_path.exists():
            kept = [l for l in self.metrics_path.read_text(encoding="utf-8").splitlines()
                    if l.strip() and json.loads(l)["iteration"] < t]
        kept += [json.dumps(m | self.stamp(), sort_keys=True) for m in metrics]
        _atomic_write(self.metrics_path, "".join(l + "\n" for l in kept))
        with open(self.timings_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"iteration": t, "wall_clock": record.wall_clock}) + "\n")

    def stamp(self) -> dict:
        return {"config_hash": self.cfg.hash(), "seed": self.cfg.seed}

    def load_theta(self, t: int) -> np.ndarray:
        return np.load(self.ckpt_dir / f"iter_{t:03d}.npy")


def run_iterations(cfg: RunConfig, stop_after: Optional[int] = None) -> list[IterationRecord]:
    """Run (or resume) the iterative loop; ``stop_after`` simulates an interruption."""
    if cfg.policy.backend != "toy":
        raise ConfigError("training needs the toy policy backend; remote backends are evaluation-only")
    if not cfg.paths.pool:
        raise ConfigError("paths.pool is required")
    pool = load_instances(cfg.paths.pool)
    heldout = load_instances(cfg.paths.heldout) if cfg.paths.heldout else []
    retriever = make_retriever(cfg)
    policy = make_policy(cfg)
    assert isinstance(policy, ToySoftmaxPolicy)

    state = RunState(Path(cfg.paths.output_dir), cfg)
    meta = state.open()
    if not meta:
        meta = {
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "baseline_eval_accuracy": evaluate_policy(policy, retriever, heldout, cfg.rollout, cfg.seed),
        }
        _atomic_write(state.run_path, json.dumps(meta, indent=2, sort_keys=True))

    records = [
        IterationRecord(r["iteration"], r["curriculum"], r["training"], r["eval_accuracy"]) for r in state.completed()
    ]
    if records:
        policy.theta = state.load_theta(records[-1].iteration)
        logger.info("resuming after iteration %d", records[-1].iteration)

    for t in range(len(records) + 1, cfg.max_iterations + 1):
        if stop_after is not None and t > stop_after:
            break
        started = time.perf_counter()
        seed_t = derive_seed(cfg.seed, "iteration", t)
        curriculum_cfg = replace(cfg.curriculum, workers=max(cfg.curriculum.workers, cfg.workers))
        curriculum, stats = build_curriculum(pool, policy, retriever, curriculum_cfg, seed_t, cfg.rollout)
        summary, metrics = train_on_curriculum(policy, curriculum.groups, cfg, t, derive_seed(seed_t, "train"))
        accuracy = evaluate_policy(policy, retriever, heldout, cfg.rollout, cfg.seed)
        record = IterationRecord(t, stats.as_dict(), summary, accuracy, time.perf_counter() - started)
        manifest = curriculum_manifest(t, seed_t, cfg.curriculum, curriculum, stats, config_hash=cfg.hash(), run_seed=cfg.seed)
        state.save_iteration(record, policy.theta, metrics, manifest, curriculum.groups)
        records.append(record)
        logger.info("iteration %d: retained %d, eval accuracy %.3f", t, stats.retained, accuracy)
    return records
