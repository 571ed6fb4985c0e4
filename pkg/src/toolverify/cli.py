"""Command-line entry point: ``toolverify <group> <command> ...``.

Usage errors exit with code 2 (argparse); runtime failures exit with code 1
and print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .config import RunConfig, load_config
from .curriculum import build_curriculum, curriculum_manifest
from .drgrpo import gradient_check
from .driver import make_policy, make_retriever, run_iterations
from .errors import ToolVerifyError
from .retrieval import build_index, load_corpus
from .rollout import ROLLOUT_RECORD_SCHEMA, derive_seed, load_instances, rollout_group, rollout_records
from .synthetic import SyntheticTask, simulated_generator, simulated_verifier, write_bundle
from .testtime import SCALING_BUDGETS, SimulationModel, Strategy, evaluate_benchmark, load_benchmark, simulate_scaling

logger = logging.getLogger("toolverify")

GRPO_TOLERANCE = 1e-5


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _write_json(path: str | Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _with_corpus(cfg: RunConfig, corpus: Optional[str]) -> RunConfig:
    return replace(cfg, retrieval=replace(cfg.retrieval, corpus_path=corpus)) if corpus else cfg


# commands


def cmd_index_build(args: argparse.Namespace) -> int:
    index = build_index(load_corpus(args.corpus), k1=args.k1, b=args.b)
    path = index.save(args.out)
    print(json.dumps({"index": str(path), "n_docs": index.n_docs, "n_terms": len(index.postings)}))
    return 0


def cmd_rollout_run(args: argparse.Namespace) -> int:
    cfg = _with_corpus(_config(args), args.corpus)
    pool = load_instances(args.pool)[: args.limit] if args.limit else load_instances(args.pool)
    policy = make_policy(cfg, args.checkpoint)
    retriever = make_retriever(cfg)
    G = cfg.curriculum.group_size
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for inst in pool:
            group = rollout_group(policy, retriever, inst, G, cfg.rollout, derive_seed(cfg.seed, "rollout"))
            for row in rollout_records(group, gold_label=inst.gold_label, **_stamp(cfg)):
                jsonschema.validate(row, ROLLOUT_RECORD_SCHEMA)
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                n += 1
    print(json.dumps({"rollouts": n, "instances": len(pool), "out": args.out}))
    return 0


def cmd_curriculum_filter(args: argparse.Namespace) -> int:
    cfg = _with_corpus(_config(args), args.corpus)
    pool = load_instances(args.pool)
    policy = make_policy(cfg, args.checkpoint)
    retriever = make_retriever(cfg)
    seed = derive_seed(cfg.seed, "iteration", args.iteration)
    curriculum, stats = build_curriculum(pool, policy, retriever, cfg.curriculum, seed, cfg.rollout)
    manifest = curriculum_manifest(args.iteration, seed, cfg.curriculum, curriculum, stats,
                                   config_hash=cfg.hash(), run_seed=cfg.seed)
    _write_json(args.out, manifest)
    print(json.dumps(stats.as_dict(), sort_keys=True))
    return 0


def cmd_train_iterate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if args.output_dir:
        cfg = replace(cfg, paths=replace(cfg.paths, output_dir=args.output_dir))
    records = run_iterations(cfg, stop_after=args.stop_after)
    for r in records:
        print(json.dumps(r.to_json() | _stamp(cfg), sort_keys=True))
    return 0


def _strategies(names: Sequence[str]) -> list[Strategy]:
    if not names or "all" in names:
        return list(Strategy)
    return [Strategy(n) for n in names]


def _eval_backends(args: argparse.Namespace, cfg: RunConfig):
    if args.generator == "simulated":
        generator = simulated_generator(args.p)
    else:
        generator = make_policy(replace(cfg, policy=replace(cfg.policy, backend="remote")))
    if args.verifier == "simulated":
        verifier = simulated_verifier(args.q)
    elif args.verifier == "toy":
        verifier = make_policy(replace(cfg, policy=replace(cfg.policy, backend="toy")), args.checkpoint)
    else:
        verifier = make_policy(replace(cfg, policy=replace(cfg.policy, backend="remote")))
    return generator, verifier


def cmd_eval_search(args: argparse.Namespace) -> int:
    cfg = _with_corpus(_config(args), args.corpus)
    questions = load_benchmark(args.benchmark)
    if args.limit:
        questions = questions[: args.limit]
    generator, verifier = _eval_backends(args, cfg)
    report = evaluate_benchmark(
        questions, generator, verifier, make_retriever(cfg), args.n, _strategies(args.strategy), cfg.rollout, cfg.seed
    )
    report.extra.update(_stamp(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_json())
    report.write_csv(out / "scaling.csv")
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def cmd_eval_simulate(args: argparse.Namespace) -> int:
    model = SimulationModel(p=args.p, q=args.q)
    budgets = tuple(args.budgets)
    results = simulate_scaling(model, args.questions, args.seed, budgets)
    rows = [{"n": n, **{s: float(v[:, i].mean()) for s, v in results.items()}} for i, n in enumerate(budgets)]
    payload = {"p": args.p, "q": args.q, "questions": args.questions, "seed": args.seed, "curve": rows}
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_grpo_check(args: argparse.Namespace) -> int:
    errors = [gradient_check(s, h=args.h, n_coords=args.coords) for s in range(args.seed, args.seed + args.seeds)]
    worst = float(np.max(errors))
    ok = worst <= GRPO_TOLERANCE
    print(json.dumps({"seed": args.seed, "seeds": args.seeds, "h": args.h, "coords_per_seed": args.coords,
                      "max_relative_error": worst, "tolerance": GRPO_TOLERANCE, "passed": ok}))
    return 0 if ok else 1


def cmd_synth(args: argparse.Namespace) -> int:
    task = SyntheticTask(n_task_facts=args.facts)
    paths = write_bundle(args.out, task, args.pool_size, args.heldout_size, args.benchmark_size, args.seed)
    print(json.dumps({k: str(v) for k, v in paths.items()} | {"seed": args.seed}))
    return 0


# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolverify", description="Tool-integrated trace verification harness.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    groups = parser.add_subparsers(dest="group", required=True)

    def sub(group_name: str, help_text: str):
        g = groups.add_parser(group_name, help=help_text)
        return g.add_subparsers(dest="command", required=True)

    index = sub("index", "retrieval index")
    p = index.add_parser("build", help="build and persist a BM25 index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.set_defaults(func=cmd_index_build)

    rollout = sub("rollout", "verification rollouts")
    p = rollout.add_parser("run", help="grouped rollouts with rewards, as JSONL")
    p.add_argument("--pool", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="corpus JSONL or index directory; overrides retrieval.corpus_path")
    p.add_argument("--checkpoint", help="toy-policy parameters (.npy)")
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_rollout_run)

    curriculum = sub("curriculum", "adaptive curriculum")
    p = curriculum.add_parser("filter", help="build one filtered curriculum and write its manifest")
    p.add_argument("--pool", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_curriculum_filter)

    train = sub("train", "iterative training")
    p = train.add_parser("iterate", help="run or resume the sample-filter-train loop")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--stop-after", type=int, help="stop after this many iterations (resume later)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_iterate)

    ev = sub("eval", "test-time search")
    p = ev.add_parser("search", help="evaluate selection strategies on a benchmark")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--strategy", action="append", choices=[s.value for s in Strategy] + ["all"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--out", default="eval_out")
    p.add_argument("--generator", choices=("simulated", "remote"), default="simulated")
    p.add_argument("--verifier", choices=("simulated", "toy", "remote"), default="simulated")
    p.add_argument("--checkpoint")
    p.add_argument("--p", type=float, default=0.55, help="simulated generator accuracy")
    p.add_argument("--q", type=float, default=0.8, help="simulated verifier accuracy")
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval_search)

    p = ev.add_parser("simulate", help="Monte-Carlo scaling curve with simulated generator and verifier")
    p.add_argument("--p", type=float, default=0.55)
    p.add_argument("--q", type=float, default=0.8)
    p.add_argument("--questions", type=int, default=5000)
    p.add_argument("--budgets", type=int, nargs="+", default=list(SCALING_BUDGETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_simulate)

    grpo = sub("grpo", "objective checks")
    p = grpo.add_parser("check", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--coords", type=int, default=128)
    p.add_argument("--h", type=float, default=1e-6)
    p.set_defaults(func=cmd_grpo_check)

    p = groups.add_parser("synth", help="write the bundled synthetic task")
    p.add_argument("--out", required=True)
    p.add_argument("--pool-size", type=int, default=600)
    p.add_argument("--heldout-size", type=int, default=200)
    p.add_argument("--benchmark-size", type=int, default=200)
    p.add_argument("--facts", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ToolVerifyError, OSError, ValueError, KeyError, jsonschema.ValidationError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": f"{args.group} {getattr(args, 'command', '')}".strip()}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
