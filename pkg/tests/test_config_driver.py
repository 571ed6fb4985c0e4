from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from toolverify.config import RunConfig, config_from_dict, load_config
from toolverify.errors import ConfigError, ResumeMismatchError
from toolverify.driver import make_policy, make_retriever, run_iterations

REPO = Path(__file__).resolve().parents[1]


def small_config(bundle, out: Path, **top) -> RunConfig:
    data = {
        "max_iterations": 2,
        "batch_size": 16,
        "curriculum": {"budget": 48, "group_size": 4},
        "grpo": {"learning_rate": 0.01, "epochs_per_iteration": 4},
        "retrieval": {"corpus_path": str(bundle["corpus"])},
        "paths": {"pool": str(bundle["pool"]), "heldout": str(bundle["heldout"]), "output_dir": str(out)},
    }
    data.update(top)
    return config_from_dict(data)


def test_desk_config_loads():
    cfg = load_config(REPO / "configs" / "desk.yaml")
    assert cfg.curriculum.group_size == 8 and cfg.curriculum.budget == 200
    assert cfg.grpo.eps_low == 0.2 and cfg.grpo.eps_high == 0.3
    assert cfg.retrieval.k == 3
    assert Path(cfg.paths.pool).is_absolute()
    assert Path(cfg.paths.pool).resolve() == (REPO / "data" / "synthetic" / "pool.jsonl").resolve()


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"curriculum": {"budgte": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"grpo": {"eps_low": 0.5, "eps_high": 0.3}})
    bad = tmp_path / "bad.yaml"
    bad.write_text("grpo: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_relative_paths_resolve_against_file(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.yaml"
    p.write_text(yaml.safe_dump({"paths": {"pool": "pool.jsonl", "output_dir": "../out"}}))
    cfg = load_config(p)
    assert cfg.paths.pool == str(tmp_path / "sub" / "pool.jsonl")
    assert Path(cfg.paths.output_dir).resolve() == (tmp_path / "out").resolve()


def test_hash_ignores_output_dir_only():
    a = RunConfig()
    b = replace(a, paths=replace(a.paths, output_dir="elsewhere"))
    c = replace(a, seed=1)
    assert a.hash() == b.hash()
    assert a.hash() != c.hash()


def test_make_retriever_variants(bundle, tmp_path):
    from toolverify.retrieval import build_index, load_corpus

    cfg = config_from_dict({"retrieval": {"corpus_path": str(bundle["corpus"])}})
    jsonl = make_retriever(cfg)
    saved = build_index(load_corpus(bundle["corpus"])).save(tmp_path / "idx")
    again = make_retriever(config_from_dict({"retrieval": {"corpus_path": str(saved)}}))
    assert jsonl.information("7 plus 5") == again.information("7 plus 5")
    with pytest.raises(ConfigError):
        make_retriever(config_from_dict({"retrieval": {"backend": "remote"}}))
    with pytest.raises(ConfigError):
        make_retriever(RunConfig())


def test_checkpoint_shape_checked(tmp_path):
    bad = tmp_path / "bad.npy"
    np.save(bad, np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        make_policy(RunConfig(), str(bad))


def test_non_toy_backend_rejected(bundle, tmp_path):
    cfg = small_config(bundle, tmp_path / "r", policy={"backend": "remote", "base_url": "http://x/v1"})
    with pytest.raises(ConfigError):
        run_iterations(cfg)


@pytest.mark.slow
def test_single_iteration_beats_baseline(bundle, tmp_path):
    cfg = config_from_dict(
        {
            "max_iterations": 1,
            "curriculum": {"budget": 200, "group_size": 8},
            "grpo": {"learning_rate": 0.01, "epochs_per_iteration": 20},
            "retrieval": {"corpus_path": str(bundle["corpus"])},
            "paths": {"pool": str(bundle["pool"]), "heldout": str(bundle["heldout"]), "output_dir": str(tmp_path / "one")},
        }
    )
    records = run_iterations(cfg)
    baseline = json.loads((tmp_path / "one" / "run.json").read_text())["baseline_eval_accuracy"]
    assert len(records) == 1
    assert records[0].eval_accuracy > baseline


def test_run_artifacts_and_determinism(bundle, tmp_path):
    a = run_iterations(small_config(bundle, tmp_path / "a"))
    b = run_iterations(small_config(bundle, tmp_path / "b"))
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    out = tmp_path / "a"
    for name in ("run.json", "records.jsonl", "metrics.jsonl", "timings.jsonl", "rollouts_001.jsonl",
                 "curriculum_002.json", "checkpoints/iter_002.npy"):
        assert (out / name).exists(), name
    assert (out / "records.jsonl").read_bytes() == (tmp_path / "b" / "records.jsonl").read_bytes()
    manifest = json.loads((out / "curriculum_001.json").read_text())
    rollouts = [json.loads(l) for l in (out / "rollouts_001.jsonl").read_text().splitlines()]
    # every retained instance has a persisted group with non-zero reward variance
    by_id: dict[str, set] = {}
    for row in rollouts:
        by_id.setdefault(row["instance_id"], set()).add(row["reward"]["total"])
    assert set(by_id) == set(manifest["retained_instance_ids"])
    assert all(len(v) > 1 for v in by_id.values())
    metric = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
    assert {"iteration", "step", "objective", "mean_reward", "clip_fraction", "grad_norm"} <= set(metric)


def test_resume_is_byte_identical(bundle, tmp_path):
    full = tmp_path / "full"
    run_iterations(small_config(bundle, full))
    part = tmp_path / "part"
    first = run_iterations(small_config(bundle, part), stop_after=1)
    assert len(first) == 1
    second = run_iterations(small_config(bundle, part))
    assert [r.iteration for r in second] == [1, 2]
    for name in ("records.jsonl", "metrics.jsonl", "rollouts_002.jsonl", "curriculum_002.json"):
        assert (part / name).read_bytes() == (full / name).read_bytes(), name
    assert np.array_equal(np.load(part / "checkpoints/iter_002.npy"), np.load(full / "checkpoints/iter_002.npy"))


def test_resume_with_other_config_refused(bundle, tmp_path):
    out = tmp_path / "m"
    run_iterations(small_config(bundle, out, max_iterations=1))
    with pytest.raises(ResumeMismatchError):
        run_iterations(small_config(bundle, out, max_iterations=1, seed=9))
