"""Run configuration: nested dataclasses loaded from a YAML file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .curriculum import CurriculumConfig
from .drgrpo import GrpoConfig
from .errors import ConfigError
from .rollout import RolloutLimits


@dataclass(frozen=True)
class RetrievalConfig:
    backend: str = "lexical"
    k: int = 3
    corpus_path: Optional[str] = None
    endpoint: Optional[str] = None
    max_chars: int = 1000
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.backend not in ("lexical", "remote"):
            raise ValueError(f"unknown retrieval backend {self.backend!r}")
        if self.k < 1:
            raise ValueError("retrieval.k must be positive")


@dataclass(frozen=True)
class PolicyConfig:
    backend: str = "toy"
    feature_dim: int = 4096
    prior_strength: float = 8.0
    prior_bias: float = 4.0
    prior_noise: float = 0.01
    base_url: Optional[str] = None
    model: str = "verifier"
    max_in_flight: int = 8

    def __post_init__(self) -> None:
        if self.backend not in ("toy", "remote"):
            raise ValueError(f"unknown policy backend {self.backend!r}")


@dataclass(frozen=True)
class PathsConfig:
    pool: Optional[str] = None
    heldout: Optional[str] = None
    output_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    max_iterations: int = 2
    batch_size: int = 32
    seed: int = 0
    workers: int = 1
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    rollout: RolloutLimits = field(default_factory=RolloutLimits)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything except where outputs go."""
        d = self.to_dict()
        d["paths"] = {k: v for k, v in d["paths"].items() if k != "output_dir"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _build(cls: type, data: Any, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path: str | Path) -> RunConfig:
    """Load YAML; relative paths inside are resolved against the file's directory."""
    p = Path(path)
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    base = p.resolve().parent
    for section, keys in (("paths", ("pool", "heldout", "output_dir")), ("retrieval", ("corpus_path",))):
        sect = data.get(section) or {}
        for key in keys:
            if isinstance(sect.get(key), str) and not Path(sect[key]).is_absolute():
                sect[key] = str(base / sect[key])
    return config_from_dict(data)
