"""Pipeline configuration: YAML file with ${ENV} interpolation plus dotted overrides."""
from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import MissingArtifactError, ValidationError
from .evaluation import EvalConfig
from .llm import LlmConfig
from .optim import TrainConfig
from .pipeline import ModelConfig
from .retrieval import RetrievalConfig

_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


@dataclass
class PathsConfig:
    interactions: str = "data/interactions.tsv"
    train_mask: str = "data/train_mask.tsv"
    test_mask: str = "data/test_mask.tsv"
    user_features: str = "data/user_features.crnf"
    item_features: str = "data/item_features.crnf"
    user_texts: str = "data/users.jsonl"
    item_texts: str = "data/items.jsonl"
    workspace: str = "workspace"
    cache_dir: str = "workspace/llm_cache"
    checkpoint_dir: str = "workspace/checkpoints"

    def resolve(self, base: Path) -> "PathsConfig":
        return PathsConfig(**{k: str((base / v) if not Path(v).is_absolute() else Path(v))
                              for k, v in dataclasses.asdict(self).items()})

    def check_inputs(self) -> None:
        """Raw inputs that ingestion cannot do without (masks are optional)."""
        for name in ("interactions", "user_features", "item_features", "user_texts", "item_texts"):
            if not Path(getattr(self, name)).exists():
                raise MissingArtifactError(f"{name} file {getattr(self, name)} not found")


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    retriever_train: TrainConfig = field(default_factory=TrainConfig)
    gnn_train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.llm.dim != self.model.d:
            raise ValidationError(f"llm.dim ({self.llm.dim}) must equal model.d ({self.model.d})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def interpolate(value):
    """Replace ${NAME} / ${NAME:-default} in strings, recursively."""
    if isinstance(value, str):
        def sub(m):
            if m.group(1) in os.environ:
                return os.environ[m.group(1)]
            if m.group(2) is not None:
                return m.group(2)
            raise ValidationError(f"environment variable {m.group(1)} is not set")
        return _ENV.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v) for v in value]
    return value


def _coerce(raw: str):
    # YAML scalar rules: ints, floats, bools, null, lists
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads exponent floats without a dot ("1e-3") as strings
        try:
            return float(value)
        except ValueError:
            pass
    return value


def apply_overrides(data: dict, overrides) -> dict:
    """``["gnn_train.lr=1e-3", ...]`` applied onto a nested dict."""
    for item in overrides or ():
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _coerce(raw)
    return data


def _build(cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValidationError(f"expected a mapping for {cls.__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} key(s): {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


_NESTED = {
    (PipelineConfig, "paths"): PathsConfig,
    (PipelineConfig, "retrieval"): RetrievalConfig,
    (PipelineConfig, "llm"): LlmConfig,
    (PipelineConfig, "eval"): EvalConfig,
    (PipelineConfig, "model"): ModelConfig,
    (PipelineConfig, "retriever_train"): TrainConfig,
    (PipelineConfig, "gnn_train"): TrainConfig,
}


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Read ``path`` (YAML) if given, interpolate env vars, apply overrides.

    Relative paths are resolved against the config file's directory.
    """
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(f"config file {p} not found")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{p}: top level must be a mapping")
        base = p.resolve().parent
    data = apply_overrides(interpolate(data), overrides)
    cfg = _build(PipelineConfig, data)
    cfg.paths = cfg.paths.resolve(base)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
