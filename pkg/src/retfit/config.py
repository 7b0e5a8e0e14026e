"""Pipeline configuration: one declarative JSON file drives every stage.

Environment variables are expanded in path fields only (os.path.expandvars),
so a config can say "$DATA/corpus.jsonl"; everything else is literal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .loss import LossConfig
from .negatives import MiningConfig
from .trainer import TrainConfig

INPUT_PATH_KEYS = (
    "corpus",
    "queries",
    "query_embeddings",
    "passage_embeddings",
    "eval_query_embeddings",
    "teacher_scores",
    "qrels",
)


@dataclass
class RetrievalConfig:
    filter_depth: int = 20
    eval_k: int = 100
    run_tag: str = "retfit"

    def __post_init__(self) -> None:
        if self.filter_depth < 1 or self.eval_k < 1:
            raise ConfigError("retrieval depths must be >= 1")


@dataclass
class PipelineConfig:
    paths: dict[str, Path]
    mining: MiningConfig = field(default_factory=MiningConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    seed: int = 0
    deterministic: bool = False
    log_level: str = "info"
    raw: dict = field(default_factory=dict)

    @property
    def output_dir(self) -> Path:
        return self.paths["output_dir"]


def _build_section(cls, data: dict, name: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}' section: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except Exception as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def load_config(
    path: str | Path,
    seed_override: int | None = None,
    deterministic_override: bool | None = None,
    log_level_override: str | None = None,
) -> PipelineConfig:
    """Parse, validate, and resolve a pipeline config file.

    Referenced input paths must exist at validation time; the output
    directory is created if needed.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    known_top = {"paths", "mining", "loss", "train", "retrieval", "seed", "deterministic", "log_level"}
    unknown = set(data) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {', '.join(sorted(unknown))}")
    if "paths" not in data or not isinstance(data["paths"], dict):
        raise ConfigError("config needs a 'paths' object")

    raw_paths = data["paths"]
    unknown_paths = set(raw_paths) - set(INPUT_PATH_KEYS) - {"output_dir"}
    if unknown_paths:
        raise ConfigError(f"unknown path key(s): {', '.join(sorted(unknown_paths))}")
    if "output_dir" not in raw_paths:
        raise ConfigError("paths.output_dir is required")
    paths = {k: Path(os.path.expandvars(str(v))) for k, v in raw_paths.items()}
    for key in INPUT_PATH_KEYS:
        if key in paths and not paths[key].exists():
            raise ConfigError(f"paths.{key} does not exist: {paths[key]}")

    seed = int(data.get("seed", 0)) if seed_override is None else seed_override
    train_section = dict(data.get("train", {}))
    loss_section = dict(data.get("loss", {}))
    if seed_override is not None:
        train_section["seed"] = seed_override
    else:
        train_section.setdefault("seed", seed)
    loss_cfg = _build_section(LossConfig, loss_section, "loss")
    train_section["loss"] = loss_cfg
    cfg = PipelineConfig(
        paths=paths,
        mining=_build_section(MiningConfig, dict(data.get("mining", {})), "mining"),
        loss=loss_cfg,
        train=_build_section(TrainConfig, train_section, "train"),
        retrieval=_build_section(RetrievalConfig, dict(data.get("retrieval", {})), "retrieval"),
        seed=seed,
        deterministic=(
            bool(data.get("deterministic", False))
            if deterministic_override is None
            else deterministic_override
        ),
        log_level=(
            str(data.get("log_level", "info")) if log_level_override is None else log_level_override
        ),
        raw=data,
    )
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(cfg.output_dir, os.W_OK):
        raise ConfigError(f"output directory is not writable: {cfg.output_dir}")
    return cfg


def require_paths(cfg: PipelineConfig, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg.paths]
    if missing:
        raise ConfigError(f"config is missing required path(s): {', '.join(missing)}")
