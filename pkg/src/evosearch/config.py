"""Namespaced configuration (model.*, rollout.*, grpo.*, opsd.*, pipeline.*) loaded from YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .grpo import GrpoConfig
from .model import ModelConfig
from .opsd import OpsdConfig
from .rollout import PromptTemplate, RolloutConfig
from .warmstart import WarmStartConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 1
    n_entities: int = 1200
    n_relations: int = 6
    n_questions_1hop: int = 700
    n_questions_2hop: int = 420


@dataclass(frozen=True)
class RunConfig:
    n_cycles: int = 2
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = ""
    init_checkpoint: str = ""
    # cycles after the first may use fewer GRPO steps; 0 keeps grpo.steps_per_round
    later_grpo_steps: int = 0
    train_eval_questions: int = 200

    def __post_init__(self):
        if self.n_cycles < 1:
            raise ValueError("n_cycles must be >= 1")


SECTIONS = {
    "model": ModelConfig,
    "rollout": RolloutConfig,
    "grpo": GrpoConfig,
    "opsd": OpsdConfig,
    "warmstart": WarmStartConfig,
    "world": WorldConfig,
    "templates": PromptTemplate,
    "pipeline": RunConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    opsd: OpsdConfig = field(default_factory=OpsdConfig)
    warmstart: WarmStartConfig = field(default_factory=WarmStartConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    templates: PromptTemplate = field(default_factory=PromptTemplate)
    pipeline: RunConfig = field(default_factory=RunConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.pipeline.out_dir)

    @property
    def data_dir(self) -> Path:
        return Path(self.pipeline.data_dir) if self.pipeline.data_dir else self.out_dir / "world"

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def replace(self, **dotted: Any) -> "PipelineConfig":
        return from_mapping(dotted, base=self)


def _flatten(mapping: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and name.split(".")[0] in SECTIONS and "." not in name:
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def from_mapping(mapping: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    grouped: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, value in _flatten(mapping).items():
        section, _, attr = key.partition(".")
        if section not in SECTIONS or not attr:
            raise ConfigError(f"unknown config key {key!r}")
        known = {f.name for f in dataclasses.fields(SECTIONS[section]) if f.init}
        if attr not in known:
            raise ConfigError(f"unknown config key {key!r}")
        grouped[section][attr] = value
    sections = {}
    for name, cls in SECTIONS.items():
        current = getattr(base, name)
        try:
            sections[name] = dataclasses.replace(current, **grouped[name]) if grouped[name] else current
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} settings: {exc}") from exc
    return PipelineConfig(**sections)


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    mapping: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            mapping = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {p}: {exc}") from exc
        if not isinstance(mapping, dict):
            raise ConfigError(f"config {p} must be a mapping")
    cfg = from_mapping(mapping)
    if overrides:
        cfg = from_mapping(overrides, base=cfg)
    return cfg


def dump_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
