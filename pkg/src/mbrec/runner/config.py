"""Experiment configuration: a flat YAML key/value document with strict keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

import yaml

from ..model import ModelConfig, progressive_layers

BASELINES = ("none", "mf_bpr", "unified_lightgcn")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset: Optional[str] = None
    raw: Optional[str] = None
    behaviors: List[str] = field(default_factory=lambda: ["click", "favourite", "purchase"])
    columns: Dict[str, str] = field(default_factory=dict)
    delimiter: str = "\t"
    item_min_purchases: int = 20
    user_min_purchases: int = 5
    train_frac: float = 0.8
    val_frac: float = 0.1
    synthetic: Optional[Dict[str, Any]] = None
    # model
    dim: int = 100
    layers: Optional[Union[List[int], Dict[str, int]]] = None
    global_layers: int = 1
    cascading_input_mode: str = "accumulated"
    enable_cgf: bool = True
    enable_gce: bool = True
    enable_cpa: bool = True
    share_gce_gate: bool = False
    norm_epsilon: float = 1e-12
    dtype: str = "float32"
    # optimisation
    lr: float = 1e-3
    batch_size: int = 500
    max_epochs: int = 1000
    patience: int = 20
    lam: float = 0.01
    beta: float = 1e-3
    tau: float = 0.2
    cpa_full_pool: bool = False
    sampling_mode: str = "uniform_per_behavior"
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    cutoffs: List[int] = field(default_factory=lambda: [5, 10, 15])
    baseline: str = "none"
    baseline_layers: int = 2
    deterministic: bool = False
    save_figures: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.behaviors) < 1:
            raise ConfigError("at least one behavior is required")
        if len(set(self.behaviors)) != len(self.behaviors):
            raise ConfigError(f"duplicate behaviors in {self.behaviors}")
        for name in ("dim", "batch_size", "max_epochs", "global_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("lam", "beta", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        self.layer_counts()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def layer_counts(self, behaviors: Optional[List[str]] = None) -> List[int]:
        """Per-position layer counts; progressive (1..K) unless overridden."""
        behaviors = behaviors or self.behaviors
        if self.layers is None:
            return progressive_layers(len(behaviors))
        if isinstance(self.layers, dict):
            default = progressive_layers(len(behaviors))
            return [int(self.layers.get(b, default[k])) for k, b in enumerate(behaviors)]
        if len(self.layers) != len(behaviors):
            raise ConfigError(f"layers {self.layers} does not match {len(behaviors)} behaviors")
        return [int(x) for x in self.layers]

    def model_config(self, behaviors: Optional[List[str]] = None) -> ModelConfig:
        behaviors = list(behaviors or self.behaviors)
        return ModelConfig(dim=self.dim, behaviors=behaviors,
                           layers=self.layer_counts(behaviors),
                           global_layers=self.global_layers,
                           cascading_input_mode=self.cascading_input_mode,
                           enable_cgf=self.enable_cgf, enable_gce=self.enable_gce,
                           enable_cpa=self.enable_cpa, share_gce_gate=self.share_gce_gate,
                           norm_epsilon=self.norm_epsilon)

    def echo(self) -> List[str]:
        """Resolved configuration as sorted ``config.key=value`` lines."""
        d = dataclasses.asdict(self)
        return [f"config.{k}={yaml.safe_dump(d[k], default_flow_style=True).strip()}"
                .replace("\n...", "") for k in sorted(d)]


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key/value document")
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(dataclasses.asdict(cfg), fh, sort_keys=True)
