"""TOML run configuration with strict validation: unknown sections or
keys are configuration errors, not silent defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ContractError
from .losses import LossWeights
from .model import ModelConfig
from .synthetic import SyntheticConfig


@dataclass
class SamplerConfig:
    enabled: bool = True
    t: float = 0.07
    gamma_d: float = 0.7
    strict_drop_formula: bool = False


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    steps: int = 200
    seed: int = 0
    grad_accum: int = 1
    checkpoint_every: int = 0  # 0: only the final checkpoint
    lambda_relness: float = 1.0
    shuffle: bool = True


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [20, 50, 100])
    iou_thresh: float = 0.5
    decode_mode: str = "graph_constraint"


@dataclass
class GradcheckConfig:
    d_entity: int = 5
    d_predicate: int = 4
    d_embed: int = 3
    d_hidden_rce: int = 4
    d_visual: int = 4
    n_entity_classes: int = 3
    n_predicate_classes: int = 3
    n_stages: int = 3
    n_iterations: int = 3
    n_entities: int = 4
    seed: int = 0
    epsilon: float = 1e-5
    tolerance: float = 1e-4
    kink_margin: float = 1e-3
    max_reseeds: int = 20


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


def _fill(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ContractError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list) and isinstance(getattr(defaults, key), tuple):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ContractError(f"bad value in [{section}]: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    sections = {
        "model": ModelConfig,
        "sampler": SamplerConfig,
        "loss": LossWeights,
        "train": TrainConfig,
        "eval": EvalConfig,
        "synthetic": SyntheticConfig,
        "gradcheck": GradcheckConfig,
    }
    unknown = set(data) - set(sections)
    if unknown:
        raise ContractError(f"unknown config section(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in sections.items():
        kwargs[name] = _fill(cls, data.get(name, {}), name)
    cfg = RunConfig(**kwargs)
    cfg.model.validate()
    cfg.loss.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ContractError(f"invalid TOML in {path}: {exc}") from None
    return config_from_dict(data)
