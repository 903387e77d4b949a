"""Run configuration: one YAML (or JSON) document, every field defaulted.

Schema version 1::

    version: 1
    seed: 0
    buckets:    {sizes: [[h, w], ...], patch_size: 16, capacity: 16384}
    collation:  {drop_prob: 0.0, shuffle: false, figure_patterns: [regex, ...]}
    timesteps:  {world_size: 8, rotation_period: 1, logit_loc: 0.0, logit_scale: 1.0, clamp_eps: 1.0e-5}
    objectives: {dpo_beta: 1.0, dpo_omega: 2.0, dpo_lambda: 0.1, nft_beta: 1.0, sigma_cutoff: 0.9}
    rewards:    {w_text: 0.5, w_layout: 0.5, gate_threshold: 0.8, distance_scale: 1.0,
                 one_sided_scale: false, ensemble_passes: null,
                 mean_min: 0.6, lower_quantile: 0.1, quantile_max: 0.4}
    data:       {n_modes: 8, radius: 10.0, std: 0.5, n_samples: 8192, seed: 0}
    model:      {hidden: 64}
    sampling:   {n_samples: 1024, n_steps: 50}
    stages:     {pretrain: {<TrainConfig field>: value, ...}, sft: {...}, dpo: {...}, nft: {...}}

Unknown keys are rejected at every level. The config hash is the SHA-256 of the
canonical (sorted-key) JSON of the fully resolved document.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from os import PathLike

import yaml

from .bucketing import BucketTable, default_bucket_sizes
from .collation import DEFAULT_FIGURE_PATTERNS, CollationConfig
from .rewards import MiningConfig, OcrRewardConfig
from .timesteps import WeightConfig
from .trainer.data import SyntheticDataset
from .trainer.model import MLPSpec
from .trainer.train import PRESETS, STAGES, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class BucketSection:
    sizes: list = field(default_factory=lambda: [list(s) for s in default_bucket_sizes()])
    patch_size: int = 16
    capacity: int = 16384

    def table(self, capacity: int | None = None) -> BucketTable:
        return BucketTable.from_sizes(self.sizes, self.patch_size, capacity or self.capacity)


@dataclass
class CollationSection:
    drop_prob: float = 0.0
    shuffle: bool = False
    figure_patterns: list = field(default_factory=lambda: list(DEFAULT_FIGURE_PATTERNS))

    def build(self, seed: int, drop_prob=None, shuffle=None) -> CollationConfig:
        return CollationConfig(
            self.drop_prob if drop_prob is None else drop_prob,
            self.shuffle if shuffle is None else shuffle,
            seed,
            tuple(self.figure_patterns),
        )


@dataclass
class TimestepSection:
    world_size: int = 8
    rotation_period: int = 1
    logit_loc: float = 0.0
    logit_scale: float = 1.0
    clamp_eps: float = 1e-5

    def weight_config(self) -> WeightConfig:
        return WeightConfig(self.logit_loc, self.logit_scale, self.clamp_eps)


@dataclass
class ObjectiveSection:
    dpo_beta: float = 1.0
    dpo_omega: float = 2.0
    dpo_lambda: float = 0.1
    nft_beta: float = 1.0
    sigma_cutoff: float = 0.9


@dataclass
class RewardSection:
    w_text: float = 0.5
    w_layout: float = 0.5
    gate_threshold: float = 0.8
    distance_scale: float = 1.0
    one_sided_scale: bool = False
    ensemble_passes: int | None = None
    mean_min: float = 0.6
    lower_quantile: float = 0.1
    quantile_max: float = 0.4

    def ocr(self, **overrides) -> OcrRewardConfig:
        kw = dict(w_text=self.w_text, w_layout=self.w_layout, gate_threshold=self.gate_threshold,
                  distance_scale=self.distance_scale, one_sided_scale=self.one_sided_scale)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return OcrRewardConfig(**kw)

    def mining(self, **overrides) -> MiningConfig:
        kw = dict(mean_min=self.mean_min, lower_quantile=self.lower_quantile,
                  quantile_max=self.quantile_max)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return MiningConfig(**kw)


@dataclass
class DataSection:
    n_modes: int = 8
    radius: float = 10.0
    std: float = 0.5
    n_samples: int = 8192
    seed: int = 0

    def dataset(self) -> SyntheticDataset:
        return SyntheticDataset(self.n_modes, self.radius, self.std, self.n_samples, self.seed)


@dataclass
class ModelSection:
    hidden: int = 64

    def spec(self, data_dim: int = 2) -> MLPSpec:
        return MLPSpec(data_dim, self.hidden)


@dataclass
class SamplingSection:
    n_samples: int = 1024
    n_steps: int = 50


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"stage", "seed"}


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    buckets: BucketSection = field(default_factory=BucketSection)
    collation: CollationSection = field(default_factory=CollationSection)
    timesteps: TimestepSection = field(default_factory=TimestepSection)
    objectives: ObjectiveSection = field(default_factory=ObjectiveSection)
    rewards: RewardSection = field(default_factory=RewardSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    stages: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def train_config(self, stage: str, seed: int | None = None) -> TrainConfig:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        ts, ob = self.timesteps, self.objectives
        base = PRESETS[stage].replace(
            seed=self.seed if seed is None else seed,
            world_size=ts.world_size, rotation_period=ts.rotation_period,
            logit_loc=ts.logit_loc, logit_scale=ts.logit_scale,
            dpo_beta=ob.dpo_beta, dpo_omega=ob.dpo_omega, dpo_lambda=ob.dpo_lambda,
            nft_beta=ob.nft_beta,
        )
        overrides = dict(self.stages.get(stage, {}))
        if overrides.get("preferred_modes") is not None:
            overrides["preferred_modes"] = tuple(overrides["preferred_modes"])
        try:
            return base.replace(**overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"stages.{stage}: {exc}") from None


_SECTIONS = {
    "buckets": BucketSection, "collation": CollationSection, "timesteps": TimestepSection,
    "objectives": ObjectiveSection, "rewards": RewardSection, "data": DataSection,
    "model": ModelSection, "sampling": SamplingSection,
}


def _check_type(value, default, where: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def _section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {k: _check_type(v, getattr(defaults, k), f"{where}.{k}") for k, v in data.items()}
    return cls(**kw)


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - {"version", "seed", "stages", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    version = data.pop("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version!r}")
    seed = _check_type(data.pop("seed", 0), 0, "seed")
    stages = data.pop("stages", {}) or {}
    if not isinstance(stages, dict):
        raise ConfigError("stages: expected a mapping")
    for name, overrides in stages.items():
        if name not in STAGES:
            raise ConfigError(f"stages: unknown stage {name!r}")
        if not isinstance(overrides, dict):
            raise ConfigError(f"stages.{name}: expected a mapping")
        bad = set(overrides) - _TRAIN_FIELDS
        if bad:
            raise ConfigError(f"stages.{name}: unknown keys {sorted(bad)}")
    sections = {k: _section(cls, data.get(k) or {}, k) for k, cls in _SECTIONS.items()}
    cfg = RunConfig(version=version, seed=seed, stages={k: dict(v) for k, v in stages.items()}, **sections)
    # validate eagerly so errors surface at load time
    try:
        cfg.buckets.table()
        cfg.collation.build(cfg.seed)
        cfg.timesteps.weight_config()
        cfg.rewards.ocr()
        cfg.rewards.mining()
        cfg.data.dataset()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for name in cfg.stages:
        cfg.train_config(name)
    return cfg


def load_config(path: str | PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    return config_from_dict(data)
