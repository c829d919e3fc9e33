"""Experiment configuration: a single YAML file validated up front, with
CLI overrides and a stable content hash for provenance."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .core import PairSpec, derive_seed, trigger_from_seed
from .defense import DefenseConfig
from .interpret import CNN_METHODS, ROLLOUT_GRAD, VIT_METHODS
from .models import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; reported before any compute starts."""


@dataclass
class DatasetSpec:
    name: str = "synthetic"          # "synthetic" or "folder"
    path: str | None = None
    image_hw: tuple[int, int] = (32, 32)
    channels: int = 3
    class_count: int = 10
    train_per_class: int = 100
    val_per_class: int = 40


@dataclass
class ModelSpec:
    arch: str = "vit"                # "vit" or "cnn"
    patch_size: int = 4
    embed_dim: int = 128
    depth: int = 6
    head_count: int = 4
    mlp_ratio: float = 2.0
    conv_channels: tuple[int, ...] = (32, 64, 128, 128)
    conv_strides: tuple[int, ...] = (1, 2, 2, 1)
    kernel_size: int = 3

    def dims(self) -> dict:
        if self.arch == "vit":
            return {"patch_size": self.patch_size, "embed_dim": self.embed_dim,
                    "depth": self.depth, "head_count": self.head_count,
                    "mlp_ratio": self.mlp_ratio}
        return {"conv_channels": tuple(self.conv_channels),
                "conv_strides": tuple(self.conv_strides),
                "kernel_size": self.kernel_size}


@dataclass
class AttackSpec:
    kind: str = "htba"               # "htba" or "badnets"
    epsilon_255: int = 32            # L-inf budget in 1/255 units
    step_size: float = 1.0
    max_iters: int = 5000
    poison_count: int = 20
    badnets_rate: float = 0.01
    trigger_size_px: int = 4
    trigger_seed: int | None = None  # default derived from master_seed


@dataclass
class DefenseSpec:
    enabled: bool = True
    block_size_px: int = 4
    interpretation_method: str = ROLLOUT_GRAD
    train_block_probability: float = 0.5

    def to_config(self) -> DefenseConfig:
        return DefenseConfig(block_size_px=self.block_size_px,
                             interpretation_method=self.interpretation_method,
                             train_block_probability=self.train_block_probability)


@dataclass
class StageTrainSpec:
    epochs: int = 10
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    optimizer: str = "sgd"

    def to_config(self, seed: int, freeze_backbone: bool) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                           momentum=self.momentum, batch_size=self.batch_size,
                           freeze_backbone=freeze_backbone, seed=seed,
                           optimizer=self.optimizer)


@dataclass
class EvalSpec:
    val_subsample: int | None = None      # per-class cap on val images
    source_subsample: int | None = None   # cap on source-class eval images
    sweep_sizes: tuple[int, ...] = ()


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    train_clean: StageTrainSpec = field(default_factory=lambda: StageTrainSpec(
        epochs=20, learning_rate=1e-3, optimizer="adamw"))
    finetune: StageTrainSpec = field(default_factory=StageTrainSpec)
    pairs: tuple[PairSpec, ...] = (PairSpec(3, 7),)
    master_seed: int = 0
    output_dir: str = "runs/experiment"
    workers: int = 1
    train_blocking: bool = False
    eval: EvalSpec = field(default_factory=EvalSpec)

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        d = self.dataset
        if d.name not in ("synthetic", "folder"):
            raise ConfigError(f"dataset.name must be 'synthetic' or 'folder', got {d.name!r}")
        if d.name == "folder":
            if not d.path:
                raise ConfigError("dataset.path required for folder datasets")
            if not Path(d.path).is_dir():
                raise ConfigError(f"dataset path does not exist: {d.path}")
        if d.channels not in (1, 3):
            raise ConfigError("dataset.channels must be 1 or 3")
        if d.image_hw[0] < 8 or d.image_hw[1] < 8:
            raise ConfigError("image sides must be >= 8")
        if not 2 <= d.class_count <= 1000:
            raise ConfigError("class_count out of range")

        m = self.model
        if m.arch not in ("vit", "cnn"):
            raise ConfigError(f"model.arch must be 'vit' or 'cnn', got {m.arch!r}")
        if m.arch == "vit" and (d.image_hw[0] % m.patch_size or d.image_hw[1] % m.patch_size):
            raise ConfigError("image dims must be divisible by the ViT patch size")

        a = self.attack
        if a.kind not in ("htba", "badnets"):
            raise ConfigError(f"attack.kind must be 'htba' or 'badnets', got {a.kind!r}")
        if not 0 < a.epsilon_255 < 255:
            raise ConfigError("attack.epsilon_255 must be in (0, 255)")
        if a.step_size <= 0:
            raise ConfigError("attack.step_size must be > 0")
        if a.max_iters < 1:
            raise ConfigError("attack.max_iters must be >= 1")
        if a.poison_count < 1:
            raise ConfigError("attack.poison_count must be >= 1")
        if not 0 < a.badnets_rate <= 1:
            raise ConfigError("attack.badnets_rate must be in (0, 1]")
        if not 2 <= a.trigger_size_px <= min(d.image_hw):
            raise ConfigError("attack.trigger_size_px must fit the image and be >= 2")

        f = self.defense
        if f.block_size_px < 1 or f.block_size_px > min(d.image_hw):
            raise ConfigError("defense.block_size_px must fit the image")
        if f.interpretation_method not in VIT_METHODS + CNN_METHODS:
            raise ConfigError(f"unknown interpretation method {f.interpretation_method!r}")
        vit_method = f.interpretation_method in VIT_METHODS
        if f.enabled and vit_method != (m.arch == "vit"):
            raise ConfigError(f"interpretation method {f.interpretation_method!r} "
                              f"does not apply to a {m.arch} model")
        if not 0 <= f.train_block_probability <= 1:
            raise ConfigError("train_block_probability must be in [0, 1]")

        for stage, spec in (("train_clean", self.train_clean), ("finetune", self.finetune)):
            if spec.epochs < 1:
                raise ConfigError(f"{stage}.epochs must be >= 1")
            if spec.learning_rate <= 0:
                raise ConfigError(f"{stage}.learning_rate must be > 0")
            if spec.optimizer not in ("sgd", "adamw"):
                raise ConfigError(f"{stage}.optimizer must be 'sgd' or 'adamw'")

        if not self.pairs:
            raise ConfigError("at least one source-target pair required")
        for pair in self.pairs:
            if not (0 <= pair.source_class < d.class_count
                    and 0 <= pair.target_class < d.class_count):
                raise ConfigError(f"pair {pair} outside class range")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for size in self.eval.sweep_sizes:
            if not 1 <= size <= min(d.image_hw):
                raise ConfigError(f"sweep size {size} does not fit the image")
        if list(self.eval.sweep_sizes) != sorted(set(self.eval.sweep_sizes)):
            raise ConfigError("sweep sizes must be strictly increasing")
        return self

    # -- derived values -----------------------------------------------------

    @property
    def epsilon(self) -> float:
        return self.attack.epsilon_255 / 255.0

    def trigger(self):
        seed = self.attack.trigger_seed
        if seed is None:
            seed = derive_seed(self.master_seed, "trigger")
        return trigger_from_seed(seed, self.attack.trigger_size_px, self.dataset.channels)

    def to_json(self) -> dict:
        data = asdict(self)
        data["pairs"] = [[p.source_class, p.target_class] for p in self.pairs]
        return data

    def config_hash(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _coerce(cls, data: dict, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kwargs = dict(data)
    for key in ("image_hw", "conv_channels", "conv_strides", "sweep_sizes"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    pairs_raw = data.pop("pairs", None)
    sections = {
        "dataset": DatasetSpec, "model": ModelSpec, "attack": AttackSpec,
        "defense": DefenseSpec, "train_clean": StageTrainSpec,
        "finetune": StageTrainSpec, "eval": EvalSpec,
    }
    kwargs = {}
    for key, cls in sections.items():
        if key in data:
            kwargs[key] = _coerce(cls, data.pop(key), key)
    for key in ("master_seed", "output_dir", "workers", "train_blocking"):
        if key in data:
            kwargs[key] = data.pop(key)
    if data:
        raise ConfigError(f"unknown top-level config keys: {sorted(data)}")
    if pairs_raw is not None:
        try:
            kwargs["pairs"] = tuple(PairSpec(int(s), int(t)) for s, t in pairs_raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"pairs must be [source, target] lists: {exc}") from exc
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path, seed: int | None = None, workers: int | None = None,
                output_dir: str | None = None) -> ExperimentConfig:
    """Parse and validate a YAML config; CLI flags override file fields."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    cfg = config_from_dict(raw)
    if seed is not None:
        cfg.master_seed = seed
    if workers is not None:
        cfg.workers = workers
    if output_dir is not None:
        cfg.output_dir = output_dir
    return cfg.validate()
