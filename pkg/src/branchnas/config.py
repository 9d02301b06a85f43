"""Layered run configuration: built-in defaults < profile < file < flags.

The ``full`` profile carries the full-scale hyperparameters. The ``desk``
profile shrinks schedules and dataset sizes so a search fits on one CPU.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    """Shape of the search space. Everything here is part of the genotype fingerprint."""

    branches: int = 4
    num_stages: int = 3
    modules_per_stage: int = 2
    nodes_individual: int = 4
    nodes_aggregation: int = 2
    channels: tuple[int, ...] = (16, 32, 64, 128)
    aggregation: bool = True
    share_branches: bool = False
    share_individual: bool = True
    scale_granularity: str = "stage"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def validate(self) -> None:
        problems = []
        for name in ("branches", "num_stages", "modules_per_stage", "nodes_individual"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.nodes_aggregation < 0:
            problems.append(f"nodes_aggregation must be >= 0, got {self.nodes_aggregation}")
        if len(self.channels) != self.branches:
            problems.append(
                f"channels has {len(self.channels)} entries for {self.branches} branches")
        if any(c < 1 for c in self.channels):
            problems.append("channels must be positive")
        if self.scale_granularity not in ("stage", "module"):
            problems.append(f"scale_granularity must be 'stage' or 'module', "
                            f"got {self.scale_granularity!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def has_aggregation_cells(self) -> bool:
        return self.aggregation and self.nodes_aggregation > 0

    @property
    def num_modules(self) -> int:
        return self.num_stages * self.modules_per_stage

    @property
    def num_scale_vectors(self) -> int:
        if self.scale_granularity == "module":
            return self.num_modules
        return self.num_stages

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


@dataclass
class SupernetConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    input_size: tuple[int, int] = (256, 192)
    num_keypoints: int = 17
    stem_width: int = 64
    tau_start: float = 5.0
    tau_end: float = 0.5
    head_fusion: str = "concat"
    preactivation: bool = False

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)


@dataclass
class SearchConfig:
    epochs: int = 50
    iters_per_epoch: int = 1100
    controller_steps: int = 10
    warmup_epochs: int = 5
    alpha_lr: float = 3e-3
    weight_lr: float = 1e-3
    controller_lr: float = 3.5e-3
    batch_size: int = 16
    reward_batch_size: int = 2
    reward_source: str = "batch"
    controller_samples: int = 1
    controller_hidden: int = 64
    baseline_decay: float = 0.95
    entropy_bonus: float = 1e-4
    val_eval_size: int = 256
    entropy_samples: int = 64
    mode: str = "full"
    seed: int = 0

    def validate(self) -> None:
        for name in ("epochs", "iters_per_epoch", "batch_size", "reward_batch_size",
                     "controller_samples", "controller_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"search.{name} must be positive")
        if self.controller_steps < 0 or self.warmup_epochs < 0:
            raise ConfigError("search.controller_steps and warmup_epochs must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown search mode {self.mode!r}; expected one of {MODES}")
        if self.reward_source not in ("batch", "full"):
            raise ConfigError("search.reward_source must be 'batch' or 'full'")


MODES = ("full", "single-branch", "no-agg", "fixed-four")


@dataclass
class TrainConfig:
    epochs: int = 210
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (170, 200)
    lr_decay: float = 0.1
    batch_size: int = 128
    adam_betas: tuple[float, float] = (0.9, 0.99)
    channel_multiplier: int = 2
    augment: bool = True
    flip_prob: float = 0.5
    max_rotation: float = 45.0
    flip_test: bool = True
    seed: int = 0

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)


@dataclass
class DataConfig:
    source: str = "synthetic"
    image_size: tuple[int, int] = (64, 48)
    train_size: int = 2048
    val_size: int = 512
    limb_thickness: float = 2.5
    noise: float = 0.05
    oks_k: float = 0.25
    seed: int = 0
    coco_annotations: str = ""
    coco_images: str = ""
    coco_val_annotations: str = ""
    coco_val_images: str = ""

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)


@dataclass
class RunConfig:
    profile: str = "full"
    arch: ArchConfig = field(default_factory=ArchConfig)
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        # supernet.arch is always the run-level arch
        self.supernet.arch = self.arch

    def validate(self) -> None:
        self.arch.validate()
        self.search.validate()
        for name, (h, w) in (("supernet.input_size", self.supernet.input_size),
                             ("data.image_size", self.data.image_size)):
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise ConfigError(f"{name} {h}x{w} must be even in both dimensions")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["supernet"].pop("arch")
        return _lists(d)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = copy.deepcopy(d)
        arch = ArchConfig(**d.pop("arch", {}))
        sup = d.pop("supernet", {})
        sup.pop("arch", None)
        return cls(
            profile=d.pop("profile", "full"),
            arch=arch,
            supernet=SupernetConfig(arch=arch, **sup),
            search=SearchConfig(**d.pop("search", {})),
            train=TrainConfig(**d.pop("train", {})),
            data=DataConfig(**d.pop("data", {})),
        )

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def fingerprint(obj: Any) -> str:
    blob = json.dumps(_lists(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# Desk scale: 64x48 synthetic images, short schedules. Scaled lr decay epochs
# keep the 170/210 and 200/210 proportions.
PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "full": {},
    "desk": {
        "arch": {"channels": [8, 16, 32, 64]},
        "supernet": {"input_size": [64, 48], "num_keypoints": 5, "stem_width": 16},
        "search": {
            "epochs": 8,
            "iters_per_epoch": 100,
            "warmup_epochs": 2,
            "controller_steps": 5,
            "batch_size": 16,
            "reward_batch_size": 16,
            "controller_samples": 4,
            "val_eval_size": 128,
        },
        "train": {
            "epochs": 20,
            "batch_size": 32,
            "lr_decay_epochs": [16, 19],
        },
        "data": {"image_size": [64, 48], "train_size": 1024, "val_size": 256},
    },
}


def deep_update(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_update(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def build_config(file_layer: dict | None = None, flag_layer: dict | None = None,
                 profile: str | None = None) -> RunConfig:
    file_layer = file_layer or {}
    flag_layer = flag_layer or {}
    name = profile or flag_layer.get("profile") or file_layer.get("profile") or "full"
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    layered = deep_update(RunConfig().to_dict(), PROFILES[name])
    layered = deep_update(layered, file_layer)
    layered = deep_update(layered, flag_layer)
    layered["profile"] = name
    known = RunConfig().to_dict()
    for section, values in layered.items():
        if section == "profile":
            continue
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(values) - set(known[section])
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    cfg = RunConfig.from_dict(layered)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None, flags: dict | None = None,
                profile: str | None = None) -> RunConfig:
    file_layer = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                file_layer = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return build_config(file_layer, flags, profile)
