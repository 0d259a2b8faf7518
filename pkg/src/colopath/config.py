"""Per-modality hyperparameters and the hashed run configuration."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .transforms import COLONOSCOPY_POLICY, HISTOLOGY_POLICY, AugmentPolicy

DEFAULT_SEEDS = (42, 52, 62, 72, 82)
OUTPUT_ROOT_ENV = "COLOPATH_OUTPUT_ROOT"
NORMALIZATION_SOURCES = ("dataset_empirical", "imagenet_constants")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


@dataclass
class ModalityConfig:
    modality: str
    num_classes: int
    batch_size: int
    max_epochs: int
    early_stop_patience: int
    normalization_source: str
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    lr_init: float = 1e-4
    weight_decay: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 1
    plateau_threshold: float = 1e-8
    early_stop_min_delta: float = 1e-4
    class_weighting: bool = True
    architecture: str = "resnet50"
    pretrained: bool = True
    input_side: int = 224
    hflip_prob: float = 0.5
    max_rotation_deg: float = 0.0
    jitter_strength: float = 0.0
    calibrate: bool = False
    ece_bins: int = 15
    aggregation: str = "majority"
    num_threads: int = 1
    num_workers: int = 0

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        self.validate()

    def validate(self) -> None:
        if self.modality not in ("histology", "colonoscopy"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        for name in ("num_classes", "batch_size", "max_epochs", "early_stop_patience",
                     "lr_init", "plateau_factor", "plateau_patience", "input_side", "ece_bins",
                     "num_threads"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.weight_decay < 0 or self.num_workers < 0:
            raise ConfigError("weight_decay and num_workers must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must be in (0, 1)")
        if self.normalization_source not in NORMALIZATION_SOURCES:
            raise ConfigError(f"normalization_source must be one of {NORMALIZATION_SOURCES}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.aggregation not in ("majority", "mean"):
            raise ConfigError(f"unknown aggregation rule {self.aggregation!r}")
        try:
            self.augment_policy
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.hflip_prob, self.max_rotation_deg, self.jitter_strength)

    @classmethod
    def histology(cls, **overrides) -> "ModalityConfig":
        base = dict(
            modality="histology", num_classes=9, batch_size=128, max_epochs=20,
            early_stop_patience=3, normalization_source="dataset_empirical",
            hflip_prob=HISTOLOGY_POLICY.hflip_prob,
            max_rotation_deg=HISTOLOGY_POLICY.max_rotation_deg,
            jitter_strength=HISTOLOGY_POLICY.jitter_strength,
            calibrate=True,
        )
        return cls(**{**base, **overrides})

    @classmethod
    def colonoscopy(cls, **overrides) -> "ModalityConfig":
        base = dict(
            modality="colonoscopy", num_classes=2, batch_size=64, max_epochs=50,
            early_stop_patience=5, normalization_source="imagenet_constants",
            hflip_prob=COLONOSCOPY_POLICY.hflip_prob,
            max_rotation_deg=COLONOSCOPY_POLICY.max_rotation_deg,
            jitter_strength=COLONOSCOPY_POLICY.jitter_strength,
        )
        return cls(**{**base, **overrides})

    @classmethod
    def for_modality(cls, modality: str, **overrides) -> "ModalityConfig":
        if modality == "histology":
            return cls.histology(**overrides)
        if modality == "colonoscopy":
            return cls.colonoscopy(**overrides)
        raise ConfigError(f"unknown modality {modality!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "ModalityConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "modality" not in data:
            raise ConfigError("config needs a 'modality'")
        try:
            return cls.for_modality(data["modality"], **{k: v for k, v in data.items() if k != "modality"})
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return asdict(self)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data: dict) -> str:
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()[:16]


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class RunConfig:
    """Everything needed to reproduce a run.  ``output_root`` is not hashed."""

    modality: ModalityConfig
    manifest: str
    name: str
    output_root: str = field(default_factory=lambda: str(default_output_root()))
    stats_path: str | None = None
    overrides: dict = field(default_factory=dict)

    def hashed_content(self) -> dict:
        return {
            "modality": self.modality.to_dict(),
            "manifest": self.manifest,
            "name": self.name,
            "stats_path": self.stats_path,
        }

    @property
    def config_hash(self) -> str:
        return config_hash(self.hashed_content())

    @property
    def run_dir(self) -> Path:
        return Path(self.output_root) / self.name

    def seed_dir(self, seed: int) -> Path:
        return self.run_dir / str(seed)

    def to_dict(self) -> dict:
        return {**self.hashed_content(), "output_root": self.output_root,
                "overrides": self.overrides, "config_hash": self.config_hash}

    def write(self, path: str | os.PathLike, **extra) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            return cls(
                modality=ModalityConfig.from_dict(data["modality"]),
                manifest=data["manifest"],
                name=data["name"],
                output_root=data.get("output_root") or str(default_output_root()),
                stats_path=data.get("stats_path"),
                overrides=data.get("overrides", {}),
            )
        except KeyError as e:
            raise ConfigError(f"run config missing key {e}") from e

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e

    def with_modality(self, **changes) -> "RunConfig":
        return replace(self, modality=replace(self.modality, **changes))
