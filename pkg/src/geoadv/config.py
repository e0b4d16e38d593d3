"""Experiment configuration: a TOML file validated into dataclasses.

Every section is optional and falls back to its defaults; unknown sections or
keys are rejected before any work starts.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attack import AttackConfig
from .defense import DefenseConfig
from .training import ConfigError, DatasetSpec, TrainConfig


@dataclass
class DatasetSection:
    classes: list = field(default_factory=lambda: ["sphere", "box", "torus", "cylinder"])
    per_class: int = 200
    n: int = 256
    seed: int = 0
    split: list = field(default_factory=lambda: [0.85, 0.05, 0.10])

    def spec(self) -> DatasetSpec:
        return DatasetSpec(tuple(self.classes), self.per_class, self.n, self.seed, tuple(self.split))


@dataclass
class AESection:
    width_factor: float = 0.25
    m: int = 32
    seed: int = 0
    transfer_seed: int = 1
    epochs: int = 100
    batch_size: int = 25
    lr: float = 0.0005

    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.seed)


@dataclass
class ClassifierSection:
    epochs: int = 30
    batch_size: int = 25
    lr: float = 0.001
    seed: int = 0

    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.seed)


@dataclass
class AttackSection:
    lam_latent: Optional[float] = None
    lam_output: Optional[float] = None
    steps: int = 500
    lr: float = 0.01
    keep_best_from: int = 400
    candidates: int = 5
    distance_loss: str = "chamfer"
    beta: float = 0.0
    target_selection: str = "geometric"
    gamma: float = 0.05
    rebalance: bool = True
    sources_per_class: int = 3
    lambda_sweep: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    detection_sources_per_class: int = 10
    seed: int = 0
    workers: int = 1

    def config(self, mode: str, lam: Optional[float] = None, candidates: Optional[int] = None) -> AttackConfig:
        if lam is None:
            lam = self.lam_latent if mode == "latent" else self.lam_output
        return AttackConfig(
            mode=mode,
            lam=lam,
            steps=self.steps,
            lr=self.lr,
            keep_best_from=self.keep_best_from,
            candidates=self.candidates if candidates is None else candidates,
            distance_loss=self.distance_loss,
            beta=self.beta,
            target_selection=self.target_selection,
            gamma=self.gamma,
            rebalance=self.rebalance,
        ).validate()


@dataclass
class DefenseSection:
    k: int = 2
    delta: float = 0.04
    delta_scale: Union[float, str] = "auto"  # "auto" calibrates against clean training clouds
    calibration_quantile: float = 0.99
    calibration_margin: float = 1.05
    grid_k: list = field(default_factory=lambda: [1, 2, 4, 8])
    grid_delta: list = field(default_factory=lambda: [0.03, 0.04, 0.05, 0.06])
    detection_epochs: int = 60
    detection_lr: float = 0.001

    def config(self, kind: str, scale: float) -> DefenseConfig:
        return DefenseConfig(kind, self.k, self.delta, scale).validate()


@dataclass
class OutputsSection:
    directory: str = "runs"
    cloud_format: str = "xyz"
    name: str = "experiment"


SECTIONS = {
    "dataset": DatasetSection,
    "ae": AESection,
    "classifier": ClassifierSection,
    "attack": AttackSection,
    "defense": DefenseSection,
    "outputs": OutputsSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    ae: AESection = field(default_factory=AESection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    outputs: OutputsSection = field(default_factory=OutputsSection)
    source: Optional[Path] = None

    @classmethod
    def from_dict(cls, raw: dict, source: Optional[Path] = None) -> "ExperimentConfig":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        parts = {}
        for name, section in SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a table")
            allowed = {f.name for f in fields(section)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
            parts[name] = section(**values)
        cfg = cls(**parts, source=source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw, path)

    def validate(self) -> None:
        ds = self.dataset
        if len(ds.classes) < 2 or len(set(ds.classes)) != len(ds.classes):
            raise ConfigError("dataset needs at least two distinct classes")
        if ds.per_class < 1 or ds.n < 8 or len(ds.split) != 3:
            raise ConfigError("dataset: per_class >= 1, n >= 8 and a three-way split are required")
        self.ae.train().validate()
        self.classifier.train().validate()
        if self.ae.m < 1 or not self.ae.width_factor > 0:
            raise ConfigError("ae: m >= 1 and width_factor > 0 required")
        for mode in ("latent", "output"):
            self.attack.config(mode)
        if any(not lam >= 0 for lam in self.attack.lambda_sweep):
            raise ConfigError("attack: lambda_sweep values must be >= 0")
        if self.attack.sources_per_class < 1 or self.attack.workers < 1:
            raise ConfigError("attack: sources_per_class and workers must be >= 1")
        scale = self.defense.delta_scale
        if not (scale == "auto" or (isinstance(scale, (int, float)) and scale > 0)):
            raise ConfigError("defense: delta_scale must be 'auto' or a positive number")
        for kind in ("surface", "critical"):
            self.defense.config(kind, 1.0)
        if self.outputs.cloud_format not in ("xyz", "ply"):
            raise ConfigError("outputs: cloud_format must be xyz or ply")

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        """Hash of everything that influences results; the outputs section is excluded."""
        body = {k: v for k, v in self.to_dict().items() if k != "outputs"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def run_dir(self, root: Optional[Path] = None) -> Path:
        base = Path(self.outputs.directory) if root is None else Path(root)
        if not base.is_absolute() and self.source is not None:
            base = self.source.parent / base
        return base / f"{self.outputs.name}-{self.digest()[:12]}"
