"""Experiment configuration: one JSON document drives a whole run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..data import AugmentPolicy, DatasetConfig, NoiseSpec
from ..errors import ConfigError
from ..graphs import HeadPattern
from ..losses import CollabLossConfig
from ..netspec import NetSpec
from ..optim import SgdConfig
from .presets import PRESET_NETS


def resolve_net(obj) -> tuple:
    """Accept a preset name, a file reference, or an inline document."""
    if isinstance(obj, NetSpec):
        return obj, "inline"
    if not isinstance(obj, dict):
        raise ConfigError(f"net section must be an object, got {type(obj).__name__}")
    if "preset" in obj:
        name = obj["preset"]
        if name not in PRESET_NETS:
            raise ConfigError(f"unknown net preset {name!r}; have {sorted(PRESET_NETS)}")
        return PRESET_NETS[name](), f"preset:{name}"
    if "file" in obj:
        return NetSpec.load(obj["file"]), f"file:{obj['file']}"
    return NetSpec.from_json(obj), "inline"


@dataclass
class LossSettings:
    """The tunable part of the objective; head count and decay join later."""

    beta: float = 0.5
    temperature: float = 2.0
    scaling_mode: str = "backprop-rescale"
    backprop_through_consensus: bool = False

    def to_json(self) -> dict:
        return {
            "beta": self.beta,
            "temperature": self.temperature,
            "scaling_mode": self.scaling_mode,
            "backprop_through_consensus": self.backprop_through_consensus,
        }

    @classmethod
    def from_json(cls, obj) -> "LossSettings":
        return cls(**obj)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    net: NetSpec
    out_dir: str
    net_ref: str = "inline"
    pattern: HeadPattern = field(default_factory=lambda: HeadPattern("individual"))
    loss: LossSettings = field(default_factory=LossSettings)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    epochs: int = 30
    batch_size: int = 32
    seeds: list = field(default_factory=lambda: [0])
    eval_batch_size: int = 512
    histogram_bins: int = 51

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if self.histogram_bins < 1:
            raise ConfigError(f"histogram_bins must be >= 1, got {self.histogram_bins}")
        if self.pattern.heads == 1 and self.loss.beta != 1.0:
            # an individual head has no peers to learn from
            self.loss.beta = 1.0

    def loss_config(self) -> CollabLossConfig:
        return CollabLossConfig(
            num_heads=self.pattern.heads,
            beta=self.loss.beta,
            temperature=self.loss.temperature,
            weight_decay=self.sgd.weight_decay,
            scaling_mode=self.loss.scaling_mode,
            backprop_through_consensus=self.loss.backprop_through_consensus,
        )

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset.to_json(),
            "net": self.net.to_json(),
            "net_ref": self.net_ref,
            "pattern": self.pattern.to_json(),
            "loss": self.loss.to_json(),
            "sgd": self.sgd.to_json(),
            "noise": self.noise.to_json(),
            "augment": self.augment.to_json(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "eval_batch_size": self.eval_batch_size,
            "histogram_bins": self.histogram_bins,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        try:
            dataset = DatasetConfig.from_json(obj["dataset"])
            net, net_ref = resolve_net(obj["net"])
        except KeyError as exc:
            raise ConfigError(f"experiment config missing section {exc}") from None
        net_ref = obj.get("net_ref", net_ref)
        return cls(
            dataset=dataset,
            net=net,
            net_ref=net_ref,
            out_dir=obj.get("out_dir", "runs/experiment"),
            pattern=HeadPattern.from_json(obj.get("pattern", {"variant": "individual"})),
            loss=LossSettings.from_json(obj.get("loss", {})),
            sgd=SgdConfig(**obj.get("sgd", {})),
            noise=NoiseSpec.from_json(obj.get("noise", {})),
            augment=AugmentPolicy.from_json(obj.get("augment", {})),
            epochs=int(obj.get("epochs", 30)),
            batch_size=int(obj.get("batch_size", 32)),
            seeds=[int(s) for s in obj.get("seeds", [0])],
            eval_batch_size=int(obj.get("eval_batch_size", 512)),
            histogram_bins=int(obj.get("histogram_bins", 51)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def clone(self, **overrides) -> "ExperimentConfig":
        """Copy with JSON-level overrides (nested sections replaced wholesale)."""
        doc = self.to_json()
        for key, value in overrides.items():
            doc[key] = value.to_json() if hasattr(value, "to_json") else value
        return ExperimentConfig.from_json(doc)
