"""Declarative network descriptions: layer definitions, split markers, JSON io.

A ``NetSpec`` is an ordered list of layer definitions plus named split
markers sitting between layers.  Markers partition the net into a cascade
of subnets; the graph builder fans the net out into branches at marker
positions.  Shapes here are per-example (no batch axis).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class DenseDef:
    in_features: int
    out_features: int
    kind: str = "dense"


@dataclass(frozen=True)
class ConvDef:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    kind: str = "conv"


@dataclass(frozen=True)
class ReluDef:
    kind: str = "relu"


@dataclass(frozen=True)
class AvgPoolDef:
    size: int
    kind: str = "avgpool"


@dataclass(frozen=True)
class FlattenDef:
    kind: str = "flatten"


_LAYER_KINDS = {
    "dense": DenseDef,
    "conv": ConvDef,
    "relu": ReluDef,
    "avgpool": AvgPoolDef,
    "flatten": FlattenDef,
}


def layer_from_json(obj: dict):
    kind = obj.get("kind")
    if kind not in _LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    fields = {k: v for k, v in obj.items() if k != "kind"}
    try:
        return _LAYER_KINDS[kind](**fields)
    except TypeError as exc:
        raise ConfigError(f"bad fields for layer kind {kind!r}: {exc}") from None


def layer_to_json(defn) -> dict:
    out = {"kind": defn.kind}
    for name in defn.__dataclass_fields__:
        if name != "kind":
            out[name] = getattr(defn, name)
    return out


def layer_out_shape(defn, in_shape: tuple, index: int) -> tuple:
    """Per-example output shape, or ConfigError naming the offending layer."""

    def fail(msg):
        raise ConfigError(f"layer {index} ({defn.kind}): {msg}")

    if isinstance(defn, DenseDef):
        if len(in_shape) != 1:
            fail(f"needs a flat input, got shape {in_shape}")
        if in_shape[0] != defn.in_features:
            fail(f"in_features={defn.in_features} but input has {in_shape[0]}")
        return (defn.out_features,)
    if isinstance(defn, ConvDef):
        if len(in_shape) != 3:
            fail(f"needs a CHW input, got shape {in_shape}")
        c, h, w = in_shape
        if c != defn.in_channels:
            fail(f"in_channels={defn.in_channels} but input has {c}")
        oh = (h + 2 * defn.pad - defn.kernel) // defn.stride + 1
        ow = (w + 2 * defn.pad - defn.kernel) // defn.stride + 1
        if oh < 1 or ow < 1:
            fail(f"kernel {defn.kernel} does not fit {h}x{w} with pad {defn.pad}")
        return (defn.out_channels, oh, ow)
    if isinstance(defn, ReluDef):
        return in_shape
    if isinstance(defn, AvgPoolDef):
        if len(in_shape) != 3:
            fail(f"needs a CHW input, got shape {in_shape}")
        c, h, w = in_shape
        if h % defn.size or w % defn.size:
            fail(f"window {defn.size} does not divide {h}x{w}")
        return (c, h // defn.size, w // defn.size)
    if isinstance(defn, FlattenDef):
        n = 1
        for d in in_shape:
            n *= d
        return (n,)
    fail("unsupported layer definition")


def layer_param_count(defn) -> int:
    if isinstance(defn, DenseDef):
        return defn.in_features * defn.out_features + defn.out_features
    if isinstance(defn, ConvDef):
        return defn.out_channels * defn.in_channels * defn.kernel * defn.kernel + defn.out_channels
    return 0


@dataclass(frozen=True)
class SplitMarker:
    """Named boundary between layers; ``after_layer`` layers lie below it."""

    name: str
    after_layer: int


@dataclass
class NetSpec:
    input_shape: tuple
    num_classes: int
    layers: list = field(default_factory=list)
    splits: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.layers:
            raise ConfigError("NetSpec needs at least one layer")
        if any(d < 1 for d in self.input_shape):
            raise ConfigError(f"bad input shape {self.input_shape}")
        shapes = self.infer_shapes()
        if shapes[-1] != (self.num_classes,):
            raise ConfigError(
                f"final layer produces shape {shapes[-1]}, expected ({self.num_classes},)"
            )
        positions = [s.after_layer for s in self.splits]
        names = [s.name for s in self.splits]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate split marker names: {names}")
        if positions != sorted(positions) or len(set(positions)) != len(positions):
            raise ConfigError(f"split markers must be strictly ordered, got {positions}")
        for s in self.splits:
            if not 0 <= s.after_layer < len(self.layers):
                raise ConfigError(
                    f"split {s.name!r} at {s.after_layer} outside [0, {len(self.layers)})"
                )

    def infer_shapes(self) -> list:
        """Shapes threaded through the layers: len(layers)+1 entries."""
        shapes = [self.input_shape]
        for i, defn in enumerate(self.layers):
            shapes.append(layer_out_shape(defn, shapes[-1], i))
        return shapes

    def split_position(self, name: str) -> int:
        for s in self.splits:
            if s.name == name:
                return s.after_layer
        raise ConfigError(f"unknown split marker {name!r}")

    def param_count(self) -> int:
        return sum(layer_param_count(d) for d in self.layers)

    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer_to_json(d) for d in self.layers],
            "splits": [{"name": s.name, "after_layer": s.after_layer} for s in self.splits],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NetSpec":
        try:
            layers = [layer_from_json(item) for item in obj["layers"]]
            splits = [SplitMarker(s["name"], int(s["after_layer"])) for s in obj.get("splits", [])]
            return cls(
                input_shape=tuple(obj["input_shape"]),
                num_classes=int(obj["num_classes"]),
                layers=layers,
                splits=splits,
            )
        except KeyError as exc:
            raise ConfigError(f"NetSpec document missing field {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "NetSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))
