"""Multi-head training-graph construction and single-head extraction.

The target network fans out into branches at split markers.  Layers below
a branch point exist once and are shared by every head above them; layers
above it are instantiated per branch with independent seeds.  Under the
``backprop-rescale`` scaling mode, one identity-forward rescale node sits
at each branch point (factor 1/branches), so the gradient reaching shared
layers is the average, not the sum, of the branch gradients.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .errors import ConfigError, ShapeError
from .layers import instantiate
from .netspec import NetSpec

SCALING_MODES = ("none", "loss-scale", "backprop-rescale")

_VARIANT_ALIASES = {
    "multi-instance": "multi-instance",
    "simple-ilr": "simple-ilr",
    "hierarchical-ilr": "hierarchical-ilr",
    "individual": "multi-instance",
}


@dataclass
class HeadPattern:
    """How the classifier heads are generated from the target net.

    ``multi-instance`` clones the whole net per head; ``simple-ilr`` shares
    everything below one split marker; ``hierarchical-ilr`` nests several
    split levels whose branching factors multiply to the head count.
    """

    variant: str
    heads: int = 1
    splits: list = field(default_factory=list)
    branching: list = field(default_factory=list)

    def __post_init__(self):
        key = self.variant.lower()
        if key not in _VARIANT_ALIASES:
            raise ConfigError(f"unknown head pattern variant {self.variant!r}")
        self.variant = _VARIANT_ALIASES[key]
        if self.heads < 1:
            raise ConfigError(f"head count must be >= 1, got {self.heads}")
        if self.variant == "simple-ilr":
            if len(self.splits) != 1:
                raise ConfigError(
                    f"simple-ilr uses exactly one split marker, got {self.splits}"
                )
            self.branching = [self.heads]
        elif self.variant == "hierarchical-ilr":
            if len(self.splits) < 2:
                raise ConfigError(
                    f"hierarchical-ilr needs >= 2 split markers, got {self.splits}"
                )
            if not self.branching:
                # default to uniform binary levels when that matches H
                if 2 ** len(self.splits) == self.heads:
                    self.branching = [2] * len(self.splits)
                else:
                    raise ConfigError(
                        "hierarchical-ilr needs explicit branching factors when "
                        f"heads={self.heads} is not 2**levels"
                    )
            if len(self.branching) != len(self.splits):
                raise ConfigError(
                    f"{len(self.splits)} split markers but {len(self.branching)} branching factors"
                )
            prod = 1
            for b in self.branching:
                if b < 1:
                    raise ConfigError(f"branching factors must be >= 1, got {self.branching}")
                prod *= b
            if prod != self.heads:
                raise ConfigError(
                    f"branching product {prod} != head count {self.heads}"
                )
        else:
            self.branching = [self.heads]

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "heads": self.heads,
            "splits": list(self.splits),
            "branching": list(self.branching),
        }

    @classmethod
    def from_json(cls, obj) -> "HeadPattern":
        if isinstance(obj, str):
            obj = {"variant": obj}
        return cls(
            variant=obj["variant"],
            heads=int(obj.get("heads", 1)),
            splits=list(obj.get("splits", [])),
            branching=list(obj.get("branching", [])),
        )


class Segment:
    """A run of layers instantiated once, shared by all heads above it."""

    __slots__ = ("path", "start", "end", "layers", "children", "head_index")

    def __init__(self, path, start, end, layers):
        self.path = path
        self.start = start
        self.end = end
        self.layers = layers
        self.children = []
        self.head_index = None


@dataclass(frozen=True)
class BranchPoint:
    segment_path: str
    after_layer: int
    branches: int
    rescale_factor: float | None


class Network:
    """A single end-to-end classifier: the inference-time object."""

    def __init__(self, spec: NetSpec, layers: list, param_names: list):
        self.spec = spec
        self.layers = layers
        self.param_names = param_names

    def forward(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        expect = self.spec.input_shape
        if tuple(t.data.shape[1:]) != expect:
            raise ShapeError(
                f"network input: expected batch x {expect}, got {t.data.shape}"
            )
        for layer in self.layers:
            t = layer(t)
        return t

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward on plain arrays; bit-identical to ``forward``."""
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.predict(out)
        return out

    def param_count(self) -> int:
        return sum(p.data.size for _, p in self.named_params())

    def named_params(self):
        out = []
        for name, layer in zip(self.param_names, self.layers):
            for suffix, tensor in layer.params():
                out.append((f"{name}/{suffix}", tensor))
        return out


class TrainingGraph:
    """Shared-prefix multi-head graph with one parameter store.

    ``forward`` returns the H logit tensors in head order; rescale nodes
    are applied (in backprop-rescale mode) at each branch point before
    fan-out.
    """

    def __init__(self, spec, pattern, scaling_mode, store, root, branch_points, head_leaves):
        self.spec = spec
        self.pattern = pattern
        self.scaling_mode = scaling_mode
        self.store = store
        self.root = root
        self.branch_points = branch_points
        self._head_leaves = head_leaves
        self.forward_passes = 0
        self.param_heads = self._map_param_heads()

    @property
    def num_heads(self) -> int:
        return len(self._head_leaves)

    def _segments_to_head(self, head: int) -> list:
        path = []
        node = self.root
        while True:
            path.append(node)
            if not node.children:
                break
            for child in node.children:
                lo, hi = _head_range(child)
                if lo <= head < hi:
                    node = child
                    break
        return path

    def _map_param_heads(self):
        mapping = {}

        def visit(seg, heads):
            for i, layer in enumerate(seg.layers):
                gi = seg.start + i
                for suffix, _ in layer.params():
                    mapping[_param_name(seg.path, gi, layer.kind, suffix)] = frozenset(heads)
            for child in seg.children:
                lo, hi = _head_range(child)
                visit(child, range(lo, hi))

        visit(self.root, range(self.num_heads))
        return mapping

    def forward(self, x) -> list:
        """One pass through every head; logits returned in head order."""
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if tuple(t.data.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"training graph input: expected batch x {self.spec.input_shape}, "
                f"got {t.data.shape}"
            )
        self.forward_passes += 1
        outs = [None] * self.num_heads

        def run(seg, t):
            for layer in seg.layers:
                t = layer(t)
            if seg.children:
                if self.scaling_mode == "backprop-rescale" and seg.layers:
                    t = ad.rescale(t, 1.0 / len(seg.children))
                for child in seg.children:
                    run(child, t)
            else:
                outs[seg.head_index] = t

        run(self.root, t)
        return outs

    def head_param_names(self, head: int) -> list:
        """Store names of every parameter head ``head`` (0-based) depends on."""
        names = []
        for seg in self._segments_to_head(head):
            for i, layer in enumerate(seg.layers):
                gi = seg.start + i
                for suffix, _ in layer.params():
                    names.append(_param_name(seg.path, gi, layer.kind, suffix))
        return names

    def segment_paths(self) -> list:
        paths = []

        def visit(seg):
            paths.append(seg.path)
            for child in seg.children:
                visit(child)

        visit(self.root)
        return paths


def _head_range(seg) -> tuple:
    if not seg.children:
        return seg.head_index, seg.head_index + 1
    lo = hi = None
    for child in seg.children:
        clo, chi = _head_range(child)
        lo = clo if lo is None else min(lo, clo)
        hi = chi if hi is None else max(hi, chi)
    return lo, hi


def _param_name(path: str, layer_index: int, kind: str, suffix: str) -> str:
    return f"{path}/{layer_index:02d}-{kind}/{suffix}"


def _segment_rng(seed: int, path_indices: tuple) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed] + [i + 1 for i in path_indices]))


def build_training_graph(
    spec: NetSpec, pattern: HeadPattern, scaling_mode: str = "backprop-rescale", seed: int = 0
) -> TrainingGraph:
    """Generate the multi-head graph for ``spec`` under ``pattern``.

    Shared subnets are initialized once from ``seed``; each branch copy
    draws from a seed derived from its position, so sibling branches start
    pairwise different.
    """
    if scaling_mode not in SCALING_MODES:
        raise ConfigError(f"scaling_mode must be one of {SCALING_MODES}, got {scaling_mode!r}")
    if pattern.variant == "multi-instance":
        # H=1 degenerates to the plain single net with no branch point
        positions = [0] if pattern.heads > 1 else []
    else:
        positions = [spec.split_position(name) for name in pattern.splits]
        if positions != sorted(positions) or len(set(positions)) != len(positions):
            raise ConfigError(f"split markers out of order: {pattern.splits} -> {positions}")
    branching = list(pattern.branching)
    n_layers = len(spec.layers)
    store = ParameterStore()
    branch_points = []
    head_leaves = []
    next_head = [0]

    def build_segment(path_indices, level, start):
        path = "trunk" if not path_indices else ".".join(f"b{i}" for i in path_indices)
        end = positions[level] if level < len(positions) else n_layers
        rng = _segment_rng(seed, path_indices)
        layers = []
        for gi in range(start, end):
            layer = instantiate(spec.layers[gi], rng)
            for suffix, tensor in layer.params():
                store.add(_param_name(path, gi, layer.kind, suffix), tensor)
            layers.append(layer)
        seg = Segment(path, start, end, layers)
        if level < len(positions):
            b = branching[level]
            factor = None
            if scaling_mode == "backprop-rescale" and layers:
                factor = 1.0 / b
            branch_points.append(BranchPoint(path, end, b, factor))
            for i in range(b):
                seg.children.append(build_segment(path_indices + (i,), level + 1, end))
        else:
            seg.head_index = next_head[0]
            next_head[0] += 1
            head_leaves.append(seg)
        return seg

    root = build_segment((), 0, 0)
    if next_head[0] != pattern.heads:
        raise ConfigError(
            f"pattern produced {next_head[0]} heads, expected {pattern.heads}"
        )
    return TrainingGraph(spec, pattern, scaling_mode, store, root, branch_points, head_leaves)


def extract_inference_graph(tg: TrainingGraph, head_index: int) -> Network:
    """Keep one head (1-based index) and its dependencies; discard the rest.

    The returned network references the training graph's parameter tensors,
    so its forward output is bit-identical to that head's training logits.
    """
    if not 1 <= head_index <= tg.num_heads:
        raise ConfigError(
            f"head index {head_index} out of range 1..{tg.num_heads}"
        )
    layers = []
    names = []
    for seg in tg._segments_to_head(head_index - 1):
        for i, layer in enumerate(seg.layers):
            layers.append(layer)
            names.append(f"{seg.path}/{seg.start + i:02d}-{layer.kind}")
    if len(layers) != len(tg.spec.layers):
        raise ConfigError(
            f"extracted head has {len(layers)} layers, spec has {len(tg.spec.layers)}"
        )
    return Network(tg.spec, layers, names)


def build_single_network(spec: NetSpec, seed: int = 0):
    """One plain instance of the target net (the individual-learning object)."""
    tg = build_training_graph(spec, HeadPattern("individual"), "none", seed)
    return extract_inference_graph(tg, 1), tg.store


@dataclass
class CountReport:
    total: int
    per_segment: dict
    single: int

    @property
    def ratio(self) -> float:
        return self.total / self.single


def parameter_counts(tg: TrainingGraph) -> CountReport:
    """Distinct-parameter sizes per segment and in total."""
    per_segment = {}
    for name, tensor in tg.store.items():
        path = name.split("/")[0]
        per_segment[path] = per_segment.get(path, 0) + tensor.data.size
    return CountReport(
        total=tg.store.total_size(),
        per_segment=per_segment,
        single=tg.spec.param_count(),
    )


def activation_count(tg: TrainingGraph) -> int:
    """Per-example activation sizes summed over the graph (shared counted once)."""
    shapes = tg.spec.infer_shapes()
    sizes = [int(np.prod(s)) for s in shapes[1:]]
    total = 0

    def visit(seg):
        nonlocal total
        total += sum(sizes[seg.start : seg.end])
        for child in seg.children:
            visit(child)

    visit(tg.root)
    return total


def clone_branch_parameters(tg: TrainingGraph) -> None:
    """Copy every branch's parameters from its first sibling, recursively.

    Verification fixture only: it makes all heads numerically identical so
    gradient-scaling laws can be checked exactly.  Training uses independent
    branch initializations.
    """
    for name, tensor in tg.store.items():
        canonical = re.sub(r"b\d+", "b0", name)
        if canonical != name:
            tensor.data[...] = tg.store[canonical].data
