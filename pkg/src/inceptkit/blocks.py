"""Declarative architecture specs and the builders that turn them into graphs.

An :class:`ArchSpec` is a flat sequence of stem rows and Inception modules
followed by an implicit classifier head (global average pool -> fully
connected logits), plus an optional auxiliary head. Every conv row is
conv -> [batchnorm] -> [relu]; the bias is only used when no batchnorm
follows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

from .graph import Graph, ShapeError
from .nnops import BatchNormAttrs, ConvAttrs, PoolAttrs, out_size

VARIANTS = ("original", "factorized_5x5", "asymmetric_nxn", "expanded_8x8", "reduction")
STEM_VARIANTS = ("r299_s2_pool", "r151_s1_pool", "r79_s1_nopool")


@dataclass(frozen=True)
class ConvLayer:
    kh: int
    kw: int
    filters: int
    stride: int = 1
    padding: str = "same"
    activation: str = "relu"  # relu | linear
    batchnorm: bool = True

    def attrs(self) -> ConvAttrs:
        return ConvAttrs(self.kh, self.kw, self.stride, self.padding, self.filters, not self.batchnorm)


@dataclass(frozen=True)
class PoolLayer:
    kind: str
    kh: int
    kw: int
    stride: int
    padding: str = "valid"

    def attrs(self) -> PoolAttrs:
        return PoolAttrs(self.kh, self.kw, self.stride, self.kind, self.padding)


Layer = Union[ConvLayer, PoolLayer]


@dataclass(frozen=True)
class BranchSpec:
    """One parallel path: a layer sequence, optionally ending in a split whose
    tails are concatenated (the expanded 8x8 module's 1x3 / 3x1 pair)."""

    layers: tuple = ()
    split: tuple = ()  # tuple of layer tuples

    def channels(self, in_channels: int) -> int:
        if self.split:
            return sum(_seq_channels(t, _seq_channels(self.layers, in_channels)) for t in self.split)
        return _seq_channels(self.layers, in_channels)

    def all_layers(self):
        yield from self.layers
        for t in self.split:
            yield from t

    def terminal_layers(self):
        if self.split:
            return [t[-1] for t in self.split if t]
        return [self.layers[-1]] if self.layers else []


def _seq_channels(layers, c):
    for layer in layers:
        if isinstance(layer, ConvLayer):
            c = layer.filters
    return c


@dataclass(frozen=True)
class InceptionModuleSpec:
    name: str
    variant: str
    branches: tuple
    grid: int | None = None  # expected input spatial size, checked when set
    n: int | None = None  # kernel length of the asymmetric variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown module variant {self.variant!r}")
        if self.variant == "asymmetric_nxn" and self.n is None:
            object.__setattr__(self, "n", 7)
        if self.variant == "reduction":
            for br in self.branches:
                for layer in br.terminal_layers():
                    if layer.stride != 2:
                        raise ValueError(f"{self.name}: reduction branches must end with stride 2")

    def filter_banks(self, in_channels: int) -> list[int]:
        return [b.channels(in_channels) for b in self.branches]


@dataclass(frozen=True)
class AuxHeadSpec:
    attach: str  # name of the module whose output feeds the head
    pool: PoolLayer = PoolLayer("avg", 5, 5, 3, "valid")
    reduce_filters: int = 128
    hidden_filters: int = 768
    batchnorm: bool = True
    loss_weight: float = 0.3
    grid: int = 17

    def __post_init__(self):
        if self.loss_weight < 0:
            raise ValueError("aux loss weight must be >= 0")


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple  # (H, W, C)
    classes: int
    layers: tuple
    aux: AuxHeadSpec | None = None
    format_version: int = 1

    def modules(self):
        return [m for m in self.layers if isinstance(m, InceptionModuleSpec)]

    def stem(self):
        out = []
        for item in self.layers:
            if isinstance(item, InceptionModuleSpec):
                break
            out.append(item)
        return out


# -- graph builders -----------------------------------------------------------

def build_layer(graph: Graph, x: int, layer, name: str, group: str = "") -> int:
    if isinstance(layer, PoolLayer):
        return graph.pool2d(x, layer.attrs(), name, group)
    y = graph.conv2d(x, layer.attrs(), name, group)
    if layer.batchnorm:
        y = graph.batchnorm(y, f"{name}/bn", BatchNormAttrs(), group)
    if layer.activation == "relu":
        y = graph.relu(y, f"{name}/relu", group)
    return y


def _build_seq(graph, x, layers, prefix, group):
    for k, layer in enumerate(layers):
        tag = "pool" if isinstance(layer, PoolLayer) else "conv"
        x = build_layer(graph, x, layer, f"{prefix}/{tag}{k}", group)
    return x


def build_branch(graph: Graph, x: int, branch: BranchSpec, prefix: str, group: str = "") -> int:
    y = _build_seq(graph, x, branch.layers, prefix, group)
    if not branch.split:
        return y
    tails = [_build_seq(graph, y, t, f"{prefix}/split{s}", group) for s, t in enumerate(branch.split)]
    return graph.concat(tails, f"{prefix}/concat", group)


def build_module(spec: InceptionModuleSpec, graph: Graph, x: int) -> int:
    """Add all branches of ``spec`` on top of ``x`` and return their channel concat."""
    shape = graph.shape(x)
    if spec.grid is not None and shape[1] != spec.grid:
        raise ShapeError(f"{spec.name}: expected a {spec.grid}x{spec.grid} input grid, got {shape}")
    outs = [build_branch(graph, x, b, f"{spec.name}/b{j}", spec.name) for j, b in enumerate(spec.branches)]
    y = graph.concat(outs, spec.name, spec.name)
    out_shape = graph.shape(y)
    if spec.variant != "reduction" and out_shape[1:3] != shape[1:3]:
        raise ShapeError(f"{spec.name}: non-reduction module changed the grid {shape} -> {out_shape}")
    assert out_shape[-1] == sum(spec.filter_banks(shape[-1]))
    return y


def build_reduction(spec: InceptionModuleSpec, graph: Graph, x: int) -> int:
    """Parallel stride-2 pooling and conv branches, concatenated."""
    if spec.variant != "reduction":
        raise ValueError(f"{spec.name} is not a reduction module")
    h = graph.shape(x)[1]
    y = build_module(spec, graph, x)
    expect = out_size(h, 3, 2, "valid")
    if graph.shape(y)[1] != expect:
        raise ShapeError(f"{spec.name}: reduction produced {graph.shape(y)}, expected grid {expect}")
    return y


def build_aux_head(spec: AuxHeadSpec, graph: Graph, attach: int, classes: int) -> int:
    """Side classifier: avg pool -> 1x1 conv -> conv over the remaining grid -> logits."""
    shape = graph.shape(attach)
    if shape[1] != spec.grid:
        raise ShapeError(f"aux head expects a {spec.grid}x{spec.grid} attach grid, got {shape}")
    g = "aux"
    y = build_layer(graph, attach, spec.pool, "aux/pool", g)
    y = build_layer(graph, y, ConvLayer(1, 1, spec.reduce_filters, batchnorm=spec.batchnorm), "aux/conv0", g)
    h, w = graph.shape(y)[1:3]
    y = build_layer(graph, y, ConvLayer(h, w, spec.hidden_filters, padding="valid", batchnorm=spec.batchnorm),
                    "aux/conv1", g)
    return graph.fully_connected(y, classes, "aux/logits", group=g)


def build_network(arch: ArchSpec, graph: Graph | None = None, batch: int = 1, precision="f32", seed=0):
    """Build the whole network; returns (graph, {"logits": id, "aux_logits": id or None})."""
    graph = graph or Graph(precision, seed)
    h, w, c = arch.input_shape
    x = graph.input((batch, h, w, c), "input", "stem")
    aux_at = None
    for i, item in enumerate(arch.layers):
        if isinstance(item, InceptionModuleSpec):
            if item.variant == "reduction":
                x = build_reduction(item, graph, x)
            else:
                x = build_module(item, graph, x)
            if arch.aux is not None and item.name == arch.aux.attach:
                aux_at = x
        else:
            x = build_layer(graph, x, item, f"stem/{i}", "stem")
    x = graph.global_avg_pool(x, "head/pool", "head")
    logits = graph.fully_connected(x, arch.classes, "head/logits", group="head")
    aux_logits = None
    if arch.aux is not None:
        if aux_at is None:
            raise ShapeError(f"aux head attach point {arch.aux.attach!r} not found")
        aux_logits = build_aux_head(arch.aux, graph, aux_at, arch.classes)
    graph.outputs = {"logits": logits}
    if aux_logits is not None:
        graph.outputs["aux_logits"] = aux_logits
    return graph, {"logits": logits, "aux_logits": aux_logits}


def item_output_nodes(graph: Graph, arch: ArchSpec) -> list[int]:
    """Node id closing each arch item (stem row or module), then head pool and logits."""
    out = [graph.names["input"]]
    for i, item in enumerate(arch.layers):
        if isinstance(item, InceptionModuleSpec):
            out.append(graph.names[item.name])
        else:
            name = f"stem/{i}"
            if isinstance(item, ConvLayer):
                name += "/relu" if item.activation == "relu" else ("/bn" if item.batchnorm else "")
            out.append(graph.names[name])
    out += [graph.names["head/pool"], graph.names["head/logits"]]
    return out


def shape_chain(arch: ArchSpec) -> list[tuple]:
    """Per-item output shapes (batch dim dropped): input, each row/module, pool, logits."""
    graph, _ = build_network(arch)
    return [graph.shape(n)[1:] for n in item_output_nodes(graph, arch)]


def build_stem(variant: str, graph: Graph, batch: int = 1) -> int:
    from .banks import stem_layers, STEM_INPUT

    layers = stem_layers(variant)
    x = graph.input((batch, STEM_INPUT[variant], STEM_INPUT[variant], 3), "input", "stem")
    for i, layer in enumerate(layers):
        x = build_layer(graph, x, layer, f"stem/{i}", "stem")
    return x


def build_inception_v3(arch: ArchSpec | None = None, graph: Graph | None = None, batch: int = 1):
    """Build the v3 network (or a variant ``arch``) and check its stage chain."""
    from .banks import inception_v3

    arch = arch or inception_v3()
    graph, heads = build_network(arch, graph, batch)
    grids = [(graph.shape(graph.names[m.name])[1], graph.shape(graph.names[m.name])[3]) for m in arch.modules()]
    for want in ((35, 288), (17, 768), (8, 1280), (8, 2048)):
        if want not in grids:
            raise ShapeError(f"stage chain broken: no module output at {want[0]}x{want[0]}x{want[1]}")
    return graph, heads


def with_stem(arch: ArchSpec, variant: str) -> ArchSpec:
    """Swap the stem rows of ``arch`` for one of the low-resolution variants."""
    from .banks import stem_layers, STEM_INPUT

    n = len(arch.stem())
    size = STEM_INPUT[variant]
    return replace(arch, name=f"{arch.name}-{variant}", input_shape=(size, size, 3),
                   layers=tuple(stem_layers(variant)) + arch.layers[n:])


def build_tiny(classes: int = 10, input_size: int = 32) -> ArchSpec:
    from .banks import tiny

    return tiny(classes, input_size)
