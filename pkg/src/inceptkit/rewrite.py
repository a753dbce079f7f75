"""Factorisation passes over ArchSpecs, with cost reports and linear-equivalence oracles.

Passes rewrite the declarative spec; the graph is rebuilt afterwards. Every
factorisation keeps the stride on its last factor so both the output shape
and the receptive field of the rewritten site are unchanged. pool_order_swap
moves a strided pool ahead of a stride-1 conv and shrinks the conv kernel to
keep the receptive field; it trades the cost saving for a representational
bottleneck, which lint reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis, nnops
from .blocks import ArchSpec, BranchSpec, ConvLayer, InceptionModuleSpec, PoolLayer, build_layer, build_network, item_output_nodes
from .graph import Graph
from .tensor import Prng

RULE_NAMES = (
    "factorize_5x5_to_two_3x3",
    "factorize_nxn_to_asymmetric",
    "factorize_7x7_to_three_3x3",
    "factorize_3x3_to_two_2x2",
    "pool_order_swap",
)
ASYMMETRIC_GRID = (12, 20)


@dataclass(frozen=True)
class RewriteRule:
    name: str
    n: int = 7  # kernel length for factorize_nxn_to_asymmetric
    alpha: str = "none"  # none | sqrt_split
    force: bool = False  # apply the asymmetric rule outside the 12..20 grid band
    first_activation: str = "relu"  # activation between factors: relu | linear

    def __post_init__(self):
        if self.name not in RULE_NAMES:
            raise ValueError(f"unknown rewrite rule {self.name!r}")
        if self.alpha not in ("none", "sqrt_split"):
            raise ValueError("alpha must be 'none' or 'sqrt_split'")


@dataclass
class SiteReport:
    site: str
    before: str
    after: str
    mult_adds_before: int
    mult_adds_after: int
    params_before: int
    params_after: int
    rf_before: tuple
    rf_after: tuple
    shape_ok: bool

    @property
    def saving(self) -> float:
        return 1 - self.mult_adds_after / self.mult_adds_before

    @property
    def rf_ok(self) -> bool:
        return self.rf_before == self.rf_after


@dataclass
class RewriteReport:
    rule: str
    sites: list = field(default_factory=list)
    mult_adds_before: int = 0
    mult_adds_after: int = 0
    params_before: int = 0
    params_after: int = 0
    index_map: dict = field(default_factory=dict)
    chain_before: list = field(default_factory=list)
    chain_after: list = field(default_factory=list)

    @property
    def saving(self) -> float:
        return 1 - self.mult_adds_after / self.mult_adds_before

    def to_table(self) -> str:
        lines = [f"rule {self.rule}: {len(self.sites)} sites"]
        for s in self.sites:
            lines.append(f"  {s.site:<32} {s.before:>16} -> {s.after:<40} mult_adds {s.mult_adds_before:,} -> "
                         f"{s.mult_adds_after:,} (saving {100 * s.saving:.1f}%), rf {s.rf_before}->{s.rf_after}")
        lines.append(f"total mult_adds {self.mult_adds_before:,} -> {self.mult_adds_after:,} "
                     f"(saving {100 * self.saving:.2f}%); params {self.params_before:,} -> {self.params_after:,}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "rule": self.rule,
            "sites": [dict(s.__dict__, saving=s.saving, rf_ok=s.rf_ok) for s in self.sites],
            "mult_adds_before": self.mult_adds_before, "mult_adds_after": self.mult_adds_after,
            "params_before": self.params_before, "params_after": self.params_after, "saving": self.saving,
        }, indent=1, default=list)

    def to_csv(self) -> str:
        rows = ["site,before,after,mult_adds_before,mult_adds_after,params_before,params_after,saving,rf_ok"]
        for s in self.sites:
            rows.append(f"{s.site},{s.before},{s.after},{s.mult_adds_before},{s.mult_adds_after},"
                        f"{s.params_before},{s.params_after},{s.saving:.6f},{s.rf_ok}")
        return "\n".join(rows) + "\n"


def describe(layer) -> str:
    if isinstance(layer, PoolLayer):
        return f"{layer.kind}pool{layer.kh}x{layer.kw}/{layer.stride}"
    return f"conv{layer.kh}x{layer.kw}/{layer.stride}:{layer.filters}"


# -- factorisations ---------------------------------------------------------------

def _widths(cin, cout, steps, alpha):
    if alpha == "none":
        return [cin] * (steps - 1) + [cout]
    return [max(1, round(cin * (cout / cin) ** (k / steps))) for k in range(1, steps)] + [cout]


def _factor(layer: ConvLayer, kernels, cin, rule) -> list:
    """Replace ``layer`` by convs with the given (kh, kw) kernels; stride goes on the last one."""
    widths = _widths(cin, layer.filters, len(kernels), rule.alpha)
    out = []
    for k, ((kh, kw), f) in enumerate(zip(kernels, widths)):
        last = k == len(kernels) - 1
        out.append(ConvLayer(kh, kw, f, layer.stride if last else 1, layer.padding,
                             layer.activation if last else rule.first_activation, layer.batchnorm))
    return out


def _rewrite_conv(layer: ConvLayer, cin: int, grid: int, rule: RewriteRule):
    if rule.name == "factorize_5x5_to_two_3x3" and (layer.kh, layer.kw) == (5, 5):
        return _factor(layer, [(3, 3), (3, 3)], cin, rule)
    if rule.name == "factorize_7x7_to_three_3x3" and (layer.kh, layer.kw) == (7, 7):
        return _factor(layer, [(3, 3)] * 3, cin, rule)
    if rule.name == "factorize_3x3_to_two_2x2" and (layer.kh, layer.kw) == (3, 3):
        return _factor(layer, [(2, 2), (2, 2)], cin, rule)
    if rule.name == "factorize_nxn_to_asymmetric" and (layer.kh, layer.kw) == (rule.n, rule.n) and rule.n > 1:
        lo, hi = ASYMMETRIC_GRID
        if not rule.force and not lo <= grid <= hi:
            return None
        return _factor(layer, [(1, rule.n), (rule.n, 1)], cin, rule)
    return None


def _swappable(a, b) -> bool:
    return (isinstance(a, ConvLayer) and isinstance(b, PoolLayer)
            and a.stride == 1 and a.padding == "same" and b.stride > 1
            and (a.kh - 1) % b.stride == 0 and (a.kw - 1) % b.stride == 0)


def _swap(conv: ConvLayer, pool: PoolLayer) -> list:
    """Pool first, then a conv shrunk to 1 + (k-1)/s so the site's receptive field is unchanged."""
    s = pool.stride
    return [pool, replace(conv, kh=1 + (conv.kh - 1) // s, kw=1 + (conv.kw - 1) // s)]


def _site_cost(in_shape, layers) -> tuple:
    """(mult_adds, params, rf, out_shape) of a standalone layer sequence."""
    g = Graph()
    x = g.input((1,) + tuple(in_shape), "input")
    for k, layer in enumerate(layers):
        x = build_layer(g, x, layer, f"l{k}")
    rep = analysis.count_cost(g)
    rf = analysis.receptive_field(g, x)
    return rep.total_mult_adds, rep.total_params, (rf.rf_h, rf.rf_w), g.shape(x)[1:]


class _Rewriter:
    def __init__(self, arch: ArchSpec, rule: RewriteRule):
        self.arch = arch
        self.rule = rule
        self.graph, _ = build_network(arch)
        self.sites: list[SiteReport] = []

    def _in_shape(self, node_name):
        return self.graph.shape(self.graph.nodes[self.graph.names[node_name]].inputs[0])[1:]

    def seq(self, layers, prefix, stem_index=None):
        """Rewrite a layer sequence; returns (new layers, map old index -> new last index)."""
        out, idx = [], {}
        k = 0
        while k < len(layers):
            layer = layers[k]
            tag = "pool" if isinstance(layer, PoolLayer) else "conv"
            name = f"stem/{stem_index[k]}" if stem_index else f"{prefix}/{tag}{k}"
            repl = None
            consumed = 1
            if self.rule.name == "pool_order_swap":
                if k + 1 < len(layers) and _swappable(layer, layers[k + 1]):
                    repl = _swap(layer, layers[k + 1])
                    consumed = 2
            elif isinstance(layer, ConvLayer):
                in_shape = self._in_shape(name)
                repl = _rewrite_conv(layer, in_shape[-1], in_shape[0], self.rule)
            if repl is None:
                out.append(layer)
            else:
                in_shape = self._in_shape(name)
                orig = list(layers[k:k + consumed])
                self._record(name, in_shape, orig, repl)
                out.extend(repl)
            # a swapped pair only keeps its final output
            idx[k + consumed - 1] = len(out) - 1
            k += consumed
        return out, idx

    def _record(self, name, in_shape, orig, repl):
        ma0, p0, rf0, s0 = _site_cost(in_shape, orig)
        ma1, p1, rf1, s1 = _site_cost(in_shape, repl)
        self.sites.append(SiteReport(name, "+".join(map(describe, orig)), "+".join(map(describe, repl)),
                                     ma0, ma1, p0, p1, rf0, rf1, s0 == s1))

    def module(self, m: InceptionModuleSpec) -> InceptionModuleSpec:
        branches = []
        for j, b in enumerate(m.branches):
            layers, _ = self.seq(b.layers, f"{m.name}/b{j}")
            split = tuple(tuple(self.seq(t, f"{m.name}/b{j}/split{s}")[0]) for s, t in enumerate(b.split))
            branches.append(BranchSpec(tuple(layers), split))
        return replace(m, branches=tuple(branches))

    def run(self):
        new_items, index_map = [], {}
        run_start = None
        items = list(self.arch.layers)
        k = 0
        while k < len(items):
            item = items[k]
            if isinstance(item, InceptionModuleSpec):
                new_items.append(self.module(item))
                index_map[k] = len(new_items) - 1
                k += 1
                continue
            # maximal run of consecutive top-level rows
            j = k
            while j < len(items) and not isinstance(items[j], InceptionModuleSpec):
                j += 1
            layers, idx = self.seq(items[k:j], "stem", stem_index=list(range(k, j)))
            base = len(new_items)
            new_items.extend(layers)
            for off, new in idx.items():
                index_map[k + off] = base + new
            k = j
        return replace(self.arch, layers=tuple(new_items)), index_map


def apply_rule(arch: ArchSpec, rule: RewriteRule) -> tuple[ArchSpec, RewriteReport]:
    """Apply ``rule`` at every applicable site of ``arch``."""
    rw = _Rewriter(arch, rule)
    new, index_map = rw.run()
    new_graph, _ = build_network(new)
    before = analysis.count_cost(rw.graph)
    after = analysis.count_cost(new_graph)
    chain0 = _chain(rw.graph, arch)
    chain1 = _chain(new_graph, new)
    report = RewriteReport(rule.name, rw.sites, before.total_mult_adds, after.total_mult_adds,
                           before.total_params, after.total_params, index_map, chain0, chain1)
    for old, nw in index_map.items():
        assert chain0[old] == chain1[nw], f"rewrite broke the shape chain at item {old}"
    assert chain0[-2:] == chain1[-2:]
    assert all(s.shape_ok for s in rw.sites)
    return new, report


def _chain(graph: Graph, arch: ArchSpec) -> list:
    return [graph.shape(n)[1:] for n in item_output_nodes(graph, arch)[1:]]


def shape_chain_items(arch: ArchSpec) -> list:
    """Output shape of every arch item (no input entry), then head pool and logits."""
    return _chain(build_network(arch)[0], arch)


# -- kernel composition and equivalence -------------------------------------------------

def compose_kernels(k1: np.ndarray, k2: np.ndarray) -> np.ndarray:
    """Single kernel equal to conv(k1) followed by conv(k2), both linear, stride 1, valid.

    Result has shape (kh1+kh2-1, kw1+kw2-1, Cin, Cout); the intermediate
    channel is summed out.
    """
    kh1, kw1, cin, cm = k1.shape
    kh2, kw2, cm2, cout = k2.shape
    if cm != cm2:
        raise ValueError(f"channel mismatch: first kernel emits {cm}, second expects {cm2}")
    out = np.zeros((kh1 + kh2 - 1, kw1 + kw2 - 1, cin, cout), np.result_type(k1, k2))
    for u in range(kh1):
        for v in range(kw1):
            for p in range(kh2):
                for q in range(kw2):
                    out[u + p, v + q] += k1[u, v] @ k2[p, q]
    return out


@dataclass
class EquivalenceReport:
    activation: str
    trials: int
    max_abs_diff: float
    tol: float
    passed: bool | None  # None in relu mode: divergence is reported, not judged


def _run_convs(x, kernels, activation):
    for k, w in enumerate(kernels):
        x, _ = nnops.conv2d_forward(x, w, None, nnops.ConvAttrs(w.shape[0], w.shape[1], 1, "valid", w.shape[3]))
        if activation == "relu" and k < len(kernels) - 1:
            x = np.maximum(x, 0)
    return x


def check_equivalence(original, rewritten, activation="linear", trials=50, tol=1e-10, seed=0,
                      in_channels=None, grid=9, batch=2) -> EquivalenceReport:
    """Compare a single conv with a factorised conv sequence on random inputs (f64).

    Factor weights are sampled, composed into the original's kernel, and both
    fragments are run with valid padding. In linear mode the max difference is
    checked against ``tol``; in relu mode (ReLU between factors) it is only
    reported.
    """
    original = list(original) if isinstance(original, (list, tuple)) else [original]
    rewritten = list(rewritten) if isinstance(rewritten, (list, tuple)) else [rewritten]
    if len(original) != 1:
        raise ValueError("original fragment must be a single conv layer")
    o = original[0]
    cin = in_channels or o.filters
    ext_h = 1 + sum(layer.kh - 1 for layer in rewritten)
    ext_w = 1 + sum(layer.kw - 1 for layer in rewritten)
    if (ext_h, ext_w) != (o.kh, o.kw) or rewritten[-1].filters != o.filters:
        raise ValueError(f"fragments differ in extent or output depth: {o} vs {rewritten}")
    prng = Prng(seed)
    worst = 0.0
    for _ in range(trials):
        kernels, c = [], cin
        for layer in rewritten:
            kernels.append(prng.normal((layer.kh, layer.kw, c, layer.filters), std=1.0 / math.sqrt(layer.kh * layer.kw * c)))
            c = layer.filters
        composed = kernels[0]
        for k in kernels[1:]:
            composed = compose_kernels(composed, k)
        x = prng.normal((batch, grid, grid, cin))
        a = _run_convs(x, [composed], "linear")
        b = _run_convs(x, kernels, activation)
        worst = max(worst, float(np.abs(a - b).max()))
    passed = worst <= tol if activation == "linear" else None
    return EquivalenceReport(activation, trials, worst, tol, passed)


# -- grid reduction cost comparison ------------------------------------------------------

@dataclass
class PoolOrderCosts:
    conv_then_pool_cost: int
    pool_then_conv_cost: int
    parallel_cost: int
    bottleneck_flags: dict


def _reduction_graphs(d, k, kh, kw):
    conv = ConvLayer(kh, kw, 2 * k, 1, "same", "relu", False)
    pool = PoolLayer("max", 2, 2, 2)
    graphs = {}
    g = Graph()
    x = g.input((1, d, d, k), "input")
    build_layer(g, build_layer(g, x, conv, "conv"), pool, "pool")
    graphs["conv_then_pool"] = g
    g = Graph()
    x = g.input((1, d, d, k), "input")
    build_layer(g, build_layer(g, x, pool, "pool"), conv, "conv")
    graphs["pool_then_conv"] = g
    g = Graph()
    x = g.input((1, d, d, k), "input")
    p = build_layer(g, x, pool, "pool")
    c = build_layer(g, x, ConvLayer(kh, kw, k, 2, "same", "relu", False), "conv")
    g.concat([p, c], "concat")
    graphs["parallel"] = g
    return graphs


def pool_order_variants(d: int, k: int, kernel_area: int = 9) -> PoolOrderCosts:
    """Cost of the three ways to go from d x d x k to (d/2) x (d/2) x 2k.

    ``kernel_area`` must be a square number (the conv is sqrt x sqrt).
    """
    if d % 2:
        raise ValueError("grid size d must be even")
    if k < 1:
        raise ValueError("k must be >= 1")
    side = math.isqrt(kernel_area)
    if side * side != kernel_area:
        raise ValueError("kernel_area must be a perfect square")
    graphs = _reduction_graphs(d, k, side, side)
    costs = {}
    flags = {}
    for key, g in graphs.items():
        costs[key] = analysis.count_cost(g).total_mult_adds
        flags[key] = any(f.principle == 1 for f in analysis.lint(g))
    return PoolOrderCosts(costs["conv_then_pool"], costs["pool_then_conv"], costs["parallel"], flags)
