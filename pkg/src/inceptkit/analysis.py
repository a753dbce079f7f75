"""Static analysis of graphs: multiply-adds, parameters, receptive fields, design lints.

Costs are exact Python integers. One fused multiply-add counts as one op;
bias additions are free. In the default mode pooling, ReLU, batchnorm and
concatenation cost nothing; ``mode="full"`` also charges one op per
comparison/addition/division they perform.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

from .blocks import ArchSpec, build_network
from .graph import Graph

# Table-3 totals of the reference networks, multiply-adds per image
GOOGLENET_MULT_ADDS = 1_500_000_000
BN_INCEPTION_MULT_ADDS = 2_000_000_000

ELEMENTWISE = ("relu", "batchnorm")


@dataclass
class NodeCost:
    name: str
    kind: str
    group: str
    out_shape: tuple
    params: int
    mult_adds: int
    rf: tuple = (1, 1)


@dataclass
class CostReport:
    nodes: list = field(default_factory=list)
    mode: str = "default"
    batch: int = 1

    @property
    def total_mult_adds(self) -> int:
        return sum(n.mult_adds for n in self.nodes)

    @property
    def total_params(self) -> int:
        return sum(n.params for n in self.nodes)

    @property
    def total(self) -> int:
        return self.total_mult_adds

    def by_group(self) -> dict:
        out: dict[str, list] = {}
        for n in self.nodes:
            g = out.setdefault(n.group, [0, 0])
            g[0] += n.params
            g[1] += n.mult_adds
        return {k: {"params": v[0], "mult_adds": v[1]} for k, v in out.items()}

    def kind_mult_adds(self, *kinds) -> int:
        return sum(n.mult_adds for n in self.nodes if n.kind in kinds)

    def rows(self):
        for n in self.nodes:
            yield {"node": n.name, "kind": n.kind, "out_shape": "x".join(map(str, n.out_shape)),
                   "params": n.params, "mult_adds": n.mult_adds, "rf_h": n.rf[0], "rf_w": n.rf[1]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["node", "kind", "out_shape", "params", "mult_adds", "rf_h", "rf_w"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "batch": self.batch, "nodes": list(self.rows()),
                           "total_params": self.total_params, "total_mult_adds": self.total_mult_adds},
                          indent=1)

    def to_table(self) -> str:
        lines = [f"{'node':<34} {'kind':<16} {'out_shape':<14} {'params':>11} {'mult_adds':>15} {'rf':>9}"]
        for r in self.rows():
            lines.append(f"{r['node']:<34} {r['kind']:<16} {r['out_shape']:<14} {r['params']:>11,} "
                         f"{r['mult_adds']:>15,} {r['rf_h']:>4}x{r['rf_w']:<4}")
        lines.append(f"{'TOTAL':<66} {self.total_params:>11,} {self.total_mult_adds:>15,}")
        return "\n".join(lines)


def _as_graph(obj) -> Graph:
    if isinstance(obj, ArchSpec):
        return build_network(obj)[0]
    return obj


def _excluded(graph: Graph, include_aux: bool) -> set:
    """Node ids that only feed the auxiliary head (dropped at inference)."""
    if include_aux or "aux_logits" not in graph.outputs:
        return set()
    keep = set(graph._ancestors([o for k, o in graph.outputs.items() if k != "aux_logits"]))
    return {n.id for n in graph.nodes if n.id not in keep}


def _node_cost(graph: Graph, n, mode: str) -> tuple[int, int]:
    """(params, per-example multiply-adds) of one node."""
    kind, a = n.kind, n.spec.attrs
    shape = n.shape
    params = 0
    ops = 0
    if kind == "conv2d":
        cin = graph.shape(n.inputs[0])[-1]
        params = a.kernel_h * a.kernel_w * cin * a.out_channels + (a.out_channels if a.use_bias else 0)
        ops = shape[1] * shape[2] * a.out_channels * (a.kernel_h * a.kernel_w * cin)
    elif kind == "fully_connected":
        d = math.prod(graph.shape(n.inputs[0])[1:])
        params = d * a.out_features + (a.out_features if a.use_bias else 0)
        ops = d * a.out_features
    elif kind == "batchnorm":
        params = 2 * shape[-1]
        if mode == "full":
            ops = 2 * math.prod(shape[1:])
    elif mode == "full":
        if kind == "pool2d":
            ops = math.prod(shape[1:]) * a.window_h * a.window_w
        elif kind == "global_avg_pool":
            ops = math.prod(graph.shape(n.inputs[0])[1:])
        elif kind == "relu":
            ops = math.prod(shape[1:])
    return params, ops


def count_cost(obj, batch: int = 1, mode: str = "default", include_aux: bool = False) -> CostReport:
    """Per-node and total cost of a graph or ArchSpec.

    The auxiliary head is excluded unless ``include_aux`` since it is
    discarded at inference time.
    """
    if mode not in ("default", "full"):
        raise ValueError("mode must be 'default' or 'full'")
    graph = _as_graph(obj)
    skip = _excluded(graph, include_aux)
    rfs = receptive_fields(graph)
    report = CostReport(mode=mode, batch=batch)
    for n in graph.nodes:
        if n.id in skip or n.kind in ("input", "parameter", "softmax_xent"):
            continue
        params, ops = _node_cost(graph, n, mode)
        rf = rfs.get(n.id)
        report.nodes.append(NodeCost(n.name, n.kind, n.group, n.shape[1:], params, ops * batch,
                                     (rf.rf_h, rf.rf_w) if rf else (0, 0)))
    return report


def count_params(obj, include_aux: bool = False) -> int:
    return count_cost(obj, include_aux=include_aux).total_params


# -- receptive field ----------------------------------------------------------------

@dataclass(frozen=True)
class RfInfo:
    rf_h: int
    rf_w: int
    stride_h: int = 1
    stride_w: int = 1
    start_h: float = 0.5  # centre of the first output's field, in input pixels
    start_w: float = 0.5


def _window(n, graph):
    a = n.spec.attrs
    if n.kind == "conv2d":
        return a.kernel_h, a.kernel_w, a.stride, a.padding
    if n.kind == "pool2d":
        return a.window_h, a.window_w, a.stride, a.padding
    if n.kind in ("global_avg_pool", "fully_connected"):
        s = graph.shape(n.inputs[0])
        if len(s) == 4:
            return s[1], s[2], 1, "valid"
    return None


def receptive_fields(graph: Graph) -> dict[int, RfInfo]:
    """Receptive field of every node reachable from an input node."""
    from .nnops import pad_amounts

    info: dict[int, RfInfo] = {}
    for n in graph.nodes:
        if n.kind == "input":
            info[n.id] = RfInfo(1, 1)
            continue
        ins = [info[i] for i in n.inputs if i in info]
        if not ins:
            continue
        # multi-input nodes: elementwise max over inputs
        base = RfInfo(max(r.rf_h for r in ins), max(r.rf_w for r in ins),
                      max(r.stride_h for r in ins), max(r.stride_w for r in ins),
                      max(r.start_h for r in ins), max(r.start_w for r in ins))
        win = _window(n, graph)
        if win is None:
            info[n.id] = base
            continue
        kh, kw, s, padding = win
        h, w = graph.shape(n.inputs[0])[1:3] if len(graph.shape(n.inputs[0])) == 4 else (1, 1)
        pt = pad_amounts(h, kh, s, padding)[0]
        pl = pad_amounts(w, kw, s, padding)[0]
        info[n.id] = RfInfo(
            base.rf_h + (kh - 1) * base.stride_h, base.rf_w + (kw - 1) * base.stride_w,
            base.stride_h * s, base.stride_w * s,
            base.start_h + ((kh - 1) / 2 - pt) * base.stride_h,
            base.start_w + ((kw - 1) / 2 - pl) * base.stride_w,
        )
    return info


def receptive_field(graph: Graph, node) -> RfInfo:
    nid = graph.names[node] if isinstance(node, str) else node
    info = receptive_fields(graph)
    if nid not in info:
        raise ValueError(f"node {graph.nodes[nid].name!r} is unreachable from any input")
    return info[nid]


# -- lints ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LintFinding:
    principle: int
    node: str
    message: str
    severity: str  # info | warning | error


def _cut_nodes(graph: Graph, target: int) -> list[int]:
    """Activation nodes every input-to-``target`` path goes through, in order."""
    anc = [i for i in graph._ancestors([target]) if graph.nodes[i].kind != "parameter"]
    pos = {nid: k for k, nid in enumerate(anc)}
    covered = [0] * (len(anc) + 1)
    for nid in anc:
        for src in graph.nodes[nid].inputs:
            if src in pos and pos[nid] - pos[src] > 1:
                covered[pos[src] + 1] += 1
                covered[pos[nid]] -= 1
    cuts, run = [], 0
    for k, nid in enumerate(anc):
        run += covered[k]
        if run == 0:
            cuts.append(nid)
    return cuts


def _pre_expansion_size(graph: Graph, nid: int) -> int | None:
    """If ``nid`` is fed (through bn/relu) by a channel-expanding conv, that conv's input size."""
    n = graph.nodes[nid]
    while n.kind in ELEMENTWISE:
        n = graph.nodes[n.inputs[0]]
    if n.kind == "conv2d":
        src = graph.shape(n.inputs[0])
        if n.shape[-1] > src[-1]:
            return math.prod(src[1:])
    return None


def lint(obj, bottleneck_factor: float = 4.0) -> list[LintFinding]:
    """Check design principles 1 (no sharp representation drops) and 4 (width/depth balance).

    Principle 1 looks at consecutive cut nodes up to the classifier head; a
    drop by ``bottleneck_factor`` or more is an error. A pool fed by a conv
    that first expanded the channels is measured against the representation
    before that expansion.
    """
    graph = _as_graph(obj)
    target = graph.outputs.get("logits", len(graph.nodes) - 1)
    findings: list[LintFinding] = []
    cuts = [c for c in _cut_nodes(graph, target)
            if graph.nodes[c].kind not in ("global_avg_pool", "fully_connected", "softmax_xent")]
    head_at = next((n.id for n in graph.nodes if n.kind == "global_avg_pool"), None)
    if head_at is not None:
        cuts = [c for c in cuts if c < head_at]
    for prev, cur in zip(cuts, cuts[1:]):
        before = math.prod(graph.shape(prev)[1:])
        after = math.prod(graph.shape(cur)[1:])
        if graph.nodes[cur].kind == "pool2d":
            pre = _pre_expansion_size(graph, prev)
            if pre is not None:
                before = min(before, pre)
        if after * bottleneck_factor <= before:
            findings.append(LintFinding(
                1, graph.nodes[cur].name,
                f"representation drops {before / after:.2f}x ({before} -> {after}) at {graph.nodes[cur].kind}",
                "error"))
    findings.extend(_balance_summary(graph, set(graph._ancestors([target]))))
    return findings


def _balance_summary(graph: Graph, keep: set) -> list[LintFinding]:
    stages: dict[int, list] = {}
    for n in graph.nodes:
        if n.kind == "conv2d" and n.id in keep:
            st = stages.setdefault(n.shape[1], [0, 0])
            st[0] += 1
            st[1] = max(st[1], n.shape[-1])
    return [LintFinding(4, f"grid{g}", f"{g}x{g} stage: {d} conv layers, max width {w}", "info")
            for g, (d, w) in sorted(stages.items(), reverse=True)]


# -- comparison -----------------------------------------------------------------------

@dataclass
class Comparison:
    ratio: float
    delta_mult_adds: int
    delta_params: int
    table: str


def compare(a: CostReport, b, label_a="a", label_b="b") -> Comparison:
    """Compare two reports; ``b`` may also be a plain multiply-add total (reference constant)."""
    b_total = b.total_mult_adds if isinstance(b, CostReport) else int(b)
    b_params = b.total_params if isinstance(b, CostReport) else 0
    ratio = a.total_mult_adds / b_total
    table = "\n".join([
        f"{'':<12} {'mult_adds':>16} {'params':>12}",
        f"{label_a:<12} {a.total_mult_adds:>16,} {a.total_params:>12,}",
        f"{label_b:<12} {b_total:>16,} {b_params:>12,}",
        f"{'ratio':<12} {ratio:>16.4f}",
    ])
    return Comparison(ratio, a.total_mult_adds - b_total, a.total_params - b_params, table)
