"""Computation graph: eager shape inference, forward execution, reverse-mode AD.

Nodes are appended in topological order (every input id is smaller than the
node's own id), so the graph is acyclic by construction and the node list
itself is the execution order.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .nnops import BatchNormAttrs, ConvAttrs, PoolAttrs
from .tensor import Prng, as_dtype, check_shape

KINDS = (
    "input", "parameter", "conv2d", "pool2d", "batchnorm", "relu", "concat",
    "fully_connected", "softmax_xent", "add", "global_avg_pool",
)


class ShapeError(ValueError):
    """Shape inference failed while adding a node."""


class GraphError(RuntimeError):
    pass


@dataclass(frozen=True)
class InputAttrs:
    shape: tuple


@dataclass(frozen=True)
class ParamAttrs:
    shape: tuple
    init: str = "he"  # he | zeros | ones
    fan_in: int = 1
    trainable: bool = True


@dataclass(frozen=True)
class FcAttrs:
    out_features: int
    use_bias: bool = True


@dataclass(frozen=True)
class XentAttrs:
    smoothing: float = 0.0


@dataclass(frozen=True)
class AddAttrs:
    coeffs: tuple = (1.0, 1.0)


@dataclass(frozen=True)
class OpSpec:
    kind: str
    attrs: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}")


_ATTR_TYPES = {
    "input": InputAttrs, "parameter": ParamAttrs, "conv2d": ConvAttrs, "pool2d": PoolAttrs,
    "batchnorm": BatchNormAttrs, "fully_connected": FcAttrs, "softmax_xent": XentAttrs, "add": AddAttrs,
}


@dataclass
class Node:
    id: int
    spec: OpSpec
    inputs: tuple
    shape: tuple
    name: str
    group: str = ""

    @property
    def kind(self):
        return self.spec.kind


@dataclass
class Tape:
    graph_version: int
    values: dict
    caches: dict
    order: list
    training: bool
    used: bool = False


def _arity_ok(kind, attrs, n):
    if kind in ("input", "parameter"):
        return n == 0
    if kind == "conv2d":
        return n == (3 if attrs.use_bias else 2)
    if kind == "fully_connected":
        return n == (3 if attrs.use_bias else 2)
    if kind == "batchnorm":
        return n == 3
    if kind == "softmax_xent":
        return n == 2
    if kind == "concat":
        return n >= 1
    if kind == "add":
        return n >= 1 and n == len(attrs.coeffs)
    return n == 1


def _infer(kind, attrs, shapes):
    """Output shape of a node given its input shapes; raises ShapeError."""
    if kind == "input":
        return check_shape(attrs.shape)
    if kind == "parameter":
        return check_shape(attrs.shape)
    if kind == "conv2d":
        x, w = shapes[0], shapes[1]
        if len(x) != 4:
            raise ShapeError(f"conv2d expects rank-4 input, got {x}")
        expect_w = (attrs.kernel_h, attrs.kernel_w, x[3], attrs.out_channels)
        if tuple(w) != expect_w:
            raise ShapeError(f"conv2d weights: expected {expect_w}, got {w}")
        if attrs.use_bias and tuple(shapes[2]) != (attrs.out_channels,):
            raise ShapeError(f"conv2d bias: expected ({attrs.out_channels},), got {shapes[2]}")
        try:
            h = nnops.out_size(x[1], attrs.kernel_h, attrs.stride, attrs.padding)
            wd = nnops.out_size(x[2], attrs.kernel_w, attrs.stride, attrs.padding)
        except ValueError as e:
            raise ShapeError(f"conv2d {attrs.kernel_h}x{attrs.kernel_w} on input {x}: {e}") from None
        return (x[0], h, wd, attrs.out_channels)
    if kind == "pool2d":
        x = shapes[0]
        if len(x) != 4:
            raise ShapeError(f"pool2d expects rank-4 input, got {x}")
        try:
            h = nnops.out_size(x[1], attrs.window_h, attrs.stride, attrs.padding)
            wd = nnops.out_size(x[2], attrs.window_w, attrs.stride, attrs.padding)
        except ValueError as e:
            raise ShapeError(f"pool2d {attrs.window_h}x{attrs.window_w} on input {x}: {e}") from None
        return (x[0], h, wd, x[3])
    if kind == "batchnorm":
        x, g, b = shapes
        if tuple(g) != (x[-1],) or tuple(b) != (x[-1],):
            raise ShapeError(f"batchnorm scale/shift must be ({x[-1]},), got {g} and {b}")
        return tuple(x)
    if kind == "relu":
        return tuple(shapes[0])
    if kind == "concat":
        ref = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(ref) or tuple(s[:-1]) != tuple(ref[:-1]):
                raise ShapeError(f"concat: expected leading dims {ref[:-1]}, got {s[:-1]}")
        return tuple(ref[:-1]) + (sum(s[-1] for s in shapes),)
    if kind == "fully_connected":
        x, w = shapes[0], shapes[1]
        d = math.prod(x[1:])
        if tuple(w) != (d, attrs.out_features):
            raise ShapeError(f"fully_connected weights: expected {(d, attrs.out_features)}, got {w}")
        return (x[0], attrs.out_features)
    if kind == "softmax_xent":
        z, t = shapes
        if len(z) != 2 or tuple(z) != tuple(t):
            raise ShapeError(f"softmax_xent expects matching [B,K] logits/targets, got {z} and {t}")
        return (1,)
    if kind == "add":
        ref = shapes[0]
        for s in shapes[1:]:
            if tuple(s) != tuple(ref):
                raise ShapeError(f"add: expected {ref}, got {s}")
        return tuple(ref)
    if kind == "global_avg_pool":
        x = shapes[0]
        if len(x) != 4:
            raise ShapeError(f"global_avg_pool expects rank-4 input, got {x}")
        return (x[0], 1, 1, x[3])
    raise AssertionError(kind)


class Graph:
    """A DAG of typed ops with parameters held by the graph itself.

    Parameter values are created lazily on first use from a per-parameter
    random stream keyed by the parameter's name, so analysis-only graphs of
    full-size networks never allocate weights.
    """

    def __init__(self, precision="f32", seed: int = 0):
        self.dtype = as_dtype(precision)
        self.seed = int(seed)
        self.nodes: list[Node] = []
        self.names: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.version = 0
        self._values: dict[int, np.ndarray] = {}
        self._state: dict[int, dict] = {}

    # -- construction ------------------------------------------------------

    def add_node(self, spec: OpSpec, inputs=(), name: str | None = None, group: str = "") -> int:
        inputs = tuple(int(i) for i in inputs)
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise GraphError(f"input {i} does not exist")
        want = _ATTR_TYPES.get(spec.kind)
        if want is not None and not isinstance(spec.attrs, want):
            raise GraphError(f"{spec.kind} needs {want.__name__} attributes")
        if not _arity_ok(spec.kind, spec.attrs, len(inputs)):
            raise GraphError(f"{spec.kind} got wrong number of inputs ({len(inputs)})")
        name = name or f"{spec.kind}_{nid}"
        if name in self.names:
            raise GraphError(f"duplicate node name {name!r}")
        try:
            shape = _infer(spec.kind, spec.attrs, [self.nodes[i].shape for i in inputs])
        except ShapeError as e:
            got = [self.nodes[i].shape for i in inputs]
            raise ShapeError(f"node {name!r} ({spec.kind}) with input shapes {got}: {e}") from None
        self.nodes.append(Node(nid, spec, inputs, shape, name, group))
        self.names[name] = nid
        self.version += 1
        return nid

    def infer_shapes(self) -> list[tuple]:
        """Recompute every node shape from scratch and check it against the stored one."""
        shapes: list[tuple] = []
        for n in self.nodes:
            s = _infer(n.kind, n.spec.attrs, [shapes[i] for i in n.inputs])
            if s != n.shape:
                raise ShapeError(f"node {n.name!r}: stored shape {n.shape} but inferred {s}")
            shapes.append(s)
        return shapes

    def shape(self, nid: int) -> tuple:
        return self.nodes[nid].shape

    def node(self, key) -> Node:
        return self.nodes[self.names[key] if isinstance(key, str) else key]

    # -- layer helpers -----------------------------------------------------

    def input(self, shape, name="input", group=""):
        return self.add_node(OpSpec("input", InputAttrs(tuple(shape))), (), name, group)

    def parameter(self, shape, init="he", fan_in=1, name=None, group="", trainable=True):
        attrs = ParamAttrs(tuple(shape), init, int(fan_in), trainable)
        return self.add_node(OpSpec("parameter", attrs), (), name, group)

    def conv2d(self, x, attrs: ConvAttrs, name: str, group=""):
        cin = self.shape(x)[-1]
        fan_in = attrs.kernel_h * attrs.kernel_w * cin
        w = self.parameter((attrs.kernel_h, attrs.kernel_w, cin, attrs.out_channels), "he", fan_in,
                           f"{name}/weights", group)
        ins = [x, w]
        if attrs.use_bias:
            ins.append(self.parameter((attrs.out_channels,), "zeros", 1, f"{name}/bias", group))
        return self.add_node(OpSpec("conv2d", attrs), ins, name, group)

    def batchnorm(self, x, name: str, attrs: BatchNormAttrs | None = None, group=""):
        c = self.shape(x)[-1]
        g = self.parameter((c,), "ones", 1, f"{name}/gamma", group)
        b = self.parameter((c,), "zeros", 1, f"{name}/beta", group)
        return self.add_node(OpSpec("batchnorm", attrs or BatchNormAttrs()), (x, g, b), name, group)

    def fully_connected(self, x, out_features: int, name: str, use_bias=True, group=""):
        d = math.prod(self.shape(x)[1:])
        w = self.parameter((d, out_features), "he", d, f"{name}/weights", group)
        ins = [x, w]
        if use_bias:
            ins.append(self.parameter((out_features,), "zeros", 1, f"{name}/bias", group))
        return self.add_node(OpSpec("fully_connected", FcAttrs(out_features, use_bias)), ins, name, group)

    def pool2d(self, x, attrs: PoolAttrs, name=None, group=""):
        return self.add_node(OpSpec("pool2d", attrs), (x,), name, group)

    def relu(self, x, name=None, group=""):
        return self.add_node(OpSpec("relu"), (x,), name, group)

    def concat(self, xs, name=None, group=""):
        return self.add_node(OpSpec("concat"), tuple(xs), name, group)

    def global_avg_pool(self, x, name=None, group=""):
        return self.add_node(OpSpec("global_avg_pool"), (x,), name, group)

    def softmax_xent(self, logits, targets, smoothing=0.0, name=None, group=""):
        return self.add_node(OpSpec("softmax_xent", XentAttrs(float(smoothing))), (logits, targets), name, group)

    def add(self, xs, coeffs=None, name=None, group=""):
        coeffs = tuple(float(c) for c in (coeffs or [1.0] * len(xs)))
        return self.add_node(OpSpec("add", AddAttrs(coeffs)), tuple(xs), name, group)

    # -- parameters and state -----------------------------------------------

    def parameters(self, trainable_only=True) -> list[int]:
        return [n.id for n in self.nodes
                if n.kind == "parameter" and (n.spec.attrs.trainable or not trainable_only)]

    def value(self, nid: int) -> np.ndarray:
        """Current value of a parameter node, initialising it on first access."""
        v = self._values.get(nid)
        if v is None:
            n = self.nodes[nid]
            if n.kind != "parameter":
                raise GraphError(f"{n.name!r} is not a parameter")
            a = n.spec.attrs
            if a.init == "zeros":
                v = np.zeros(a.shape, self.dtype)
            elif a.init == "ones":
                v = np.ones(a.shape, self.dtype)
            else:
                prng = Prng(self.seed, zlib.crc32(n.name.encode()))
                v = prng.truncated_normal(a.shape, math.sqrt(2.0 / a.fan_in), 2.0, self.dtype)
            self._values[nid] = v
        return v

    def set_value(self, nid: int, value) -> None:
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.nodes[nid].shape:
            raise ShapeError(f"{self.nodes[nid].name!r}: expected {self.nodes[nid].shape}, got {value.shape}")
        self._values[nid] = value

    def bn_state(self, nid: int) -> dict:
        st = self._state.get(nid)
        if st is None:
            c = self.nodes[nid].shape[-1]
            st = {"moving_mean": np.zeros(c, self.dtype), "moving_var": np.ones(c, self.dtype)}
            self._state[nid] = st
        return st

    def state_dict(self) -> dict[str, np.ndarray]:
        """All persistent tensors by name: parameters plus batchnorm moving statistics."""
        out = {}
        for n in self.nodes:
            if n.kind == "parameter":
                out[n.name] = self.value(n.id)
            elif n.kind == "batchnorm":
                st = self.bn_state(n.id)
                out[f"{n.name}/moving_mean"] = st["moving_mean"]
                out[f"{n.name}/moving_var"] = st["moving_var"]
        return out

    def load_state_dict(self, tensors: dict) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise GraphError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in tensors.items():
            if tuple(np.shape(arr)) != own[name].shape:
                raise ShapeError(f"{name}: expected {own[name].shape}, got {np.shape(arr)}")
        for name, arr in tensors.items():
            if name in self.names:
                self.set_value(self.names[name], arr)
            else:
                node, key = name.rsplit("/", 1)
                self.bn_state(self.names[node])[key] = np.asarray(arr, self.dtype).copy()

    # -- execution ---------------------------------------------------------

    def _ancestors(self, targets) -> list[int]:
        need = set(targets)
        for n in reversed(self.nodes):
            if n.id in need:
                need.update(n.inputs)
        return sorted(need)

    def forward(self, feeds: dict, outputs, training=False, check_finite: bool = __debug__):
        """Evaluate ``outputs`` in topological order.

        ``feeds`` maps input node ids (or names) to arrays. The leading (batch)
        dimension of an input may differ from the declared one; all other
        dims must match. Returns (list of output arrays, Tape).
        """
        feeds = {(self.names[k] if isinstance(k, str) else k): v for k, v in feeds.items()}
        outputs = [self.names[o] if isinstance(o, str) else o for o in outputs]
        order = self._ancestors(outputs)
        values: dict[int, np.ndarray] = {}
        caches: dict[int, object] = {}
        for nid in order:
            n = self.nodes[nid]
            kind, attrs = n.kind, n.spec.attrs
            xs = [values[i] for i in n.inputs]
            if kind == "input":
                if nid not in feeds:
                    raise GraphError(f"missing feed for input {n.name!r}")
                v = np.asarray(feeds[nid], dtype=self.dtype)
                if v.shape[1:] != n.shape[1:] or v.ndim != len(n.shape):
                    raise ShapeError(f"feed for {n.name!r}: expected (*, {n.shape[1:]}), got {v.shape}")
                out = v
            elif kind == "parameter":
                out = self.value(nid)
            elif kind == "conv2d":
                out, caches[nid] = nnops.conv2d_forward(xs[0], xs[1], xs[2] if attrs.use_bias else None, attrs)
            elif kind == "pool2d":
                out, caches[nid] = nnops.pool2d_forward(xs[0], attrs)
            elif kind == "batchnorm":
                use_batch = training and attrs.mode == "train"
                out, caches[nid] = nnops.batchnorm_forward(xs[0], xs[1], xs[2], self.bn_state(nid), attrs, use_batch)
            elif kind == "relu":
                out, caches[nid] = nnops.relu_forward(xs[0])
            elif kind == "concat":
                out, caches[nid] = nnops.concat_forward(xs)
            elif kind == "fully_connected":
                out, caches[nid] = nnops.fc_forward(xs[0], xs[1], xs[2] if attrs.use_bias else None)
            elif kind == "softmax_xent":
                loss, probs, q = nnops.softmax_xent_forward(xs[0], xs[1], attrs.smoothing)
                out = loss.reshape(1)
                caches[nid] = (probs, q)
            elif kind == "add":
                out = nnops.add_forward(xs, attrs.coeffs)
            elif kind == "global_avg_pool":
                out, caches[nid] = nnops.global_avg_pool_forward(xs[0])
            else:
                raise AssertionError(kind)
            if check_finite and kind not in ("input", "parameter") and not np.isfinite(out).all():
                raise FloatingPointError(f"non-finite activation at node {n.name!r} ({kind})")
            values[nid] = out
        tape = Tape(self.version, values, caches, order, training)
        return [values[o] for o in outputs], tape

    def _node_vjp(self, n: Node, g, tape: Tape) -> list:
        """Gradients for each input of ``n`` (None where not differentiable)."""
        kind, attrs, c = n.kind, n.spec.attrs, tape.caches.get(n.id)
        if kind == "conv2d":
            dx, dw, db = nnops.conv2d_backward(g, c, attrs)
            return [dx, dw] + ([db] if attrs.use_bias else [])
        if kind == "pool2d":
            return [nnops.pool2d_backward(g, c, attrs)]
        if kind == "batchnorm":
            return list(nnops.batchnorm_backward(g, c))
        if kind == "relu":
            return [nnops.relu_backward(g, c)]
        if kind == "concat":
            return nnops.concat_backward(g, c)
        if kind == "fully_connected":
            dx, dw, db = nnops.fc_backward(g, c, attrs.use_bias)
            return [dx, dw] + ([db] if attrs.use_bias else [])
        if kind == "softmax_xent":
            probs, q = c
            return [nnops.softmax_xent_backward(g, probs, q), None]
        if kind == "add":
            return nnops.add_backward(g, attrs.coeffs)
        if kind == "global_avg_pool":
            return [nnops.global_avg_pool_backward(g, c)]
        return []

    def vjp(self, tape: Tape, node, cotangent, wrt=None) -> dict[int, np.ndarray]:
        """Pull ``cotangent`` (same shape as ``node``'s value) back to the ``wrt`` nodes.

        Contributions reaching a node through several consumers are summed in
        ascending consumer order, so results are bitwise reproducible.
        """
        if tape.graph_version != self.version:
            raise GraphError("tape was recorded on a different graph version")
        if tape.used:
            raise GraphError("tape already consumed by a backward pass")
        tape.used = True
        node = self.names[node] if isinstance(node, str) else node
        wrt = self.parameters() if wrt is None else [self.names[w] if isinstance(w, str) else w for w in wrt]
        contribs: dict[int, list] = {node: [(len(self.nodes), 0, np.asarray(cotangent, self.dtype))]}
        grads: dict[int, np.ndarray] = {}
        for nid in reversed(tape.order):
            parts = contribs.pop(nid, None)
            if parts is None:
                continue
            parts.sort(key=lambda p: (p[0], p[1]))
            g = parts[0][2]
            for p in parts[1:]:
                g = g + p[2]
            n = self.nodes[nid]
            if n.kind in ("input", "parameter"):
                grads[nid] = g
                continue
            for slot, (src, dsrc) in enumerate(zip(n.inputs, self._node_vjp(n, g, tape))):
                if dsrc is not None:
                    contribs.setdefault(src, []).append((nid, slot, dsrc))
        return {w: grads.get(w, np.zeros(self.nodes[w].shape, self.dtype)) for w in wrt}

    def backward(self, tape: Tape, loss, wrt=None) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` node for every trainable parameter (or ``wrt``)."""
        loss = self.names[loss] if isinstance(loss, str) else loss
        if self.nodes[loss].shape != (1,):
            raise GraphError(f"loss node {self.nodes[loss].name!r} is not scalar: {self.nodes[loss].shape}")
        return self.vjp(tape, loss, np.ones(1, self.dtype), wrt)
