"""Plain-text architecture files.

One statement per line, ``#`` starts a comment, indentation is cosmetic::

    format 1
    name tiny32
    input 32x32x3
    classes 10
    conv 3x3/2 valid 16
    pool max 3x3/2 valid
    module block_a factorized_5x5 grid=15
      branch
        conv 1x1/1 same 16
      end
      branch
        conv 1x1/1 same 16
        split
          conv 1x3/1 same 24
        end
        split
          conv 3x1/1 same 24
        end
      end
    end
    aux block_a pool=avg:5x5/3 reduce=128 hidden=768 weight=0.3 grid=17

Conv rows take optional ``linear`` and ``nobn`` flags; ``nobn`` gives the
conv a bias instead of batch normalisation.
"""

from __future__ import annotations

import re
from pathlib import Path

from .blocks import STEM_VARIANTS, VARIANTS, ArchSpec, AuxHeadSpec, BranchSpec, ConvLayer, InceptionModuleSpec, PoolLayer

FORMAT_VERSION = 1
ASSETS = Path(__file__).parent / "assets"
_KERNEL = re.compile(r"^(\d+)x(\d+)/(\d+)$")
_SHAPE = re.compile(r"^(\d+)x(\d+)x(\d+)$")


class ArchParseError(ValueError):
    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line, self.col, self.msg = line, col, msg


# -- printing -------------------------------------------------------------------

def _fmt_layer(layer) -> str:
    if isinstance(layer, PoolLayer):
        return f"pool {layer.kind} {layer.kh}x{layer.kw}/{layer.stride} {layer.padding}"
    s = f"conv {layer.kh}x{layer.kw}/{layer.stride} {layer.padding} {layer.filters}"
    if layer.activation == "linear":
        s += " linear"
    if not layer.batchnorm:
        s += " nobn"
    return s


def dumps(arch: ArchSpec) -> str:
    h, w, c = arch.input_shape
    out = [f"format {arch.format_version}", f"name {arch.name}", f"input {h}x{w}x{c}", f"classes {arch.classes}"]
    for item in arch.layers:
        if not isinstance(item, InceptionModuleSpec):
            out.append(_fmt_layer(item))
            continue
        head = f"module {item.name} {item.variant}"
        if item.grid is not None:
            head += f" grid={item.grid}"
        if item.variant == "asymmetric_nxn":
            head += f" n={item.n}"
        out.append(head)
        for br in item.branches:
            out.append("  branch")
            out.extend("    " + _fmt_layer(layer) for layer in br.layers)
            for tail in br.split:
                out.append("    split")
                out.extend("      " + _fmt_layer(layer) for layer in tail)
                out.append("    end")
            out.append("  end")
        out.append("end")
    if arch.aux is not None:
        a = arch.aux
        p = a.pool
        line = (f"aux {a.attach} pool={p.kind}:{p.kh}x{p.kw}/{p.stride} reduce={a.reduce_filters} "
                f"hidden={a.hidden_filters} weight={a.loss_weight!r} grid={a.grid}")
        if not a.batchnorm:
            line += " nobn"
        out.append(line)
    return "\n".join(out) + "\n"


def save(arch: ArchSpec, path) -> None:
    Path(path).write_text(dumps(arch))


# -- parsing ----------------------------------------------------------------------

class _Tokens:
    def __init__(self, lineno: int, text: str):
        self.lineno = lineno
        self.items = [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", text)]
        self.pos = 0

    def error(self, msg, at=None):
        k = self.pos if at is None else at
        col = self.items[k][1] if k < len(self.items) else (self.items[-1][1] + len(self.items[-1][0]) if self.items else 1)
        raise ArchParseError(self.lineno, col, msg)

    def next(self, what: str) -> str:
        if self.pos >= len(self.items):
            self.error(f"expected {what}")
        tok = self.items[self.pos][0]
        self.pos += 1
        return tok

    def int(self, what: str, low=1) -> int:
        tok = self.next(what)
        if not tok.isdigit() or int(tok) < low:
            self.error(f"expected {what} (integer >= {low}), got {tok!r}", self.pos - 1)
        return int(tok)

    def kernel(self):
        tok = self.next("kernel KHxKW/S")
        m = _KERNEL.match(tok)
        if not m or min(map(int, m.groups())) < 1:
            self.error(f"expected kernel KHxKW/S, got {tok!r}", self.pos - 1)
        return tuple(map(int, m.groups()))

    def choice(self, what, options) -> str:
        tok = self.next(what)
        if tok not in options:
            self.error(f"expected {what} in {sorted(options)}, got {tok!r}", self.pos - 1)
        return tok

    def done(self):
        if self.pos < len(self.items):
            self.error(f"unexpected token {self.items[self.pos][0]!r}")


def _conv(t: _Tokens) -> ConvLayer:
    kh, kw, s = t.kernel()
    pad = t.choice("padding", {"same", "valid"})
    filters = t.int("filter count")
    act, bn = "relu", True
    while t.pos < len(t.items):
        tok = t.next("flag")
        if tok == "linear":
            act = "linear"
        elif tok == "nobn":
            bn = False
        else:
            t.error(f"unknown conv flag {tok!r}", t.pos - 1)
    return ConvLayer(kh, kw, filters, s, pad, act, bn)


def _pool(t: _Tokens) -> PoolLayer:
    kind = t.choice("pool kind", {"max", "avg"})
    kh, kw, s = t.kernel()
    pad = t.choice("padding", {"same", "valid"})
    t.done()
    return PoolLayer(kind, kh, kw, s, pad)


def _layer(t: _Tokens, word: str):
    return _conv(t) if word == "conv" else _pool(t)


def _options(t: _Tokens, allowed) -> dict:
    out = {}
    for k in range(t.pos, len(t.items)):
        tok = t.items[k][0]
        key, eq, val = tok.partition("=")
        if not eq and tok in allowed:
            out[tok] = True
        elif eq and key in allowed and val:
            out[key] = val
        else:
            t.error(f"unexpected option {tok!r}", k)
    t.pos = len(t.items)
    return out


def loads(text: str) -> ArchSpec:
    lines = []
    for i, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        if body.strip():
            lines.append(_Tokens(i, body))
    if not lines:
        raise ArchParseError(1, 1, "empty architecture file")

    header: dict = {}
    items: list = []
    aux = None
    stack: list = []  # open blocks: ["module", name, variant, grid, n, branches] / ["branch", layers, split] / ["split", layers]
    last = lines[-1]
    for t in lines:
        word = t.next("statement")
        if word in ("format", "name", "input", "classes"):
            if stack or items:
                t.error(f"{word!r} belongs in the header, before any layer", 0)
            if word in header:
                t.error(f"duplicate {word!r}", 0)
            if word == "format":
                v = t.int("format version")
                if v != FORMAT_VERSION:
                    t.error(f"unsupported format version {v}", 1)
                header[word] = v
            elif word == "name":
                header[word] = t.next("name")
            elif word == "input":
                tok = t.next("input shape HxWxC")
                m = _SHAPE.match(tok)
                if not m or min(map(int, m.groups())) < 1:
                    t.error(f"expected input shape HxWxC, got {tok!r}", 1)
                header[word] = tuple(map(int, m.groups()))
            else:
                header[word] = t.int("class count")
            t.done()
        elif word in ("conv", "pool"):
            layer = _layer(t, word)
            if not stack:
                items.append(layer)
            elif stack[-1][0] == "branch":
                if stack[-1][2]:
                    t.error("layers after a split must go inside another split", 0)
                stack[-1][1].append(layer)
            elif stack[-1][0] == "split":
                stack[-1][1].append(layer)
            else:
                t.error("layers inside a module must be inside a branch", 0)
        elif word == "module":
            if stack:
                t.error("modules cannot nest", 0)
            name = t.next("module name")
            variant = t.choice("module variant", set(VARIANTS))
            opts = _options(t, {"grid", "n"})
            for key in opts:
                if not str(opts[key]).isdigit():
                    t.error(f"{key} must be an integer", 0)
            stack.append(["module", name, variant, int(opts.get("grid", 0)) or None,
                          int(opts["n"]) if "n" in opts else None, []])
        elif word == "branch":
            t.done()
            if not stack or stack[-1][0] != "module":
                t.error("'branch' must be inside a module", 0)
            stack.append(["branch", [], []])
        elif word == "split":
            t.done()
            if not stack or stack[-1][0] != "branch":
                t.error("'split' must be inside a branch", 0)
            stack.append(["split", []])
        elif word == "end":
            t.done()
            if not stack:
                t.error("'end' without an open block", 0)
            block = stack.pop()
            if block[0] == "split":
                if not block[1]:
                    t.error("empty split", 0)
                stack[-1][2].append(tuple(block[1]))
            elif block[0] == "branch":
                if not block[1] and not block[2]:
                    t.error("empty branch", 0)
                stack[-1][5].append(BranchSpec(tuple(block[1]), tuple(block[2])))
            else:
                _, name, variant, grid, n, branches = block
                if not branches:
                    t.error(f"module {name!r} has no branches", 0)
                try:
                    items.append(InceptionModuleSpec(name, variant, tuple(branches), grid, n))
                except ValueError as e:
                    t.error(str(e), 0)
        elif word == "aux":
            if stack:
                t.error("'aux' must be at top level", 0)
            if aux is not None:
                t.error("duplicate aux head", 0)
            attach = t.next("attach module name")
            opts = _options(t, {"pool", "reduce", "hidden", "weight", "grid", "nobn"})
            kw = {}
            try:
                if "pool" in opts:
                    kind, _, k = opts["pool"].partition(":")
                    m = _KERNEL.match(k)
                    if kind not in ("max", "avg") or not m:
                        raise ValueError(f"bad aux pool {opts['pool']!r}")
                    kh, kw_, s = map(int, m.groups())
                    kw["pool"] = PoolLayer(kind, kh, kw_, s, "valid")
                for key, field in (("reduce", "reduce_filters"), ("hidden", "hidden_filters"), ("grid", "grid")):
                    if key in opts:
                        kw[field] = int(opts[key])
                if "weight" in opts:
                    kw["loss_weight"] = float(opts["weight"])
                kw["batchnorm"] = "nobn" not in opts
                aux = AuxHeadSpec(attach, **kw)
            except ValueError as e:
                t.error(str(e), 1)
        else:
            t.error(f"unknown statement {word!r}", 0)
    if stack:
        raise ArchParseError(last.lineno + 1, 1, f"unterminated {stack[-1][0]} block")
    for key in ("name", "input", "classes"):
        if key not in header:
            raise ArchParseError(lines[0].lineno, 1, f"missing header line {key!r}")
    if not items:
        raise ArchParseError(last.lineno, 1, "architecture has no layers")
    if aux is not None and aux.attach not in {m.name for m in items if isinstance(m, InceptionModuleSpec)}:
        raise ArchParseError(last.lineno, 1, f"aux head attaches to unknown module {aux.attach!r}")
    return ArchSpec(header["name"], header["input"], header["classes"], tuple(items), aux,
                    header.get("format", FORMAT_VERSION))


def load(path) -> ArchSpec:
    return loads(Path(path).read_text())


def bundled(name: str) -> Path:
    """Path of a bundled arch file: v3, tiny, tiny64, v1_stem or stem_<variant>."""
    p = ASSETS / f"{name}.arch"
    if not p.exists():
        raise FileNotFoundError(f"no bundled arch {name!r}; have {sorted(q.stem for q in ASSETS.glob('*.arch'))}")
    return p


BUNDLED = ("v3", "tiny", "tiny64", "v1_stem") + tuple(f"stem_{v}" for v in STEM_VARIANTS)
