"""Oracle suite: cost ratios, shape chain, budgets, gradients, kernel composition,
label smoothing, recipe units, stem parity and rewrite safety.

Every check returns a ``Check``; ``run`` collects them by group.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import analysis, banks, nnops, rewrite, train
from .blocks import STEM_VARIANTS, ArchSpec, ConvLayer, PoolLayer, shape_chain, with_stem
from .graph import Graph
from .tensor import Prng


@dataclass
class Check:
    group: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.group:<8} {self.name:<44} {self.detail}"


# -- finite differences -------------------------------------------------------------

def gradcheck(graph: Graph, out: int, feeds: dict, wrt: list, prng: Prng, h: float = 1e-5,
              max_coords: int = 40, training: bool = True) -> float:
    """Max relative error between vjp and central differences of <c, f>.

    Relative error of one tensor is max|a - n| / max(max|a|, max|n|, 1e-12);
    up to ``max_coords`` coordinates per tensor are probed.
    """
    (y,), tape = graph.forward(feeds, [out], training=training, check_finite=True)
    c = prng.normal(y.shape)
    analytic = graph.vjp(tape, out, c, wrt)

    def objective():
        (v,), _ = graph.forward(feeds, [out], training=training, check_finite=False)
        return float((c * v).sum())

    worst = 0.0
    for nid in wrt:
        node = graph.nodes[nid]
        base = feeds[nid] if node.kind == "input" else graph.value(nid)
        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(prng.permutation(flat.size)[:max_coords])
        a = analytic[nid].reshape(-1)[coords]
        num = np.empty(len(coords))
        for j, k in enumerate(coords):
            old = flat[k]
            flat[k] = old + h
            fp = objective()
            flat[k] = old - h
            fm = objective()
            flat[k] = old
            num[j] = (fp - fm) / (2 * h)
        scale = max(np.abs(a).max(), np.abs(num).max(), 1e-12)
        worst = max(worst, float(np.abs(a - num).max() / scale))
    return worst


def _spaced(prng: Prng, shape, gap=0.01) -> np.ndarray:
    """Distinct values at least ``gap`` apart, shuffled: no max-pool ties."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap + prng.uniform((n,), 0, gap * 0.1)
    return vals[prng.permutation(n)].reshape(shape)


def _away_from_zero(prng: Prng, shape, margin=0.05) -> np.ndarray:
    x = prng.normal(shape)
    return np.sign(x) * (margin + np.abs(x))


GRAD_KINDS = ("conv2d", "pool2d", "batchnorm", "relu", "concat", "fully_connected",
              "softmax_xent", "add", "global_avg_pool")


def grad_case(kind: str, k: int, prng: Prng):
    """k-th random instance of an op kind: (graph, out node, feeds, wrt, training)."""
    g = Graph("f64", seed=k)
    b = 2 + k % 2
    training = True
    if kind == "conv2d":
        kh, kw = [(1, 1), (3, 3), (1, 3), (3, 1), (2, 2), (5, 5)][k % 6]
        stride = 1 + (k // 6) % 2
        pad = ("same", "valid")[k % 2]
        hw = max(kh, kw) + 3 + k % 3
        x = g.input((b, hw, hw + 1, 2), "x")
        out = g.conv2d(x, nnops.ConvAttrs(kh, kw, stride, pad, 3, use_bias=k % 3 == 0), "c")
        feeds = {x: prng.normal((b, hw, hw + 1, 2))}
    elif kind == "pool2d":
        mode = ("max", "avg")[k % 2]
        pad = ("valid", "same")[(k // 2) % 2]
        win, stride = [(2, 2), (3, 2), (3, 1), (2, 1), (3, 3)][k % 5]
        x = g.input((b, 7, 6, 2), "x")
        out = g.pool2d(x, nnops.PoolAttrs(win, win, stride, mode, pad), "p")
        feeds = {x: _spaced(prng, (b, 7, 6, 2))}
    elif kind == "batchnorm":
        x = g.input((b + 1, 3, 3, 4), "x")
        out = g.batchnorm(x, "bn")
        training = k % 4 != 3
        feeds = {x: prng.normal((b + 1, 3, 3, 4), mean=0.5, std=2.0)}
        for nid in g.parameters():
            g.set_value(nid, prng.normal(g.shape(nid), mean=1.0 if "gamma" in g.nodes[nid].name else 0.0, std=0.5))
    elif kind == "relu":
        x = g.input((b, 4, 5), "x")
        out = g.relu(x, "r")
        feeds = {x: _away_from_zero(prng, (b, 4, 5))}
    elif kind == "concat":
        n = 2 + k % 3
        xs = [g.input((b, 3, 3, 1 + j), f"x{j}") for j in range(n)]
        out = g.concat(xs, "cat")
        feeds = {x: prng.normal(g.shape(x)) for x in xs}
    elif kind == "fully_connected":
        x = g.input((b, 6), "x")
        out = g.fully_connected(x, 4, "fc", use_bias=k % 2 == 0)
        feeds = {x: prng.normal((b, 6))}
    elif kind == "softmax_xent":
        x = g.input((b, 5), "z")
        t = g.input((b, 5), "q")
        out = g.softmax_xent(x, t, smoothing=(0.0, 0.1, 0.3)[k % 3], name="loss")
        q = prng.uniform((b, 5), 0.0, 1.0)
        feeds = {x: prng.normal((b, 5), std=2.0), t: q / q.sum(axis=1, keepdims=True)}
        wrt = [x]
        return g, out, feeds, wrt, training
    elif kind == "add":
        n = 1 + k % 3
        xs = [g.input((b, 3, 2), f"x{j}") for j in range(n)]
        coeffs = tuple(float(c) for c in prng.uniform((n,), -2.0, 2.0))
        out = g.add(xs, coeffs, "sum")
        feeds = {x: prng.normal((b, 3, 2)) for x in xs}
    elif kind == "global_avg_pool":
        x = g.input((b, 3 + k % 3, 4, 3), "x")
        out = g.global_avg_pool(x, "gap")
        feeds = {x: prng.normal(g.shape(x))}
    else:
        raise ValueError(kind)
    wrt = [n.id for n in g.nodes if n.kind == "input"] + g.parameters()
    return g, out, feeds, wrt, training


def gradient_errors(kind: str, instances: int = 20, seed: int = 0) -> list[float]:
    prng = Prng(seed, stream_id=GRAD_KINDS.index(kind) + 1)
    out = []
    for k in range(instances):
        g, node, feeds, wrt, training = grad_case(kind, k, prng)
        out.append(gradcheck(g, node, feeds, wrt, prng, training=training))
    return out


# -- individual groups ----------------------------------------------------------------

def _single_conv_arch(kh, kw, c, grid=17) -> ArchSpec:
    return ArchSpec("site", (grid, grid, c), 2, (ConvLayer(kh, kw, c),))


def _site_ratio(rule: rewrite.RewriteRule, kh, kw, c=32, grid=17) -> Fraction:
    _, rep = rewrite.apply_rule(_single_conv_arch(kh, kw, c, grid), rule)
    (site,) = rep.sites
    return Fraction(site.mult_adds_after, site.mult_adds_before)


def _conv_cost(kh, kw, c=32, grid=17) -> int:
    return analysis.count_cost(_single_conv_arch(kh, kw, c, grid)).kind_mult_adds("conv2d")


def check_cost() -> list[Check]:
    r = Fraction(_conv_cost(5, 5), _conv_cost(3, 3))
    out = [Check("cost", "5x5 / 3x3 cost ratio = 25/9", r == Fraction(25, 9), str(r))]
    r = _site_ratio(rewrite.RewriteRule("factorize_5x5_to_two_3x3"), 5, 5)
    out.append(Check("cost", "two 3x3 for 5x5: after/before = 18/25", r == Fraction(18, 25), f"saving {1 - r}"))
    r = _site_ratio(rewrite.RewriteRule("factorize_nxn_to_asymmetric", n=3, force=True), 3, 3)
    out.append(Check("cost", "1x3+3x1 for 3x3: after/before = 6/9", r == Fraction(6, 9), f"saving {1 - r}"))
    r = _site_ratio(rewrite.RewriteRule("factorize_3x3_to_two_2x2"), 3, 3)
    out.append(Check("cost", "two 2x2 for 3x3: after/before = 8/9", r == Fraction(8, 9), f"saving {1 - r}"))
    ok = True
    for d, k in itertools.product((4, 10, 16), (1, 8, 24)):
        v = rewrite.pool_order_variants(d, k, 9)
        ok &= Fraction(v.conv_then_pool_cost, v.pool_then_conv_cost) == 4
    v = rewrite.pool_order_variants(10, 8, 9)
    ok &= v.conv_then_pool_cost == 115_200
    out.append(Check("cost", "conv-then-pool / pool-then-conv = 4", ok, f"d=10,k=8: {v.conv_then_pool_cost}"))
    flags = v.bottleneck_flags
    out.append(Check("cost", "only pool-then-conv flagged as bottleneck",
                     flags == {"conv_then_pool": False, "pool_then_conv": True, "parallel": False}, str(flags)))
    return out


V3_SHAPE_CHAIN = [(299, 299, 3), (149, 149, 32), (147, 147, 32), (147, 147, 64), (73, 73, 64), (71, 71, 80),
                (35, 35, 192), (35, 35, 288), (17, 17, 768), (8, 8, 1280), (8, 8, 2048), (1, 1, 2048), (1000,)]


def collapse(chain) -> list:
    return [s for k, s in enumerate(chain) if k == 0 or s != chain[k - 1]]


def check_shapes(arch: ArchSpec | None = None) -> list[Check]:
    arch = arch or banks.inception_v3()
    chain = collapse([tuple(s) for s in shape_chain(arch)])
    return [Check("shapes", "layer table shape chain", chain == V3_SHAPE_CHAIN,
                  " -> ".join("x".join(map(str, s)) for s in chain))]


def check_budget(arch: ArchSpec | None = None) -> list[Check]:
    arch = arch or banks.inception_v3()
    rep = analysis.count_cost(arch)
    p, m = rep.total_params, rep.total_mult_adds
    return [Check("budget", "params in [20e6, 25e6]", 20e6 <= p <= 25e6, f"{p:,}"),
            Check("budget", "mult-adds in [3.8e9, 5.8e9]", 3.8e9 <= m <= 5.8e9, f"{m:,}")]


def check_grad(instances: int = 20) -> list[Check]:
    out = []
    for kind in GRAD_KINDS:
        errs = gradient_errors(kind, instances)
        out.append(Check("grad", f"{kind} finite differences ({len(errs)} cases)", max(errs) < 1e-4,
                         f"max rel err {max(errs):.2e}"))
    return out


def check_compose(trials: int = 50) -> list[Check]:
    out = []
    for label, pair in (("3x3 o 3x3", [ConvLayer(3, 3, 3), ConvLayer(3, 3, 2)]),
                        ("3x1 o 1x3", [ConvLayer(3, 1, 4), ConvLayer(1, 3, 3)])):
        last = pair[-1]
        orig = ConvLayer(1 + sum(p.kh - 1 for p in pair), 1 + sum(p.kw - 1 for p in pair), last.filters)
        rep = rewrite.check_equivalence(orig, pair, "linear", trials, 1e-10, in_channels=2)
        out.append(Check("compose", f"{label} linear equivalence ({trials} trials)", bool(rep.passed),
                         f"max abs diff {rep.max_abs_diff:.1e}"))
    prng = Prng(11)
    k1, k2, k3 = (prng.normal((3, 3, 2, 2)) for _ in range(3))
    a = rewrite.compose_kernels(rewrite.compose_kernels(k1, k2), k3)
    b = rewrite.compose_kernels(k1, rewrite.compose_kernels(k2, k3))
    d = float(np.abs(a - b).max())
    out.append(Check("compose", "composition is associative", d <= 1e-10, f"{d:.1e}"))
    return out


def lsr_floor_reference(K: int = 10, eps: float = 0.1) -> float:
    """Entropy of the smoothed target written out in closed form."""
    hi = 1 - eps + eps / K
    lo = eps / K
    return -(hi * math.log(hi) + (K - 1) * lo * math.log(lo))


def check_lsr(instances: int = 1000) -> list[Check]:
    prng = Prng(5)
    out = []
    worst = 0.0
    for _ in range(20):
        cfg = train.SmoothingConfig(0.1, 10)
        z = prng.normal((8, 10), std=3.0)
        y = prng.integers(0, 10, 8)
        res = train.lsr_loss(z, y, cfg)
        logp = nnops.log_softmax(z)
        onehot = np.eye(10)[y]
        ident = ((1 - cfg.epsilon) * train.cross_entropy(onehot, logp)
                 + cfg.epsilon * train.cross_entropy(np.full((8, 10), 0.1), logp)).mean()
        worst = max(worst, abs(res.loss - ident))
    out.append(Check("lsr", "decomposition identity", worst <= 1e-12, f"{worst:.1e}"))
    lo, hi = 0.0, 0.0
    for _ in range(instances):
        K = int(prng.integers(2, 50))
        eps = float(prng.uniform((1,), 0, 0.99)[0])
        z = prng.normal((1, K), std=float(prng.uniform((1,), 0.1, 30)[0]))
        g = train.lsr_loss(z, prng.integers(0, K, 1), train.SmoothingConfig(eps, K)).grad
        lo, hi = min(lo, g.min()), max(hi, g.max())
    out.append(Check("lsr", f"gradient in [-1, 1] ({instances} cases)", -1 <= lo and hi <= 1, f"[{lo:.3f}, {hi:.3f}]"))
    cfg = train.SmoothingConfig(0.1, 10)
    q = train.smoothed_targets(3, cfg)
    floor = train.lsr_loss(np.log(q)[None], [3], cfg).loss
    ref = lsr_floor_reference()
    out.append(Check("lsr", "floor for K=10, eps=0.1 is 0.50029", abs(floor - 0.50029) <= 1e-4 and abs(floor - ref) < 1e-12,
                     f"{floor:.6f}"))
    z = prng.normal((16, 10), std=2.0)
    y = prng.integers(0, 10, 16)
    plain = float(-nnops.log_softmax(z)[np.arange(16), y].mean())
    d = abs(train.lsr_loss(z, y, train.SmoothingConfig(0.0, 10)).loss - plain)
    out.append(Check("lsr", "eps=0 equals plain cross-entropy", d <= 1e-15, f"{d:.1e}"))
    return out


def check_recipe() -> list[Check]:
    s = train.ScheduleConfig()
    vals = [train.lr_at(s, e) for e in (0, 2, 4)]
    out = [Check("recipe", "lr at epochs 0/2/4", vals == [0.045, 0.045 * 0.94, 0.045 * 0.94 ** 2],
                 ", ".join(f"{v:.6f}" for v in vals))]
    prng = Prng(3)
    ok = True
    for scale in (0.1, 0.5, 1.0, 3.0, 10.0):
        g = {0: prng.normal((4, 3)), 1: prng.normal((5,))}
        n = train.global_norm(g)
        g = {k: v * scale / n * 5 for k, v in g.items()}
        n = train.global_norm(g)
        c = train.clip_gradients(g, train.ClipConfig(2.0))
        ok &= abs(train.global_norm(c) - min(n, 2.0)) <= 1e-12
    out.append(Check("recipe", "clipped norm = min(norm, 2)", ok))
    x = {0: np.array([5.0])}
    state: dict = {}
    for _ in range(500):
        train.optimizer_step(x, {0: 2 * x[0]}, state, train.OptimizerConfig("rmsprop", 0.9, 1.0), 0.1)
    out.append(Check("recipe", "rmsprop on x^2 from 5: |x| < 0.1", abs(x[0][0]) < 0.1, f"x = {x[0][0]:.2e}"))
    return out


def stem_costs(arch: ArchSpec | None = None, mode="default") -> dict:
    arch = arch or banks.inception_v3()
    return {v: analysis.count_cost(with_stem(arch, v), mode=mode) for v in STEM_VARIANTS}


def parity_deviation(costs: dict) -> float:
    vals = [r.total_mult_adds for r in costs.values()]
    return max(vals) / min(vals) - 1


def pooling_share(report: analysis.CostReport) -> float:
    return report.kind_mult_adds("pool2d", "global_avg_pool") / report.total_mult_adds


def check_stems() -> list[Check]:
    costs = stem_costs()
    dev = parity_deviation(costs)
    full = stem_costs(mode="full")
    share = max(pooling_share(r) for r in full.values())
    return [Check("stems", "stem variants cost parity within 5%", dev <= 0.05,
                  "deviation %.4f (%s)" % (dev, ", ".join(f"{k}: {r.total_mult_adds:,}" for k, r in costs.items()))),
            Check("stems", "pooling share < 1% (full costing)", share < 0.01, f"max share {share:.4%}")]


def bundled_archs() -> dict:
    from . import archfile
    return {name: archfile.load(archfile.bundled(name)) for name in archfile.BUNDLED}


def rewrite_rules() -> list:
    return [rewrite.RewriteRule("factorize_5x5_to_two_3x3"),
            rewrite.RewriteRule("factorize_5x5_to_two_3x3", alpha="sqrt_split"),
            rewrite.RewriteRule("factorize_nxn_to_asymmetric", n=7),
            rewrite.RewriteRule("factorize_nxn_to_asymmetric", n=3),
            rewrite.RewriteRule("factorize_nxn_to_asymmetric", n=3, force=True),
            rewrite.RewriteRule("factorize_7x7_to_three_3x3"),
            rewrite.RewriteRule("factorize_3x3_to_two_2x2"),
            rewrite.RewriteRule("pool_order_swap")]


def count_kernels(arch: ArchSpec, kh, kw) -> int:
    n = 0
    for item in arch.layers:
        layers = [item] if isinstance(item, (ConvLayer, PoolLayer)) else [lyr for b in item.branches for lyr in b.all_layers()]
        n += sum(isinstance(lyr, ConvLayer) and (lyr.kh, lyr.kw) == (kh, kw) for lyr in layers)
    return n


def check_rewrite(archs: dict | None = None) -> list[Check]:
    archs = archs or bundled_archs()
    ok, sites, problems = True, 0, []
    for (name, arch), rule in itertools.product(archs.items(), rewrite_rules()):
        try:
            new, rep = rewrite.apply_rule(arch, rule)
        except AssertionError as e:
            ok = False
            problems.append(f"{name}/{rule.name}: {e}")
            continue
        before, after = rep.chain_before, rep.chain_after
        mapped = all(before[o] == after[n] for o, n in rep.index_map.items())
        rf = all(s.rf_ok for s in rep.sites)
        if not (mapped and rf and before[-1] == after[-1]):
            ok = False
            problems.append(f"{name}/{rule.name}")
        sites += len(rep.sites)
    out = [Check("rewrite", "shape chain and site receptive fields kept", ok,
                 f"{sites} sites over {len(archs)} archs" + (f"; broken: {problems}" if problems else ""))]
    ok = True
    for arch in archs.values():
        once, _ = rewrite.apply_rule(arch, rewrite.RewriteRule("factorize_5x5_to_two_3x3"))
        twice, rep = rewrite.apply_rule(once, rewrite.RewriteRule("factorize_5x5_to_two_3x3"))
        ok &= count_kernels(once, 5, 5) == 0 and not rep.sites and twice == once
    out.append(Check("rewrite", "factorize_5x5 idempotent", ok))
    return out


GROUPS = {
    "cost": check_cost,
    "shapes": check_shapes,
    "budget": check_budget,
    "grad": check_grad,
    "compose": check_compose,
    "lsr": check_lsr,
    "recipe": check_recipe,
    "stems": check_stems,
    "rewrite": check_rewrite,
}


def run(groups=None) -> list[Check]:
    groups = list(GROUPS) if not groups else list(groups)
    unknown = [g for g in groups if g not in GROUPS]
    if unknown:
        raise ValueError(f"unknown check groups {unknown}; choose from {list(GROUPS)}")
    out = []
    for g in groups:
        out.extend(GROUPS[g]())
    return out
