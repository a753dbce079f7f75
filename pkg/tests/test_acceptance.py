"""The ten acceptance criteria at their stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary,
and also prints it directly (visible with ``-s``).
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from inceptkit import analysis, banks, data, nnops, rewrite, train, verify
from inceptkit.blocks import STEM_VARIANTS, ArchSpec, ConvLayer, shape_chain
from inceptkit.tensor import Prng


def record(entry, name, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    entry.update(ok=ok, detail=f"{detail} [{elapsed:.2f}s, budget {budget:g}s]")
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {entry['detail']}")
    return ok


def one_conv(k, c=32, grid=17):
    return ArchSpec("one", (grid, grid, c), 10, (ConvLayer(k, k, c),))


def site_fraction(rule, arch):
    _, rep = rewrite.apply_rule(arch, rule)
    (site,) = rep.sites
    return Fraction(site.mult_adds_after, site.mult_adds_before)


def test_01_cost_ratios(criterion):
    t = time.perf_counter()
    c5 = analysis.count_cost(one_conv(5)).kind_mult_adds("conv2d")
    c3 = analysis.count_cost(one_conv(3)).kind_mult_adds("conv2d")
    got = {
        "5x5/3x3": Fraction(c5, c3),
        "two 3x3 saving": 1 - site_fraction(rewrite.RewriteRule("factorize_5x5_to_two_3x3"), one_conv(5)),
        "3x1+1x3 saving": 1 - site_fraction(rewrite.RewriteRule("factorize_nxn_to_asymmetric", n=3), one_conv(3)),
        "two 2x2 saving": 1 - site_fraction(rewrite.RewriteRule("factorize_3x3_to_two_2x2"), one_conv(3)),
    }
    v = rewrite.pool_order_variants(10, 8, 9)
    got["conv-then-pool / pool-then-conv"] = Fraction(v.conv_then_pool_cost, v.pool_then_conv_cost)
    want = {"5x5/3x3": Fraction(25, 9), "two 3x3 saving": Fraction(28, 100), "3x1+1x3 saving": Fraction(1, 3),
            "two 2x2 saving": Fraction(1, 9), "conv-then-pool / pool-then-conv": Fraction(4)}
    ok = got == want
    detail = ", ".join(f"{k} = {got[k]}" for k in want)
    assert record(criterion, "cost ratios (exact)", ok, detail, time.perf_counter() - t, 1.0)


V3_CHAIN = [(299, 299, 3), (149, 149, 32), (147, 147, 32), (147, 147, 64), (73, 73, 64), (71, 71, 80),
          (35, 35, 192), (35, 35, 288), (17, 17, 768), (8, 8, 1280), (8, 8, 2048), (1, 1, 2048), (1000,)]


def test_02_v3_shape_chain(criterion):
    t = time.perf_counter()
    chain = [tuple(s) for s in shape_chain(banks.inception_v3())]
    distinct = [s for k, s in enumerate(chain) if k == 0 or s != chain[k - 1]]
    detail = " -> ".join("x".join(map(str, s)) for s in distinct)
    assert record(criterion, "layer table shape chain", distinct == V3_CHAIN, detail, time.perf_counter() - t, 1.0)


def test_03_global_budget(criterion):
    t = time.perf_counter()
    rep = analysis.count_cost(banks.inception_v3())
    p, m = rep.total_params, rep.total_mult_adds
    ok = 20e6 <= p <= 25e6 and 3.8e9 <= m <= 5.8e9
    assert record(criterion, "parameter and mult-add budget", ok, f"params {p:,}, mult-adds {m:,}",
                  time.perf_counter() - t, 5.0)


def test_04_gradients(criterion):
    t = time.perf_counter()
    worst = {kind: max(verify.gradient_errors(kind, instances=20)) for kind in verify.GRAD_KINDS}
    ok = max(worst.values()) < 1e-4
    detail = f"{len(worst)} op kinds x 20 instances, max rel err {max(worst.values()):.1e}"
    assert record(criterion, "finite-difference gradients", ok, detail, time.perf_counter() - t, 120.0)


def test_05_linear_equivalence(criterion):
    t = time.perf_counter()
    prng = Prng(2024)
    worst = 0.0
    for shape1, shape2 in (((3, 3), (3, 3)), ((3, 1), (1, 3))):
        for _ in range(50):
            k1 = prng.normal(shape1 + (3, 4))
            k2 = prng.normal(shape2 + (4, 2))
            x = prng.normal((2, 9, 9, 3))
            composed = nnops.conv2d_naive(x, rewrite.compose_kernels(k1, k2), None, 1, "valid")
            staged = nnops.conv2d_naive(nnops.conv2d_naive(x, k1, None, 1, "valid"), k2, None, 1, "valid")
            worst = max(worst, float(np.abs(composed - staged).max()))
    assert record(criterion, "composed kernel equivalence", worst <= 1e-10,
                  f"3x3o3x3 and 3x1o1x3, 50 trials each, max abs diff {worst:.1e}", time.perf_counter() - t, 30.0)


def test_06_label_smoothing(criterion):
    t = time.perf_counter()
    prng = Prng(6)
    cfg = train.SmoothingConfig(0.1, 10)
    ident = 0.0
    for _ in range(50):
        z = prng.normal((8, 10)) * 4
        y = prng.integers(0, 10, (8,))
        logp = nnops.log_softmax(z)
        split = 0.9 * -logp[np.arange(8), y] - 0.1 * logp.mean(axis=1)
        ident = max(ident, abs(train.lsr_loss(z, y, cfg).loss - float(split.mean())))
    bound = 0.0
    for _ in range(1000):
        k = int(prng.integers(2, 20, (1,))[0])
        eps = float(prng.uniform((1,), 0.0, 0.999)[0])
        r = train.lsr_loss(prng.normal((1, k)) * 30, prng.integers(0, k, (1,)), train.SmoothingConfig(eps, k))
        bound = max(bound, float(np.abs(r.grad).max()))
    hand = -(0.91 * math.log(0.91) + 9 * 0.01 * math.log(0.01))
    floor = train.lsr_floor(cfg)
    z = prng.normal((8, 10))
    y = np.arange(8)
    plain = -float(nnops.log_softmax(z)[np.arange(8), y].mean())
    degenerate = abs(train.lsr_loss(z, y, train.SmoothingConfig(0.0, 10)).loss - plain)
    ok = ident <= 1e-12 and bound <= 1.0 and abs(floor - 0.50029) < 1e-4 and abs(floor - hand) < 1e-12 \
        and degenerate <= 1e-15
    detail = (f"identity err {ident:.1e}, max |grad| {bound:.6f}, floor {floor:.6f} (closed form {hand:.6f}), "
              f"eps=0 err {degenerate:.1e}")
    assert record(criterion, "label smoothing", ok, detail, time.perf_counter() - t, 10.0)


def test_07_training_recipe(criterion):
    t = time.perf_counter()
    s = train.ScheduleConfig()
    lrs = [train.lr_at(s, e) for e in (0, 2, 4)]
    sched_ok = lrs == [0.045, 0.045 * 0.94, 0.045 * 0.94 ** 2]
    clip_err = 0.0
    prng = Prng(7)
    for _ in range(200):
        g = {"a": prng.normal((5,)) * float(prng.uniform((1,), 0.01, 3)[0]), "b": prng.normal((2, 3))}
        n = train.global_norm(g)
        clip_err = max(clip_err, abs(train.global_norm(train.clip_gradients(g, train.ClipConfig(2.0))) - min(n, 2.0)))
    params, state = {"x": np.array([5.0])}, {}
    for _ in range(500):
        train.optimizer_step(params, {"x": 2 * params["x"]}, state, train.OptimizerConfig("rmsprop"), 0.1)
    x = float(params["x"][0])
    ok = sched_ok and clip_err <= 1e-12 and abs(x) < 0.1
    detail = f"lr {lrs}, clip err {clip_err:.1e}, rmsprop x after 500 steps {x:.2e}"
    assert record(criterion, "training recipe units", ok, detail, time.perf_counter() - t, 5.0)


@pytest.mark.slow
def test_08_desk_scale_learning(criterion):
    ds = data.Dataset.from_uint8(*data.synthetic_shapes(256, seed=0))
    arch = banks.tiny()
    variants = {m.variant for m in arch.modules()}
    t = time.perf_counter()
    result = train.train_loop(arch, ds, train.TrainConfig(epochs=60, smoothing=0.0))
    fit_time = time.perf_counter() - t
    acc = result.history.final_train_acc

    smooth = train.train_loop(arch, ds, train.TrainConfig(epochs=12, smoothing=0.1))
    floor = train.lsr_floor(train.SmoothingConfig(0.1, arch.classes))
    final_loss = smooth.history.losses[-1]
    lowest = min(smooth.history.losses)

    cfg = train.TrainConfig(epochs=2, seed=3)
    a = train.train_loop(arch, ds, cfg).history.to_csv()
    b = train.train_loop(arch, ds, cfg).history.to_csv()

    ok = (acc >= 0.99 and fit_time < 600 and final_loss >= floor - 1e-2 and lowest >= floor - 1e-2 and a == b
          and variants >= {"original", "factorized_5x5", "asymmetric_nxn", "expanded_8x8", "reduction"}
          and arch.aux is not None)
    detail = (f"train acc {acc:.4f} after 60 epochs in {fit_time:.0f}s; eps=0.1 final loss {final_loss:.4f} "
              f"(floor {floor:.5f}); identical histories {a == b}")
    assert record(criterion, "desk-scale learning", ok, detail, fit_time, 600.0)


def test_09_stem_parity(criterion):
    t = time.perf_counter()
    costs = verify.stem_costs()
    totals = {v: costs[v].total_mult_adds for v in STEM_VARIANTS}
    dev = max(totals.values()) / min(totals.values()) - 1
    full = verify.stem_costs(mode="full")
    share = max(verify.pooling_share(r) for r in full.values())
    ok = dev <= 0.05 and share < 0.01
    detail = f"max pairwise deviation {dev:.4f} (limit 0.05), pooling share {share:.3%}; " + ", ".join(
        f"{v} {n:,}" for v, n in totals.items())
    assert record(criterion, "low-resolution stem parity", ok, detail, time.perf_counter() - t, 5.0)


def test_10_rewrite_safety(criterion):
    t = time.perf_counter()
    archs = verify.bundled_archs()
    problems, sites = [], 0
    for name, arch in archs.items():
        for rule in verify.rewrite_rules():
            new, rep = rewrite.apply_rule(arch, rule)
            sites += len(rep.sites)
            if rep.chain_after[-1] != rep.chain_before[-1]:
                problems.append(f"{name}/{rule.name}: output shape")
            if any(rep.chain_before[o] != rep.chain_after[n] for o, n in rep.index_map.items()):
                problems.append(f"{name}/{rule.name}: shape chain")
            if not all(s.rf_ok and s.shape_ok for s in rep.sites):
                problems.append(f"{name}/{rule.name}: receptive field")
        once, _ = rewrite.apply_rule(arch, rewrite.RewriteRule("factorize_5x5_to_two_3x3"))
        if verify.count_kernels(once, 5, 5):
            problems.append(f"{name}: 5x5 kernels remain")
    detail = f"{len(archs)} archs x {len(verify.rewrite_rules())} rules, {sites} sites; " + (
        "; ".join(problems) or "no violations")
    assert record(criterion, "rewrite safety", not problems, detail, time.perf_counter() - t, 5.0)
