"""Randomised properties checked with hypothesis."""

import numpy as np
from hypothesis import assume, given, settings, strategies as st

from inceptkit import analysis, archfile, nnops, rewrite
from inceptkit.blocks import ArchSpec, BranchSpec, ConvLayer, InceptionModuleSpec, PoolLayer, build_network
from inceptkit.graph import Graph, ShapeError
from inceptkit.nnops import ConvAttrs, PoolAttrs

SETTINGS = settings(max_examples=40, deadline=None)

kernels = st.integers(1, 5)
paddings = st.sampled_from(["same", "valid"])


@SETTINGS
@given(kh=kernels, kw=kernels, s=st.integers(1, 3), pad=paddings, h=st.integers(5, 11), cin=st.integers(1, 3),
       cout=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_im2col_matches_naive(kh, kw, s, pad, h, cin, cout, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, h, h + 1, cin))
    w = rng.normal(size=(kh, kw, cin, cout))
    b = rng.normal(size=cout)
    y, _ = nnops.conv2d_forward(x, w, b, ConvAttrs(kh, kw, s, pad, cout, True))
    np.testing.assert_allclose(y, nnops.conv2d_naive(x, w, b, s, pad), rtol=1e-12, atol=1e-12)


@SETTINGS
@given(n=st.integers(1, 300), k=st.integers(1, 9), s=st.integers(1, 4))
def test_same_padding_output_size(n, k, s):
    assert nnops.out_size(n, k, s, "same") == -(-n // s)
    lo, hi = nnops.pad_amounts(n, k, s, "same")
    assert 0 <= hi - lo <= 1
    if n >= k:
        assert nnops.out_size(n, k, s, "valid") == (n - k) // s + 1


layer_st = st.one_of(
    st.tuples(st.just("conv"), kernels, kernels, st.integers(1, 2)),
    st.tuples(st.just("pool"), st.integers(2, 3), st.integers(2, 3), st.integers(1, 2)),
)


@SETTINGS
@given(layers=st.lists(layer_st, min_size=1, max_size=4))
def test_receptive_field_matches_gradient_support(layers):
    """The analytic field equals the input region that influences one output."""
    g = Graph("f64")
    x = g.input((1, 40, 40, 1))
    y = x
    for i, (kind, kh, kw, s) in enumerate(layers):
        if kind == "conv":
            y = g.conv2d(y, ConvAttrs(kh, kw, s, "valid", 1), f"c{i}")
        else:
            y = g.pool2d(y, PoolAttrs(kh, kw, s, "avg"), f"p{i}")
    oh, ow = g.shape(y)[1:3]
    assume(oh >= 1 and ow >= 1)
    for nid in g.parameters():
        g.set_value(nid, np.ones(g.shape(nid)))
    _, tape = g.forward({"input": np.ones((1, 40, 40, 1))}, [y])
    cot = np.zeros((1, oh, ow, 1))
    cot[0, oh // 2, ow // 2, 0] = 1.0
    grad = g.vjp(tape, y, cot, wrt=[x])[x][0, :, :, 0]
    rows, cols = np.nonzero(grad)
    rf = analysis.receptive_field(g, y)
    assert (np.ptp(rows) + 1, np.ptp(cols) + 1) == (rf.rf_h, rf.rf_w)


def module_st():
    conv = st.builds(ConvLayer, st.sampled_from([1, 3, 5]), st.sampled_from([1, 3, 5]), st.integers(1, 8))
    branch = st.builds(lambda ls: BranchSpec(tuple(ls)), st.lists(conv, min_size=1, max_size=3))
    return st.builds(lambda i, bs: InceptionModuleSpec(f"m{i}", "original", tuple(bs)),
                     st.integers(0, 9), st.lists(branch, min_size=1, max_size=3))


@st.composite
def archs(draw):
    stem = draw(st.lists(st.builds(ConvLayer, st.sampled_from([1, 3, 5, 7]), st.sampled_from([1, 3, 5, 7]),
                                   st.integers(1, 8), st.integers(1, 2), paddings,
                                   st.sampled_from(["relu", "linear"]), st.booleans()), min_size=1, max_size=3))
    if draw(st.booleans()):
        stem.append(PoolLayer(draw(st.sampled_from(["max", "avg"])), 3, 3, 2, "valid"))
    mods = draw(st.lists(module_st(), max_size=2, unique_by=lambda m: m.name))
    arch = ArchSpec("rand", (draw(st.integers(20, 32)),) * 2 + (3,), draw(st.integers(2, 12)), tuple(stem + mods))
    try:
        build_network(arch)
    except ShapeError:
        assume(False)
    return arch


@SETTINGS
@given(arch=archs())
def test_archfile_round_trip(arch):
    assert archfile.loads(archfile.dumps(arch)) == arch


@SETTINGS
@given(arch=archs(), rule=st.sampled_from(rewrite.RULE_NAMES))
def test_rewrites_keep_shapes_and_fields(arch, rule):
    new, rep = rewrite.apply_rule(arch, rewrite.RewriteRule(rule, n=5, force=True))
    assert rep.chain_before[-1] == rep.chain_after[-1]
    assert all(site.shape_ok and site.rf_ok for site in rep.sites)
    assert rep.mult_adds_after == analysis.count_cost(new).total_mult_adds


@SETTINGS
@given(arch=archs())
def test_cost_is_linear_in_batch(arch):
    graph, _ = build_network(arch)
    one = analysis.count_cost(graph).total_mult_adds
    assert analysis.count_cost(graph, batch=3).total_mult_adds == 3 * one
