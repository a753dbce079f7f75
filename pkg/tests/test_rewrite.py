from fractions import Fraction

import numpy as np
import pytest

from inceptkit import analysis, banks, nnops, rewrite
from inceptkit.blocks import ArchSpec, ConvLayer, PoolLayer
from inceptkit.rewrite import RewriteRule, apply_rule, check_equivalence, compose_kernels, pool_order_variants
from inceptkit.tensor import Prng
from inceptkit.verify import count_kernels


def single(kh, kw, c=16, grid=17, stride=1, padding="same"):
    return ArchSpec("s", (grid, grid, c), 3, (ConvLayer(kh, kw, c, stride, padding),))


def site_ratio(rule, arch):
    _, rep = apply_rule(arch, rule)
    (site,) = rep.sites
    return Fraction(site.mult_adds_after, site.mult_adds_before), site


def test_canonical_ratios():
    r, site = site_ratio(RewriteRule("factorize_5x5_to_two_3x3"), single(5, 5))
    assert r == Fraction(18, 25) and site.rf_after == (5, 5)
    r, site = site_ratio(RewriteRule("factorize_nxn_to_asymmetric", n=3), single(3, 3))
    assert r == Fraction(6, 9) and site.rf_after == (3, 3)
    r, _ = site_ratio(RewriteRule("factorize_3x3_to_two_2x2"), single(3, 3))
    assert r == Fraction(8, 9)
    r, site = site_ratio(RewriteRule("factorize_7x7_to_three_3x3"), single(7, 7))
    assert r == Fraction(27, 49) and site.rf_after == (7, 7)


def test_asymmetric_rule_respects_grid_band():
    _, rep = apply_rule(single(7, 7, grid=35), RewriteRule("factorize_nxn_to_asymmetric"))
    assert rep.sites == []
    _, rep = apply_rule(single(7, 7, grid=35), RewriteRule("factorize_nxn_to_asymmetric", force=True))
    assert len(rep.sites) == 1
    new, _ = apply_rule(single(7, 7, grid=17), RewriteRule("factorize_nxn_to_asymmetric"))
    assert [(lyr.kh, lyr.kw) for lyr in new.layers] == [(1, 7), (7, 1)]


def test_stride_and_padding_move_to_last_factor():
    new, rep = apply_rule(single(5, 5, grid=20, stride=2, padding="valid"), RewriteRule("factorize_5x5_to_two_3x3"))
    a, b = new.layers
    assert (a.stride, b.stride) == (1, 2)
    assert rep.sites[0].shape_ok and rep.sites[0].rf_ok


def test_alpha_and_first_activation():
    arch = ArchSpec("s", (9, 9, 16), 3, (ConvLayer(5, 5, 64),))
    new, _ = apply_rule(arch, RewriteRule("factorize_5x5_to_two_3x3", alpha="sqrt_split"))
    assert new.layers[0].filters == 32  # sqrt(64/16) * 16
    new, _ = apply_rule(arch, RewriteRule("factorize_5x5_to_two_3x3"))
    assert new.layers[0].filters == 16
    new, _ = apply_rule(arch, RewriteRule("factorize_5x5_to_two_3x3", first_activation="linear"))
    assert new.layers[0].activation == "linear" and new.layers[1].activation == "relu"


def test_v1_stem_rewrites():
    new, rep = apply_rule(banks.v1_stem(), RewriteRule("factorize_7x7_to_three_3x3"))
    assert [(lyr.kh, lyr.kw) for lyr in new.layers[:3]] == [(3, 3)] * 3
    assert rep.chain_before[-1] == rep.chain_after[-1]
    _, rep = apply_rule(banks.v1_stem(), RewriteRule("factorize_5x5_to_two_3x3"))
    equal_channel = [s for s in rep.sites if s.before == "conv5x5/1:32"]
    assert equal_channel and abs(equal_channel[0].saving - 0.28) < 0.005


def test_zero_sites_is_a_no_op():
    arch = banks.inception_v3()
    new, rep = apply_rule(arch, RewriteRule("factorize_7x7_to_three_3x3"))
    assert new == arch and rep.sites == [] and rep.saving == 0.0
    assert "0 sites" in rep.to_table()


def test_idempotent_5x5():
    once, _ = apply_rule(banks.tiny(), RewriteRule("factorize_5x5_to_two_3x3"))
    assert count_kernels(once, 5, 5) == 0
    twice, rep = apply_rule(once, RewriteRule("factorize_5x5_to_two_3x3"))
    assert twice == once and not rep.sites


def test_pool_order_swap_keeps_receptive_field_and_is_linted():
    arch = ArchSpec("s", (20, 20, 8), 3, (ConvLayer(3, 3, 16), PoolLayer("max", 3, 3, 2)))
    new, rep = apply_rule(arch, RewriteRule("pool_order_swap"))
    assert isinstance(new.layers[0], PoolLayer) and (new.layers[1].kh, new.layers[1].kw) == (2, 2)
    assert rep.sites[0].rf_ok
    assert rep.saving > 0


def test_report_formats():
    _, rep = apply_rule(banks.v1_stem(), RewriteRule("factorize_5x5_to_two_3x3"))
    assert rep.to_csv().startswith("site,before,after")
    assert '"rule": "factorize_5x5_to_two_3x3"' in rep.to_json()


def test_unknown_rule():
    with pytest.raises(ValueError):
        RewriteRule("factorize_9x9")


def test_compose_identity_and_separable():
    p = Prng(0)
    k2 = p.normal((3, 3, 2, 2))
    delta = np.zeros((3, 3, 2, 2))
    delta[1, 1] = np.eye(2)
    c = compose_kernels(delta, k2)
    assert c.shape == (5, 5, 2, 2)
    np.testing.assert_array_equal(c[1:4, 1:4], k2)
    assert not c[0].any() and not c[:, 4].any()
    a = p.normal((3, 1, 1, 1))
    b = p.normal((1, 3, 1, 1))
    np.testing.assert_allclose(compose_kernels(a, b)[:, :, 0, 0], np.outer(a[:, 0, 0, 0], b[0, :, 0, 0]), atol=1e-15)
    with pytest.raises(ValueError):
        compose_kernels(p.normal((3, 3, 2, 3)), p.normal((3, 3, 2, 2)))


def test_composed_kernel_matches_two_stage_loop():
    p = Prng(1)
    k1 = p.normal((3, 3, 2, 3))
    k2 = p.normal((3, 3, 3, 2))
    c = compose_kernels(k1, k2)
    for _ in range(20):
        x = p.normal((1, 9, 9, 2))
        two = nnops.conv2d_naive(nnops.conv2d_naive(x, k1, None, 1, "valid"), k2, None, 1, "valid")
        one = nnops.conv2d_naive(x, c, None, 1, "valid")
        assert np.abs(one - two).max() <= 1e-10


def test_compose_is_associative():
    p = Prng(2)
    k1, k2, k3 = p.normal((3, 1, 2, 3)), p.normal((1, 3, 3, 2)), p.normal((2, 2, 2, 2))
    a = compose_kernels(compose_kernels(k1, k2), k3)
    b = compose_kernels(k1, compose_kernels(k2, k3))
    assert np.abs(a - b).max() <= 1e-10


def test_equivalence_modes():
    orig = ConvLayer(5, 5, 4)
    pair = [ConvLayer(3, 3, 4), ConvLayer(3, 3, 4)]
    lin = check_equivalence(orig, pair, "linear", trials=50, tol=1e-10)
    assert lin.passed and lin.max_abs_diff <= 1e-10
    relu = check_equivalence(orig, pair, "relu", trials=5)
    assert relu.passed is None and relu.max_abs_diff > 1e-3
    same = check_equivalence(orig, [orig], "relu", trials=3)
    assert same.max_abs_diff == 0.0
    with pytest.raises(ValueError):
        check_equivalence(ConvLayer(3, 3, 4), pair)


def test_pool_order_variants():
    v = pool_order_variants(10, 8, 9)
    assert v.conv_then_pool_cost == 10**2 * (2 * 8) * 8 * 9 == 115_200
    assert Fraction(v.conv_then_pool_cost, v.pool_then_conv_cost) == 4
    assert v.parallel_cost < v.pool_then_conv_cost
    assert v.bottleneck_flags == {"conv_then_pool": False, "pool_then_conv": True, "parallel": False}
    with pytest.raises(ValueError):
        pool_order_variants(9, 8, 9)


def test_rewritten_cost_equals_report():
    for rule in (RewriteRule("factorize_3x3_to_two_2x2"), RewriteRule("pool_order_swap")):
        new, rep = apply_rule(banks.inception_v3(), rule)
        assert analysis.count_cost(new).total_mult_adds == rep.mult_adds_after
        assert rewrite.shape_chain_items(new) == rep.chain_after
