"""
Where the multiply-adds go in Inception v3
==========================================

Builds the bundled v3 network without allocating weights, prints the
per-stage budget and then looks at why factorising large kernels pays off.
"""

from fractions import Fraction

from inceptkit import analysis, banks, rewrite
from inceptkit.blocks import ArchSpec, ConvLayer

# the full network, analysed symbolically
v3 = banks.inception_v3()
report = analysis.count_cost(v3)
print(f"v3: {report.total_params:,} params, {report.total_mult_adds:,} mult-adds")

# the stem and each module, in order
for group, c in report.by_group().items():
    print(f"  {group:<12} {c['mult_adds'] / report.total_mult_adds:6.1%} of compute, {c['params']:>11,} params")

# a 5x5 conv sees the same field as two stacked 3x3 convs
single = ArchSpec("one", (17, 17, 64), 10, (ConvLayer(5, 5, 64),))
for rule in ("factorize_5x5_to_two_3x3", "factorize_nxn_to_asymmetric"):
    _, rep = rewrite.apply_rule(single, rewrite.RewriteRule(rule, n=5))
    site = rep.sites[0]
    ratio = Fraction(site.mult_adds_after, site.mult_adds_before)
    print(f"{rule}: {site.before} -> {site.after}, cost x{ratio} (rf {site.rf_before} kept)")

# reducing the grid: pooling first is cheap but squeezes the representation
v = rewrite.pool_order_variants(d=34, k=320)
print(f"conv then pool {v.conv_then_pool_cost:,}, pool then conv {v.pool_then_conv_cost:,}, "
      f"parallel {v.parallel_cost:,}")
print("bottleneck warnings:", [name for name, flagged in v.bottleneck_flags.items() if flagged])
