"""
Lower input resolution at (nearly) constant cost
================================================

Three stems feed the same trunk: the 299 pixel original, a 151 pixel stem
without the first stride, and a 79 pixel stem that also drops the first
pooling layer. The costs are compared with the analytic cost model.
"""

from inceptkit import verify
from inceptkit.blocks import STEM_VARIANTS

costs = verify.stem_costs()
full = verify.stem_costs(mode="full")
for v in STEM_VARIANTS:
    print(f"{v:<16} {costs[v].total_mult_adds:>16,} mult-adds, pooling {verify.pooling_share(full[v]):.2%}")

dev = verify.parity_deviation(costs)
print(f"largest pairwise deviation {dev:.2%}")

# the 79 pixel stem runs its two 3x3 convs on a 73 grid instead of 147,
# so with these filter banks it comes out cheaper than the other two
for v in ("r299_s2_pool", "r79_s1_nopool"):
    print(v)
    for n in costs[v].nodes:
        if n.group == "stem" and n.kind == "conv2d":
            print(f"  {n.name:<8} {'x'.join(map(str, n.out_shape)):>12} {n.mult_adds:>13,}")
