"""
Two 3x3 convolutions versus one 5x5
===================================

Without a nonlinearity in between, a stack of two convolutions is a single
convolution whose kernel is the full correlation of the two. With a ReLU in
between the stack computes something the 5x5 cannot, which is the point of
factorising.
"""

import numpy as np

from inceptkit import nnops, rewrite
from inceptkit.blocks import ConvLayer
from inceptkit.tensor import Prng

prng = Prng(0)
k1 = prng.normal((3, 3, 3, 8))
k2 = prng.normal((3, 3, 8, 4))
composed = rewrite.compose_kernels(k1, k2)
print("composed kernel shape:", composed.shape)

x = prng.normal((1, 11, 11, 3))
staged = nnops.conv2d_naive(nnops.conv2d_naive(x, k1, None, 1, "valid"), k2, None, 1, "valid")
direct = nnops.conv2d_naive(x, composed, None, 1, "valid")
print(f"linear stack vs composed 5x5: max diff {np.abs(staged - direct).max():.1e}")

# the same comparison through the rewrite checker, linear and with ReLU
five = ConvLayer(5, 5, 4)
pair = [ConvLayer(3, 3, 8), ConvLayer(3, 3, 4)]
for act in ("linear", "relu"):
    rep = rewrite.check_equivalence(five, pair, act, trials=20, in_channels=3)
    print(f"{act:>6}: max diff {rep.max_abs_diff:.2e} over {rep.trials} trials, passed={rep.passed}")

# asymmetric factors compose to a rank-one spatial kernel
col = prng.normal((3, 1, 1, 1))
row = prng.normal((1, 3, 1, 1))
k = rewrite.compose_kernels(col, row)[:, :, 0, 0]
print("3x1 then 1x3 gives a rank", np.linalg.matrix_rank(k), "3x3 kernel")
