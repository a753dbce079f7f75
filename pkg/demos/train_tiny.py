"""
Training the tiny Inception on synthetic shapes
===============================================

Usage: python3 train_tiny.py [epochs]

Trains the bundled tiny network (every block variant, a reduction block
and an auxiliary head) on 256 generated 32x32 images, once with plain
targets and once with smoothed targets. A third pair of runs replaces the
remaining 5x5 conv with two 3x3 convs, with and without a ReLU between
them. Nothing is asserted; the numbers are only logged.
"""

import sys

from inceptkit import banks, data, rewrite, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 8
pixels, labels = data.synthetic_shapes(256, seed=0)
ds = data.Dataset.from_uint8(pixels, labels)
val = data.Dataset.from_uint8(*data.synthetic_shapes(128, seed=1))
print(f"{len(ds)} training images, classes {data.SHAPE_CLASSES}")


def report(label, result, eps=0.0):
    h = result.history
    line = (f"{label:<22} train acc {h.final_train_acc:.3f}  val acc {h.epoch_rows[-1]['val_acc']:.3f}  "
            f"last loss {h.losses[-1]:.4f}")
    if eps:
        line += f" (floor {train.lsr_floor(train.SmoothingConfig(eps, 10)):.4f})"
    print(line + f"  {h.wall_time:.0f}s")


arch = banks.tiny()
for eps in (0.0, 0.1):
    result = train.train_loop(arch, ds, train.TrainConfig(epochs=epochs, smoothing=eps), val=val)
    report(f"smoothing {eps}", result, eps)

# factorised 5x5 with a linear or a rectified first factor
for first in ("linear", "relu"):
    variant, _ = rewrite.apply_rule(arch, rewrite.RewriteRule("factorize_5x5_to_two_3x3", first_activation=first))
    report(f"two 3x3, {first} first", train.train_loop(variant, ds, train.TrainConfig(epochs=epochs), val=val))
