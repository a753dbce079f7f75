"""Filter-bank constants for the bundled architectures.

The per-branch widths of the full network are a reconstruction: only the
stage checkpoints (35x35x288, 17x17x768, 8x8x1280, 8x8x2048) are fixed.
Bump BANKS_VERSION whenever any number below changes.
"""

from __future__ import annotations

from .blocks import ArchSpec, AuxHeadSpec, BranchSpec, ConvLayer, InceptionModuleSpec, PoolLayer

BANKS_VERSION = 1


def conv(k, filters, stride=1, padding="same", **kw) -> ConvLayer:
    kh, kw_ = (k, k) if isinstance(k, int) else k
    return ConvLayer(kh, kw_, filters, stride, padding, **kw)


def pool(kind, k, stride, padding="valid") -> PoolLayer:
    return PoolLayer(kind, k, k, stride, padding)


def branch(*layers, split=()) -> BranchSpec:
    return BranchSpec(tuple(layers), tuple(tuple(t) for t in split))


# -- module factories ---------------------------------------------------------

def original_module(name, b1, b3r, b3, b5r, b5, pool_proj, grid=None):
    return InceptionModuleSpec(name, "original", (
        branch(conv(1, b1)),
        branch(conv(1, b3r), conv(3, b3)),
        branch(conv(1, b5r), conv(5, b5)),
        branch(pool("max", 3, 1, "same"), conv(1, pool_proj)),
    ), grid)


def factorized_5x5_module(name, b1=64, b3r=48, b3=64, d3r=64, d3=96, pool_proj=64, grid=None):
    return InceptionModuleSpec(name, "factorized_5x5", (
        branch(conv(1, b1)),
        branch(conv(1, b3r), conv(3, b3)),
        branch(conv(1, d3r), conv(3, d3), conv(3, d3)),
        branch(pool("avg", 3, 1, "same"), conv(1, pool_proj)),
    ), grid)


def asymmetric_module(name, c7, out=192, n=7, grid=None):
    return InceptionModuleSpec(name, "asymmetric_nxn", (
        branch(conv(1, out)),
        branch(conv(1, c7), conv((1, n), c7), conv((n, 1), out)),
        branch(conv(1, c7), conv((n, 1), c7), conv((1, n), c7), conv((n, 1), c7), conv((1, n), out)),
        branch(pool("avg", 3, 1, "same"), conv(1, out)),
    ), grid, n)


def expanded_module(name, b1=320, b3=384, d3r=448, d3=384, pool_proj=192, grid=None):
    return InceptionModuleSpec(name, "expanded_8x8", (
        branch(conv(1, b1)),
        branch(conv(1, b3), split=[[conv((1, 3), b3)], [conv((3, 1), b3)]]),
        branch(conv(1, d3r), conv(3, d3), split=[[conv((1, 3), d3)], [conv((3, 1), d3)]]),
        branch(pool("avg", 3, 1, "same"), conv(1, pool_proj)),
    ), grid)


def reduction_module(name, conv_branches, grid=None):
    """Stride-2 max pool (channels preserved) next to stride-2 conv branches."""
    return InceptionModuleSpec(name, "reduction", tuple(conv_branches) + (branch(pool("max", 3, 2)),), grid)


# -- stems ----------------------------------------------------------------------

STEM_INPUT = {"r299_s2_pool": 299, "r151_s1_pool": 151, "r79_s1_nopool": 79}


def stem_layers(variant: str) -> list:
    """Stem rows ending at the 35x35x288 stage.

    r299 is the standard v3 stem. r151 drops the first stride to 1. r79 keeps the
    stride-1 first conv and removes the pool; its third conv loses its
    padding so that the grid still lands on 35x35.
    """
    first_stride = 2 if variant == "r299_s2_pool" else 1
    if variant not in STEM_INPUT:
        raise ValueError(f"unknown stem variant {variant!r}")
    rows = [conv(3, 32, first_stride, "valid"), conv(3, 32, 1, "valid")]
    if variant == "r79_s1_nopool":
        rows.append(conv(3, 64, 1, "valid"))
    else:
        rows += [conv(3, 64, 1, "same"), pool("max", 3, 2)]
    rows += [conv(3, 80, 1, "valid"), conv(3, 192, 2, "valid"), conv(3, 288, 1, "same")]
    return rows


# -- networks ---------------------------------------------------------------------

V3_ASYMMETRIC_WIDTHS = (96, 96, 96, 96, 96)


def inception_v3(classes: int = 1000, aux: bool = True) -> ArchSpec:
    layers = stem_layers("r299_s2_pool")
    layers += [factorized_5x5_module(f"mixed_5{c}", pool_proj=64, grid=35) for c in "bcd"]
    layers.append(reduction_module("mixed_6a", [
        branch(conv(3, 384, 2, "valid")),
        branch(conv(1, 64), conv(3, 96), conv(3, 96, 2, "valid")),
    ], grid=35))
    layers += [asymmetric_module(f"mixed_6{c}", c7, grid=17) for c, c7 in zip("bcdef", V3_ASYMMETRIC_WIDTHS)]
    layers.append(reduction_module("mixed_7a", [
        branch(conv(1, 192), conv(3, 320, 2, "valid")),
        branch(conv(1, 192), conv((1, 7), 192), conv((7, 1), 192), conv(3, 192, 2, "valid")),
    ], grid=17))
    layers += [expanded_module(f"mixed_7{c}", grid=8) for c in "bc"]
    head = AuxHeadSpec("mixed_6f") if aux else None
    return ArchSpec("inception_v3", (299, 299, 3), classes, tuple(layers), head)


def v1_stem(classes: int = 1000) -> ArchSpec:
    """GoogLeNet-style stem (7x7/2 conv) with two original modules, for rewrite demos."""
    layers = [
        conv(7, 64, 2, "same"), pool("max", 3, 2, "same"),
        conv(1, 64), conv(3, 192), pool("max", 3, 2, "same"),
        original_module("inception_3a", 64, 96, 128, 32, 32, 32, grid=28),
        original_module("inception_3b", 128, 128, 192, 32, 96, 64, grid=28),
    ]
    return ArchSpec("v1_stem", (224, 224, 3), classes, tuple(layers))


def tiny(classes: int = 10, input_size: int = 32) -> ArchSpec:
    """Desk-scale network: one module of every variant plus one reduction and an aux head."""
    if input_size not in (32, 64):
        raise ValueError("tiny network supports input sizes 32 and 64 only")
    layers = [conv(3, 16, 2, "valid"), conv(3, 32)]
    if input_size == 64:
        layers.append(pool("max", 3, 2))
    layers += [
        original_module("block_original", 16, 16, 24, 16, 16, 16, grid=15),
        factorized_5x5_module("block_factorized", 24, 16, 24, 16, 24, 24, grid=15),
        reduction_module("block_reduction", [
            branch(conv(3, 96, 2, "valid")),
            branch(conv(1, 32), conv(3, 48), conv(3, 48, 2, "valid")),
        ], grid=15),
        asymmetric_module("block_asymmetric", 32, out=60, n=3, grid=7),
        expanded_module("block_expanded", 64, 64, 64, 64, 32, grid=7),
    ]
    head = AuxHeadSpec("block_asymmetric", pool("avg", 3, 2), 32, 64, True, 0.3, grid=7)
    return ArchSpec(f"tiny{input_size}", (input_size, input_size, 3), classes, tuple(layers), head)
