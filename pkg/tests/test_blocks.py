import numpy as np
import pytest

from inceptkit import analysis, banks
from inceptkit.blocks import (STEM_VARIANTS, ArchSpec, AuxHeadSpec, InceptionModuleSpec, build_module, build_network,
                              build_reduction, build_stem, build_tiny, shape_chain, with_stem)
from inceptkit.graph import Graph, ShapeError
from inceptkit.train import TrainConfig, build_training_graph
from inceptkit.verify import V3_SHAPE_CHAIN, collapse


def module_out(spec, shape):
    g = Graph()
    x = g.input((1,) + shape)
    y = build_reduction(spec, g, x) if spec.variant == "reduction" else build_module(spec, g, x)
    return g.shape(y)[1:]


def test_factorized_module_keeps_35_grid():
    assert module_out(banks.factorized_5x5_module("m", grid=35), (35, 35, 288)) == (35, 35, 288)


def test_asymmetric_module_keeps_17_grid():
    spec = banks.asymmetric_module("m", 128, grid=17)
    assert spec.n == 7
    assert module_out(spec, (17, 17, 768)) == (17, 17, 768)


def test_expanded_module_reaches_2048():
    spec = banks.expanded_module("m", grid=8)
    assert sum(spec.filter_banks(1280)) == 2048
    assert module_out(spec, (8, 8, 1280)) == (8, 8, 2048)


def test_reductions():
    v3 = {m.name: m for m in banks.inception_v3().modules()}
    assert module_out(v3["mixed_6a"], (35, 35, 288)) == (17, 17, 768)
    assert module_out(v3["mixed_7a"], (17, 17, 768)) == (8, 8, 1280)
    pool_only = banks.reduction_module("p", [])
    assert module_out(pool_only, (9, 9, 5)) == (4, 4, 5)


def test_reduction_branch_must_end_with_stride_two():
    with pytest.raises(ValueError):
        banks.reduction_module("r", [banks.branch(banks.conv(3, 8, 1))])


def test_module_grid_is_checked():
    with pytest.raises(ShapeError):
        module_out(banks.factorized_5x5_module("m", grid=35), (17, 17, 288))


def test_unknown_variant():
    with pytest.raises(ValueError):
        InceptionModuleSpec("m", "wide", ())


def test_v3_chain_and_budget():
    arch = banks.inception_v3()
    assert collapse([tuple(s) for s in shape_chain(arch)]) == V3_SHAPE_CHAIN
    assert analysis.count_params(arch) < 25_000_000
    g, out = build_network(arch, batch=2)
    assert g.shape(out["logits"]) == (2, 1000)
    assert g.shape(out["aux_logits"]) == (2, 1000)


def test_every_library_module_preserves_or_halves_grid():
    for arch in (banks.inception_v3(), banks.tiny(), banks.tiny(input_size=64), banks.v1_stem()):
        chain = shape_chain(arch)
        for k, item in enumerate(arch.layers):
            if isinstance(item, InceptionModuleSpec):
                before, after = chain[k], chain[k + 1]
                if item.variant == "reduction":
                    assert after[0] == (before[0] - 3) // 2 + 1
                else:
                    assert after[:2] == before[:2]


def test_expanded_stage_is_wider_than_17_stage():
    chain = collapse([tuple(s) for s in shape_chain(banks.inception_v3())])
    assert dict((s[0], s[-1]) for s in chain if len(s) == 3)[8] > 768


@pytest.mark.parametrize("variant", STEM_VARIANTS)
def test_stems_reach_35(variant):
    g = Graph()
    assert g.shape(build_stem(variant, g))[1:] == (35, 35, 288)
    arch = with_stem(banks.inception_v3(), variant)
    assert shape_chain(arch)[-1] == (1000,)


def test_low_res_stem_details():
    assert banks.stem_layers("r151_s1_pool")[0].stride == 1
    assert not any(hasattr(x, "kind") for x in banks.stem_layers("r79_s1_nopool"))


def test_aux_head_batchnorm_toggle():
    def head_nodes(bn):
        arch = banks.inception_v3()
        arch = ArchSpec(arch.name, arch.input_shape, arch.classes, arch.layers, AuxHeadSpec("mixed_6f", batchnorm=bn))
        g, _ = build_network(arch)
        return [n for n in g.nodes if n.group == "aux"]

    with_bn, without = head_nodes(True), head_nodes(False)
    assert sum(n.kind == "batchnorm" for n in with_bn) == 2
    assert sum(n.kind == "batchnorm" for n in without) == 0
    assert len(with_bn) - len(without) == 2 * 2  # per conv: bn node, gamma, beta, minus a bias


def test_aux_loss_alone_reaches_the_stem():
    arch = banks.tiny()
    cfg = TrainConfig(main_weight=0.0, aux_weight=1.0, precision="f64")
    g, _, loss = build_training_graph(arch, cfg, batch=4)
    rng = np.random.default_rng(0)
    feeds = {"input": rng.normal(size=(4, 32, 32, 3)), "targets": np.eye(10)[[0, 1, 2, 3]]}
    _, tape = g.forward(feeds, [loss], training=True)
    grads = g.backward(tape, loss)
    stem_w = g.names["stem/0/weights"]
    assert np.abs(grads[stem_w]).sum() > 0
    assert not grads[g.names["head/logits/weights"]].any()


def test_tiny_network():
    arch = build_tiny()
    g, out = build_network(arch, batch=3)
    assert g.shape(out["logits"]) == (3, 10)
    assert analysis.count_params(arch, include_aux=True) < 500_000
    variants = {m.variant for m in arch.modules()}
    assert variants == {"original", "factorized_5x5", "asymmetric_nxn", "expanded_8x8", "reduction"}
    spatial = [s[0] for s in collapse([tuple(s) for s in shape_chain(arch)]) if len(s) == 3]
    assert spatial == sorted(spatial, reverse=True)
