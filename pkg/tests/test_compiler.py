import numpy as np
import pytest

from mstar import autodiff as ad
from mstar.autodiff import Tensor
from mstar.compiler import (M_ALL_KERNELS, MOTIVATION_KINDS, CompileError,
                            Network, NetworkSpec, build_motivation_model,
                            compile_network, count_parameters)
from mstar.layers import Linear
from mstar.space import (OP_AVGPOOL, OP_CONV, OP_IDENTITY, OP_MAXPOOL,
                         CellMatrix, SpaceConfig, canonical_serialize, parse,
                         preprocess, random_cell)

CFG = SpaceConfig()


def cell_with(*edges):
    ops = np.zeros((4, 13, 13), dtype=np.int64)
    for c, i, j, v in edges:
        ops[c, i, j] = v
    return CellMatrix(ops)


def minimal_graph():
    return preprocess(cell_with((OP_CONV, 0, 12, 3)), CFG)


def test_minimal_cell_shape_contract():
    net = compile_network(minimal_graph(),
                          NetworkSpec(input_channels=12, head="none"), seed=0)
    out = net(np.random.default_rng(0).normal(size=(2, 12, 40)))
    assert out.shape == (2, 128, 40)


def test_minimal_cell_parameter_arithmetic():
    net = compile_network(minimal_graph(),
                          NetworkSpec(input_channels=12, head="none"), seed=0)
    params = net.parameters()
    conv_params = params["cell0/e0-12/conv/w"].data.size + params["cell0/e0-12/conv/b"].data.size
    assert conv_params == 12 * 128 * 3 + 128 == 4736
    assert count_parameters(net) == 4736 + 2 * 128  # plus batch-norm affine


def test_single_linear_head_count():
    rng = np.random.default_rng(0)
    assert count_parameters(Linear(10, 1, rng)) == 11


def test_zero_input_zero_head_gives_zero_logits():
    net = compile_network(minimal_graph(),
                          NetworkSpec(input_channels=3, output_width=4), seed=1)
    net.head.linear.w.data[:] = 0.0
    net.head.linear.b.data[:] = 0.0
    out = net(np.zeros((2, 3, 16)))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_compile_determinism():
    g = preprocess(random_cell(CFG, np.random.default_rng(5)), CFG)
    spec = NetworkSpec(input_channels=3, output_width=2)
    a = compile_network(g, spec, seed=9).state_arrays()
    b = compile_network(g, spec, seed=9).state_arrays()
    assert set(a) == set(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = compile_network(g, spec, seed=10).state_arrays()
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_count_invariant_under_serialization_roundtrip():
    m = random_cell(CFG, np.random.default_rng(6))
    spec = NetworkSpec(input_channels=3, output_width=2)
    n1 = count_parameters(compile_network(preprocess(m, CFG), spec, seed=0))
    m2 = parse(canonical_serialize(m))
    n2 = count_parameters(compile_network(preprocess(m2, CFG), spec, seed=3))
    assert n1 == n2


@pytest.mark.parametrize("L", [8, 33, 128, 512])
def test_forward_length_preserved_through_stacked_cells(L):
    cfg = CFG.scaled(16, 8)
    m = cell_with((OP_CONV, 0, 2, 3), (OP_MAXPOOL, 2, 9, 5),
                  (OP_CONV, 0, 9, 9), (OP_IDENTITY, 9, 12, 1),
                  (OP_AVGPOOL, 0, 7, 3))
    g = preprocess(m, cfg)
    net = compile_network(g, NetworkSpec(cells_stacked=2, input_channels=2,
                                         head="none"), seed=0)
    out = net(np.random.default_rng(1).normal(size=(1, 2, L)))
    assert out.data.shape[2] == L


def test_orphan_aggregation_projects_and_adds():
    cfg = CFG.scaled(8, 4)
    m = cell_with((OP_CONV, 0, 5, 3), (OP_CONV, 0, 12, 3))
    g = preprocess(m, cfg)
    net = compile_network(g, NetworkSpec(input_channels=2, head="none"), seed=0)
    assert "cell0/aggregate/w" in net.parameters()
    out = net(np.random.default_rng(2).normal(size=(2, 2, 12)))
    assert out.shape == (2, 8, 12)


def test_gradient_reaches_every_live_parameter():
    cfg = CFG.scaled(8, 4)
    m = cell_with((OP_CONV, 0, 2, 3), (OP_CONV, 2, 9, 5), (OP_CONV, 9, 12, 3),
                  (OP_MAXPOOL, 0, 7, 3), (OP_CONV, 0, 5, 9))  # 5, 7 are orphans
    g = preprocess(m, cfg)
    net = compile_network(g, NetworkSpec(input_channels=2, output_width=3), seed=4)
    x = np.random.default_rng(3).normal(size=(4, 2, 16))
    net.zero_grad()
    out = net(x)
    ad.backward(ad.tsum(out))
    for name, p in net.parameters().items():
        assert np.abs(p.grad).max() > 0.0, f"no gradient reached {name}"


def test_dead_edges_get_no_parameters():
    # 3 -> 9 exists but node 3 is unreachable; no module should be built for it
    m = cell_with((OP_CONV, 0, 12, 3), (OP_CONV, 3, 9, 5))
    g = preprocess(m, CFG)
    net = compile_network(g, NetworkSpec(input_channels=3, head="none"), seed=0)
    assert not any("e3-9" in k for k in net.parameters())


def test_flatten_head_requires_length():
    with pytest.raises(CompileError):
        compile_network(minimal_graph(),
                        NetworkSpec(input_channels=3, head="linear_flatten",
                                    output_width=2), seed=0)
    net = compile_network(minimal_graph(),
                          NetworkSpec(input_channels=3, head="linear_flatten",
                                      output_width=2, input_length=16), seed=0)
    assert net(np.zeros((2, 3, 16))).shape == (2, 2)


def test_input_channel_mismatch_raises():
    net = compile_network(minimal_graph(), NetworkSpec(input_channels=3), seed=0)
    with pytest.raises(CompileError):
        net(np.zeros((2, 5, 16)))


def test_masked_forward_keeps_only_one_node():
    cfg = CFG.scaled(8, 4)
    m = cell_with((OP_CONV, 0, 4, 3), (OP_CONV, 0, 9, 5),
                  (OP_CONV, 4, 12, 3), (OP_CONV, 9, 12, 3))
    g = preprocess(m, cfg)
    net = compile_network(g, NetworkSpec(input_channels=2, output_width=2), seed=0)
    x = np.random.default_rng(4).normal(size=(2, 2, 12))
    full = net(x).data
    only4 = net.forward_with_first_cell_mask(x, keep_node=4).data
    only9 = net.forward_with_first_cell_mask(x, keep_node=9).data
    assert not np.allclose(full, only4)
    assert not np.allclose(only4, only9)


# -- fixed reference models ----------------------------------------------------


def test_unknown_motivation_kind():
    with pytest.raises(ValueError):
        build_motivation_model("M_99")


def test_m20_first_layer_receptive_field():
    net = build_motivation_model("M_20", base_width=8)
    assert net.kernels == (20,)


def test_mall_kernel_range():
    net = build_motivation_model("M_all", base_width=8)
    assert {3, 20}.issubset(set(net.kernels))
    assert net.kernels == M_ALL_KERNELS


@pytest.mark.parametrize("base_width", [16, 128])
def test_parameter_counts_within_15_percent(base_width):
    counts = [count_parameters(build_motivation_model(kind, in_channels=12,
                                                      classes=5,
                                                      base_width=base_width))
              for kind in MOTIVATION_KINDS]
    assert max(counts) / min(counts) <= 1.15


def test_motivation_forward_shapes():
    net = build_motivation_model("M_all", in_channels=2, classes=3, base_width=8)
    out = net(np.random.default_rng(0).normal(size=(4, 2, 32)))
    assert out.shape == (4, 3)
