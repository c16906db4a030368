"""Supernet structure, mixtures, width slicing, path enumeration."""

import numpy as np
import pytest

from tnas import ndgraph as ng
from tnas import projections, searchspace
from tnas.engine import SearchConfig
from tnas.ndgraph import Tensor
from tnas.searchspace import (
    EXPANSION_RATIOS,
    OP_KINDS,
    build_supernet,
    encode_path,
    enumerate_paths,
    supercell_forward,
    superkernel_forward,
    tree_forward,
    width_options,
)


def _cfg(**kw):
    base = dict(blocks=3, cells_per_block=3, base_width=16, scale=2,
                data_count=8, holdout_count=2, t1=1, t2=1, t3=1)
    base.update(kw)
    return SearchConfig(**base).validate()


def _net(cfg, seed=0):
    return build_supernet(cfg, np.random.default_rng(seed))


def _uniform_state(net):
    alpha = [[np.full(4, 0.25) for _ in b] for b in net.blocks]
    beta = np.full(net.blocks_n, 1.0 / net.blocks_n)
    grid = [[[len(EXPANSION_RATIOS) - 1] * 4 for _ in b] for b in net.blocks]
    return alpha, beta, grid


def test_ratio_set_and_width_options():
    assert EXPANSION_RATIOS == (1 / 3, 1 / 2, 4 / 5, 5 / 6, 1.0)
    assert width_options(16) == [5, 8, 13, 13, 16]
    assert width_options(64) == [21, 32, 51, 53, 64]
    with pytest.raises(ValueError, match="too small"):
        width_options(1)


def test_build_counts():
    net = _net(_cfg())
    assert len(net.path_logits.data) == 3
    cells = [c for b in net.blocks for c in b]
    assert len(cells) == 9
    assert sum(len(c.branches) for c in cells) == 36
    kinds = [br.kind for br in cells[0].branches]
    assert kinds == list(OP_KINDS)


def test_build_determinism():
    a = _net(_cfg(), seed=7)
    b = _net(_cfg(), seed=7)
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    for (na, ta), (nb, tb) in zip(a.arch_parameters(), b.arch_parameters()):
        assert na == nb and np.array_equal(ta.data, tb.data)


def test_single_block_tree_degenerates():
    cfg = _cfg(blocks=1, cells_per_block=1)
    net = _net(cfg)
    alpha, beta, grid = _uniform_state(net)
    x = np.random.default_rng(0).random((2, 3, 8, 8))
    out = tree_forward(net, Tensor(x), beta, alpha, grid)
    assert out.data.shape == (2, 3, 16, 16)


def test_supercell_one_hot_equals_single_branch():
    cfg = _cfg()
    net = _net(cfg)
    cell = net.blocks[0][0]
    x = Tensor(np.random.default_rng(1).random((2, 16, 8, 8)))
    one_hot = np.array([0.0, 1.0, 0.0, 0.0])
    mixed = supercell_forward(cell, x, one_hot, [4, 4, 4, 4])
    alone = superkernel_forward(cell.branches[1], x, 4)
    assert np.array_equal(mixed.data, alone.data)


def test_supercell_zeroed_weights_give_zero():
    cfg = _cfg()
    net = _net(cfg)
    cell = net.blocks[0][0]
    for br in cell.branches:
        for t in br.weights.values():
            t.data = np.zeros_like(t.data)
    x = Tensor(np.random.default_rng(2).random((1, 16, 4, 4)))
    out = supercell_forward(cell, x, np.full(4, 0.25), [4, 4, 4, 4])
    # three linear branches are exactly zero; the residual branch passes x
    expected = 0.25 * x.data
    assert np.allclose(out.data, expected, atol=1e-15)


def test_supercell_convex_combination_exact():
    cfg = _cfg()
    net = _net(cfg)
    cell = net.blocks[0][0]
    x = Tensor(np.random.default_rng(3).random((1, 16, 6, 6)))
    w = np.array([0.0, 0.3, 0.7, 0.0])
    mixed = supercell_forward(cell, x, w, [2, 2, 2, 2])
    b1 = superkernel_forward(cell.branches[1], x, 2)
    b2 = superkernel_forward(cell.branches[2], x, 2)
    assert np.array_equal(mixed.data, 0.3 * b1.data + 0.7 * b2.data)


def test_supercell_zero_weight_branch_gets_no_gradient():
    cfg = _cfg()
    net = _net(cfg)
    cell = net.blocks[0][0]
    for br in cell.branches:
        for t in br.weights.values():
            t.requires_grad = True
    x = Tensor(np.random.default_rng(4).random((1, 16, 4, 4)))
    out = supercell_forward(cell, x, np.array([0.5, 0.0, 0.5, 0.0]), [4, 4, 4, 4])
    ng.backward(ng.tsum(out))
    for i, br in enumerate(cell.branches):
        grads = [t.grad for t in br.weights.values()]
        if i in (0, 2):
            assert any(g is not None and np.abs(g).sum() > 0 for g in grads)
        else:
            assert all(g is None for g in grads)


def test_superkernel_full_ratio_equals_plain_conv():
    cfg = _cfg()
    net = _net(cfg)
    br = net.blocks[0][0].branches[0]  # conv1x1
    x = Tensor(np.random.default_rng(5).random((1, 16, 5, 5)))
    out = superkernel_forward(br, x, len(EXPANSION_RATIOS) - 1)
    h = ng.conv2d_raw(x.data, br.weights["main_k"].data, br.weights["main_b"].data)
    h = np.where(h > 0, h, 0.2 * h)
    ref = ng.conv2d_raw(h, br.weights["proj_k"].data, br.weights["proj_b"].data)
    assert np.allclose(out.data, ref, atol=1e-14)


def test_superkernel_unused_channels_get_zero_grad():
    cfg = _cfg()
    net = _net(cfg)
    br = net.blocks[0][0].branches[1]  # conv3x3
    for t in br.weights.values():
        t.requires_grad = True
    x = Tensor(np.random.default_rng(6).random((1, 16, 4, 4)))
    out = superkernel_forward(br, x, 1)  # width 8 of 16
    ng.backward(ng.tsum(out))
    assert np.abs(br.weights["main_k"].grad[:8]).sum() > 0
    assert np.array_equal(br.weights["main_k"].grad[8:], np.zeros_like(br.weights["main_k"].grad[8:]))
    assert np.array_equal(br.weights["main_b"].grad[8:], np.zeros(8))
    # restore conv consumes only the first 8 input channels
    assert np.array_equal(br.weights["proj_k"].grad[:, 8:], np.zeros_like(br.weights["proj_k"].grad[:, 8:]))


def test_superkernel_nested_zero_pad_equivalence():
    cfg = _cfg()
    net = _net(cfg)
    br = net.blocks[0][0].branches[1]
    x = Tensor(np.random.default_rng(7).random((1, 16, 4, 4)))
    narrow = superkernel_forward(br, x, 1)
    # zero the trailing output channels of the main kernel, run at full width
    saved_k = br.weights["main_k"].data.copy()
    saved_b = br.weights["main_b"].data.copy()
    br.weights["main_k"].data[8:] = 0.0
    br.weights["main_b"].data[8:] = 0.0
    wide = superkernel_forward(br, x, len(EXPANSION_RATIOS) - 1)
    br.weights["main_k"].data = saved_k
    br.weights["main_b"].data = saved_b
    assert np.allclose(narrow.data, wide.data, atol=1e-14)


def test_superkernel_rejects_bad_ratio_index():
    cfg = _cfg()
    net = _net(cfg)
    with pytest.raises(ValueError, match="ratio_index"):
        superkernel_forward(net.blocks[0][0].branches[0], Tensor(np.zeros((1, 16, 4, 4))), 7)


def test_tree_one_hot_beta_runs_prefix_only():
    cfg = _cfg()
    net = _net(cfg)
    alpha, _, grid = _uniform_state(net)
    beta = np.array([1.0, 0.0, 0.0])
    x = np.random.default_rng(8).random((1, 3, 8, 8))
    net.reset_exec_counts()
    out = tree_forward(net, Tensor(x), beta, alpha, grid)
    assert net.exec_counts == [1, 0, 0]
    # equals tail(block0(stem(x))) computed by hand
    f = net.stem(Tensor(x))
    y = f
    for cell in net.blocks[0]:
        y = supercell_forward(cell, y, alpha[0][0], grid[0][0])
    f1 = ng.add(y, f)
    ref = net.tail(f1)
    assert np.array_equal(out.data, ref.data)


def test_tree_identity_blocks_collapse_to_stem_tail():
    cfg = _cfg()
    net = _net(cfg)
    # zero every cell weight: each block becomes the identity via its skip
    for block in net.blocks:
        for cell in block:
            for br in cell.branches:
                for t in br.weights.values():
                    t.data = np.zeros_like(t.data)
    alpha, _, grid = _uniform_state(net)
    # residual branches still pass x through their skips; zero their alpha
    alpha = [[np.array([0.5, 0.5, 0.0, 0.0]) for _ in b] for b in net.blocks]
    x = np.random.default_rng(9).random((1, 3, 8, 8))
    for beta in (np.array([0.3, 0.3, 0.4]), np.array([0.0, 0.5, 0.5])):
        out = tree_forward(net, Tensor(x), beta, alpha, grid)
        ref = net.tail(net.stem(Tensor(x)))
        assert np.allclose(out.data, ref.data, atol=1e-12)


def test_tree_skips_trailing_zero_weight_blocks():
    cfg = _cfg()
    net = _net(cfg)
    alpha, _, grid = _uniform_state(net)
    beta = np.array([0.7, 0.3, 0.0])
    net.reset_exec_counts()
    tree_forward(net, Tensor(np.random.default_rng(10).random((1, 3, 8, 8))), beta, alpha, grid)
    assert net.exec_counts == [1, 1, 0]


def test_tree_output_size_scales():
    for scale, hw in ((2, 8), (3, 5)):
        cfg = _cfg(scale=scale, image_h=hw * scale * 2, image_w=hw * scale * 2, patch_size=hw)
        net = _net(cfg)
        alpha, beta, grid = _uniform_state(net)
        out = tree_forward(net, Tensor(np.zeros((1, 3, hw, hw))), beta, alpha, grid)
        assert out.data.shape == (1, 3, hw * scale, hw * scale)


def test_per_node_tail_one_hot_matches_default():
    cfg = _cfg()
    net = _net(cfg)
    alpha, _, grid = _uniform_state(net)
    beta = np.array([0.0, 1.0, 0.0])
    x = Tensor(np.random.default_rng(11).random((1, 3, 8, 8)))
    a = tree_forward(net, x, beta, alpha, grid, per_node_tail=False)
    b = tree_forward(net, x, beta, alpha, grid, per_node_tail=True)
    assert np.array_equal(a.data, b.data)


def test_enumerate_paths_prefixes():
    net = _net(_cfg())
    assert enumerate_paths(net) == [[0], [0, 0], [0, 0, 0]]
    net1 = _net(_cfg(blocks=1))
    assert enumerate_paths(net1) == [[0]]


def test_published_path_encoding_on_five_block_tree():
    # a 3-block path inside a 5-block tree is node index 2, encoded [0,0,0]
    net5 = _net(_cfg(blocks=5))
    paths = enumerate_paths(net5)
    assert paths[2] == [0, 0, 0]
    assert encode_path(2) == "[0,0,0]"


def test_arch_logit_init_near_uniform():
    net = _net(_cfg())
    for _, t in net.arch_parameters():
        assert np.all(np.abs(t.data) <= 1e-3)
