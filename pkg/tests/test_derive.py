"""Discretization, path encoding, parameter and FLOPs accounting."""

import numpy as np
import pytest

from tnas import derive, searchspace
from tnas.derive import (
    DerivedArch,
    DerivedCell,
    arch_from_text,
    arch_to_text,
    count_flops,
    count_params,
    derive_architecture,
    op_flops,
    op_params,
)
from tnas.engine import DerivedModel, SearchConfig
from tnas.ndgraph import Tensor
from tnas.searchspace import build_supernet, tree_forward


def _cfg(**kw):
    base = dict(blocks=3, cells_per_block=3, base_width=16, scale=2,
                data_count=8, holdout_count=2)
    base.update(kw)
    return SearchConfig(**base).validate()


def _net(cfg, seed=0):
    return build_supernet(cfg, np.random.default_rng(seed))


def test_argmax_rules_and_tail_pruning():
    cfg = _cfg()
    net = _net(cfg)
    net.path_logits.data = np.array([0.1, 0.7, 0.2])
    for block in net.blocks:
        for cell in block:
            cell.op_logits.data = np.array([0.0, 0.0, 1.0, 0.0])
            for br in cell.branches:
                br.width_logits.data = np.array([0.0, 0.0, 0.0, 0.0, 2.0])
    arch = derive_architecture(net)
    assert arch.terminal_node == 1
    assert arch.path == [0, 0]
    assert arch.path_string() == "[0,0]"
    assert len(arch.cells) == 2  # block 2 pruned
    assert all(dc.kind == "residual" and dc.width == 16 for row in arch.cells for dc in row)


def test_uniform_logits_resolve_to_lowest_index():
    cfg = _cfg()
    net = _net(cfg)
    net.path_logits.data = np.zeros(3)
    for block in net.blocks:
        for cell in block:
            cell.op_logits.data = np.zeros(4)
            for br in cell.branches:
                br.width_logits.data = np.zeros(5)
    arch = derive_architecture(net)
    assert arch.terminal_node == 0
    assert all(dc.kind == "conv1x1" and dc.width == 5 for row in arch.cells for dc in row)


def test_path_string_three_blocks():
    arch = DerivedArch(scale=2, base_width=16, terminal_node=2,
                       cells=[[DerivedCell("conv1x1", 8)]] * 3)
    assert arch.path_string() == "[0,0,0]"


def test_count_params_hand_counts():
    # single 3x3 conv 3->16 with bias: 3*3*3*16 + 16 = 448 (the stem)
    assert derive.stem_params(16) == 448
    # conv1x1 cell at width 8, base 16: 16*8+8 + 8*16+16 = 280
    assert op_params("conv1x1", 16, 8) == 280
    # residual at width 5: 9*16*5+5 + 9*5*16+16 = 1461
    assert op_params("residual", 16, 5) == 9 * 16 * 5 + 5 + 9 * 5 * 16 + 16
    # depthwise at width 13: 16*13+13 + 9*13+13 + 13*16+16
    assert op_params("depthwise", 16, 13) == 16 * 13 + 13 + 9 * 13 + 13 + 13 * 16 + 16
    arch = DerivedArch(scale=2, base_width=16, terminal_node=0,
                       cells=[[DerivedCell("conv1x1", 8), DerivedCell("residual", 5)]])
    expect = 448 + derive.tail_params(16, 2) + 280 + op_params("residual", 16, 5)
    assert count_params(arch) == expect


def test_width_half_halves_conv1x1_kernel_params():
    full = op_params("conv1x1", 16, 16)
    half = op_params("conv1x1", 16, 8)
    # kernel scalars only: subtract biases (width + base)
    assert full - (16 + 16) == 2 * (half - (8 + 16))


def test_params_monotone_in_path_length():
    cfg = _cfg()
    net = _net(cfg)
    net.path_logits.data = np.array([1.0, 0.0, 0.0])
    short = derive_architecture(net)
    net.path_logits.data = np.array([0.0, 0.0, 1.0])
    full = derive_architecture(net)
    assert count_params(short) < count_params(full)


def test_count_flops_hand_count():
    # plain 3x3 conv, cin=cout=8 on a 16x16 map: 2*9*8*8*256 = 294912
    assert derive._conv_flops(3, 8, 8, 16, 16) == 294_912
    # conv1x1 cell, base 16, width 8, 4x4 map:
    # main 2*16*8*16 + lrelu 8*16 + restore 2*8*16*16
    assert op_flops("conv1x1", 16, 8, 4, 4) == 2 * 16 * 8 * 16 + 8 * 16 + 2 * 8 * 16 * 16


def test_count_flops_linear_in_height():
    arch = DerivedArch(scale=2, base_width=16, terminal_node=1,
                       cells=[[DerivedCell("conv3x3", 13)], [DerivedCell("depthwise", 5)]])
    assert count_flops(arch, 32, 16) == 2 * count_flops(arch, 16, 16)
    assert count_flops(arch, 32, 32) == 4 * count_flops(arch, 16, 16)


def test_count_flops_rejects_bad_resolution():
    arch = DerivedArch(scale=2, base_width=16, terminal_node=0,
                       cells=[[DerivedCell("conv1x1", 8)]])
    with pytest.raises(ValueError, match="positive"):
        count_flops(arch, 0, 16)


def test_pruned_blocks_contribute_nothing():
    cells = [[DerivedCell("conv3x3", 16)], [DerivedCell("conv3x3", 16)]]
    short = DerivedArch(scale=2, base_width=16, terminal_node=0, cells=cells[:1])
    full = DerivedArch(scale=2, base_width=16, terminal_node=1, cells=cells)
    diff_flops = count_flops(full, 8, 8) - count_flops(short, 8, 8)
    assert diff_flops == derive.block_flops(cells[1], 16, 8, 8)
    diff_params = count_params(full) - count_params(short)
    assert diff_params == op_params("conv3x3", 16, 16)


def test_derived_forward_bit_identical_to_one_hot_supernet():
    cfg = _cfg()
    net = _net(cfg, seed=3)
    rng = np.random.default_rng(4)
    net.path_logits.data = np.array([0.0, 1.0, 0.0])
    for block in net.blocks:
        for cell in block:
            cell.op_logits.data = rng.normal(0, 1, 4)
            for br in cell.branches:
                br.width_logits.data = rng.normal(0, 1, 5)
    arch = derive_architecture(net)
    model = DerivedModel(arch, cfg, net=net)

    beta = np.zeros(3)
    beta[arch.terminal_node] = 1.0
    alpha = []
    ratios = []
    for block in net.blocks:
        arow, rrow = [], []
        for cell in block:
            a = np.zeros(4)
            a[int(np.argmax(cell.op_logits.data))] = 1.0
            arow.append(a)
            rrow.append([int(np.argmax(br.width_logits.data)) for br in cell.branches])
        alpha.append(arow)
        ratios.append(rrow)
    x = rng.random((2, 3, 8, 8))
    super_out = tree_forward(net, Tensor(x), beta, alpha, ratios)
    model_out = model.forward(x)
    assert np.array_equal(super_out.data, model_out.data)


def test_arch_text_roundtrip():
    arch = DerivedArch(scale=2, base_width=16, terminal_node=1,
                       cells=[[DerivedCell("conv1x1", 8), DerivedCell("depthwise", 13)],
                              [DerivedCell("residual", 16), DerivedCell("conv3x3", 5)]])
    text = arch_to_text(arch)
    assert "path [0,0]" in text
    back = arch_from_text(text)
    assert back.scale == arch.scale
    assert back.base_width == arch.base_width
    assert back.terminal_node == arch.terminal_node
    assert back.cells == arch.cells


def test_arch_text_rejects_inconsistent_path():
    arch = DerivedArch(scale=2, base_width=16, terminal_node=0,
                       cells=[[DerivedCell("conv1x1", 8)]])
    text = arch_to_text(arch).replace("path [0]", "path [0,0]")
    with pytest.raises(ValueError, match="inconsistent"):
        arch_from_text(text)
