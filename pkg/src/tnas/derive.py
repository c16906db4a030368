"""Discretizing a searched supernet and counting what the result costs.

The derived architecture keeps the blocks up to the argmax path node
(tails are pruned, never interior blocks), picks the argmax operation per
cell and the argmax expansion ratio per kernel. Ties resolve to the lowest
index everywhere.

FLOPs use the 2-ops-per-multiply-accumulate convention,
``2 * k^2 * Cin/groups * Cout * Hout * Wout`` per convolution, and 1 op per
output element for elementwise work; biases are not counted. Parameter
counts are exact learnable scalars including biases, stem and tail.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import projections, searchspace
from .searchspace import EXPANSION_RATIOS, OP_KINDS, encode_path, width_options

__all__ = [
    "DerivedCell",
    "DerivedArch",
    "derive_architecture",
    "count_params",
    "count_flops",
    "op_params",
    "op_flops",
    "op_flops_coeffs",
    "arch_to_text",
    "arch_from_text",
]


@dataclass(frozen=True)
class DerivedCell:
    kind: str
    width: int


@dataclass
class DerivedArch:
    """A concrete architecture with exact cost accounting."""

    scale: int
    base_width: int
    terminal_node: int
    cells: list = field(default_factory=list)  # cells[block][cell] -> DerivedCell

    @property
    def path(self):
        return [0] * (self.terminal_node + 1)

    def path_string(self):
        return encode_path(self.terminal_node)


def derive_architecture(net):
    """Argmax discretization of the supernet's architecture logits.

    Selections go through the endpoint normalization (exclusion radius at
    the circumradius), whose one-hot output provably lands on the argmax of
    the raw logits when unique; ties break to the lowest index.
    """
    k_path = net.blocks_n
    beta_onehot = projections.sparsestmax(net.path_logits.data, projections.circumradius(k_path)) if k_path > 1 else np.ones(1)
    terminal = int(np.argmax(beta_onehot))
    widths = width_options(net.base_width)
    cells = []
    for bi in range(terminal + 1):
        row = []
        for cell in net.blocks[bi]:
            a = projections.sparsestmax(cell.op_logits.data, projections.circumradius(len(OP_KINDS)))
            kind = OP_KINDS[int(np.argmax(a))]
            br = cell.branches[int(np.argmax(a))]
            ratio_idx = int(np.argmax(br.width_logits.data))
            row.append(DerivedCell(kind=kind, width=widths[ratio_idx]))
        cells.append(row)
    return DerivedArch(
        scale=net.scale, base_width=net.base_width, terminal_node=terminal, cells=cells
    )


# ---------------------------------------------------------------------------
# cost accounting shared with the differentiable efficiency term


def _conv_flops(k, cin, cout, h, w, groups=1):
    return 2 * k * k * (cin // groups) * cout * h * w


def op_flops_coeffs(kind, c, h, w):
    """(a, b) with op FLOPs = a*width + b; linear in the internal width."""
    hw = h * w
    if kind == "conv1x1":
        # main 1x1 (c->w), leaky, restore 1x1 (w->c)
        return (2 * c * hw + hw + 2 * c * hw, 0)
    if kind == "conv3x3":
        return (18 * c * hw + hw + 2 * c * hw, 0)
    if kind == "residual":
        # conv3x3 (c->w), leaky, conv3x3 (w->c), skip add
        return (18 * c * hw + hw + 18 * c * hw, c * hw)
    if kind == "depthwise":
        # 1x1 (c->w), leaky, depthwise 3x3, leaky, 1x1 (w->c)
        return (2 * c * hw + hw + 18 * hw + hw + 2 * c * hw, 0)
    raise ValueError(f"unknown op kind {kind!r}")


def op_flops(kind, c, width, h, w):
    a, b = op_flops_coeffs(kind, c, h, w)
    return a * width + b


def op_params(kind, c, width):
    """Learnable scalars of one candidate op at the given internal width."""
    if kind == "conv1x1":
        return c * width + width + width * c + c
    if kind == "conv3x3":
        return 9 * c * width + width + width * c + c
    if kind == "residual":
        return 9 * c * width + width + 9 * width * c + c
    if kind == "depthwise":
        return c * width + width + 9 * width + width + width * c + c
    raise ValueError(f"unknown op kind {kind!r}")


def stem_flops(c, h, w):
    return _conv_flops(3, 3, c, h, w)


def tail_flops(c, scale, h, w):
    return _conv_flops(3, c, scale * scale * 3, h, w)  # pixel shuffle is free


def stem_params(c):
    return 9 * 3 * c + c


def tail_params(c, scale):
    t = scale * scale * 3
    return 9 * c * t + t


def block_flops(cells_row, c, h, w):
    """One residual block: its cells plus the block skip add."""
    total = sum(op_flops(dc.kind, c, dc.width, h, w) for dc in cells_row)
    return total + c * h * w


def count_params(arch):
    """Exact learnable scalar count of the derived model."""
    c = arch.base_width
    total = stem_params(c) + tail_params(c, arch.scale)
    for row in arch.cells:
        for dc in row:
            total += op_params(dc.kind, c, dc.width)
    return total


def count_flops(arch, h, w):
    """FLOPs of the derived model on an ``h x w`` low-resolution input."""
    if h <= 0 or w <= 0:
        raise ValueError(f"resolution must be positive, got {h}x{w}")
    c = arch.base_width
    total = stem_flops(c, h, w) + tail_flops(c, arch.scale, h, w)
    for row in arch.cells:
        total += block_flops(row, c, h, w)
    return total


# ---------------------------------------------------------------------------
# human-readable structured-text serialization


def arch_to_text(arch):
    """Path string plus a per-block operation/width table."""
    lines = [
        f"path {arch.path_string()}",
        f"terminal_node {arch.terminal_node}",
        f"scale {arch.scale}",
        f"base_width {arch.base_width}",
        "",
        "block | " + " | ".join(f"op{i + 1}" for i in range(len(arch.cells[0]))),
    ]
    for bi, row in enumerate(arch.cells):
        lines.append(f"{bi} | " + " | ".join(f"({dc.kind}, {dc.width})" for dc in row))
    return "\n".join(lines) + "\n"


def arch_from_text(text):
    head = {}
    table = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("block |"):
            continue
        if "|" in line:
            bi, rest = line.split("|", 1)
            row = []
            for item in rest.split("|"):
                item = item.strip().strip("()")
                kind, width = item.split(",")
                row.append(DerivedCell(kind=kind.strip(), width=int(width)))
            table.append((int(bi), row))
            continue
        key, val = line.split(None, 1)
        head[key] = val
    table.sort(key=lambda t: t[0])
    arch = DerivedArch(
        scale=int(head["scale"]),
        base_width=int(head["base_width"]),
        terminal_node=int(head["terminal_node"]),
        cells=[row for _, row in table],
    )
    if arch.path_string() != head["path"]:
        raise ValueError(f"inconsistent arch file: path {head['path']} vs terminal node {arch.terminal_node}")
    return arch
