"""The three-level search space and its weight-sharing continuous model.

Levels, from coarse to fine:

* network: how many residual blocks the path keeps before the fixed
  upsampling tail. Paths are prefixes of the block sequence; one logit per
  intermediate feature map ("node") weighs its contribution to the output.
* cell: which of four candidate operations each cell inside a block runs.
* kernel: how many internal channels each candidate operation keeps, chosen
  from a fixed set of expansion ratios applied to the full-width kernel.

Every candidate operation maps ``base_width -> base_width`` externally; the
searched ratio prunes only internal channels (leading-slice convention), with
a pointwise restore convolution where the operation has no natural second
layer. That keeps all mixture branches shape-compatible.
"""

from __future__ import annotations

import numpy as np

from . import ndgraph
from .ndgraph import Tensor

__all__ = [
    "OP_KINDS",
    "EXPANSION_RATIOS",
    "LEAKY_SLOPE",
    "width_options",
    "CandidateOp",
    "SuperCell",
    "TreeSupernet",
    "build_supernet",
    "supercell_forward",
    "superkernel_forward",
    "tree_forward",
    "enumerate_paths",
    "encode_path",
]

OP_KINDS = ("conv1x1", "conv3x3", "residual", "depthwise")
EXPANSION_RATIOS = (1.0 / 3.0, 1.0 / 2.0, 4.0 / 5.0, 5.0 / 6.0, 1.0)
LEAKY_SLOPE = 0.2


def width_options(base_width):
    """Channel counts reachable from the full width under the ratio set."""
    widths = [int(round(r * base_width)) for r in EXPANSION_RATIOS]
    if any(w < 1 for w in widths):
        raise ValueError(f"base_width {base_width} too small: ratio set yields widths {widths}")
    return widths


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _param(rng, shape, fan_in, dtype):
    return Tensor(_he_uniform(rng, shape, fan_in, dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class CandidateOp:
    """One cell candidate backed by a full-width superkernel.

    ``alloc_width`` is the allocated internal channel count (the full base
    width in the supernet, the derived width in a compact model). ``forward``
    takes the active internal width and slices the leading channels.
    """

    def __init__(self, kind, base_width, rng, dtype=np.float64, alloc_width=None):
        if kind not in OP_KINDS:
            raise ValueError(f"unknown candidate op kind {kind!r}")
        self.kind = kind
        self.base_width = base_width
        self.alloc_width = base_width if alloc_width is None else alloc_width
        c, w = base_width, self.alloc_width
        if kind == "conv1x1":
            self.weights = {
                "main_k": _param(rng, (w, c, 1, 1), c, dtype),
                "main_b": _zeros((w,), dtype),
                "proj_k": _param(rng, (c, w, 1, 1), w, dtype),
                "proj_b": _zeros((c,), dtype),
            }
        elif kind == "conv3x3":
            self.weights = {
                "main_k": _param(rng, (w, c, 3, 3), c * 9, dtype),
                "main_b": _zeros((w,), dtype),
                "proj_k": _param(rng, (c, w, 1, 1), w, dtype),
                "proj_b": _zeros((c,), dtype),
            }
        elif kind == "residual":
            self.weights = {
                "k1": _param(rng, (w, c, 3, 3), c * 9, dtype),
                "b1": _zeros((w,), dtype),
                "k2": _param(rng, (c, w, 3, 3), w * 9, dtype),
                "b2": _zeros((c,), dtype),
            }
        else:  # depthwise
            self.weights = {
                "k1": _param(rng, (w, c, 1, 1), c, dtype),
                "b1": _zeros((w,), dtype),
                "dw_k": _param(rng, (w, 1, 3, 3), 9, dtype),
                "dw_b": _zeros((w,), dtype),
                "k2": _param(rng, (c, w, 1, 1), w, dtype),
                "b2": _zeros((c,), dtype),
            }
        # width-choice logits, one per expansion ratio
        self.width_logits = Tensor(np.zeros(len(EXPANSION_RATIOS), dtype=np.float64))

    def forward(self, x, width):
        """Apply the op at internal ``width`` channels (leading slice)."""
        if not 1 <= width <= self.alloc_width:
            raise ValueError(f"width {width} outside 1..{self.alloc_width}")
        w = self.weights

        def cut(t, axis=0):
            return ndgraph.slice_leading(t, width, axis)

        if self.kind in ("conv1x1", "conv3x3"):
            h = ndgraph.conv2d(x, cut(w["main_k"]), cut(w["main_b"]))
            h = ndgraph.leaky_relu(h, LEAKY_SLOPE)
            out = ndgraph.conv2d(h, cut(w["proj_k"], axis=1), w["proj_b"])
        elif self.kind == "residual":
            h = ndgraph.conv2d(x, cut(w["k1"]), cut(w["b1"]))
            h = ndgraph.leaky_relu(h, LEAKY_SLOPE)
            h = ndgraph.conv2d(h, cut(w["k2"], axis=1), w["b2"])
            out = ndgraph.add(h, x)
        else:
            h = ndgraph.conv2d(x, cut(w["k1"]), cut(w["b1"]))
            h = ndgraph.leaky_relu(h, LEAKY_SLOPE)
            h = ndgraph.conv2d(h, cut(w["dw_k"]), cut(w["dw_b"]), groups=width)
            h = ndgraph.leaky_relu(h, LEAKY_SLOPE)
            out = ndgraph.conv2d(h, cut(w["k2"], axis=1), w["b2"])
        return out


def _mul_by_scalar_tensor(x, s):
    """Broadcast multiply by a 0-d tensor (the straight-through width scale)."""

    def bw(g):
        if x.requires_grad or x.tape is not None:
            x.accumulate_grad(g * float(s.data))
        if s.requires_grad or s.tape is not None:
            s.accumulate_grad(np.asarray(float((g * x.data).sum()), dtype=s.data.dtype))

    return ndgraph.from_op(x.data * float(s.data), (x, s), bw)


class SuperCell:
    """All four candidate ops over one input, mixed by normalized weights."""

    def __init__(self, base_width, rng, dtype=np.float64):
        self.branches = [CandidateOp(kind, base_width, rng, dtype) for kind in OP_KINDS]
        self.op_logits = Tensor(np.zeros(len(OP_KINDS), dtype=np.float64))


class TreeSupernet:
    """Fixed stem, a chain of residual blocks of supercells, fixed tail.

    All nodes share the channel count, so every node's feature map is a legal
    input to the tail and any prefix of the block chain is a feasible path.
    """

    def __init__(self, cfg_blocks, cells_per_block, base_width, scale, rng, dtype=np.float64):
        self.blocks_n = cfg_blocks
        self.cells_per_block = cells_per_block
        self.base_width = base_width
        self.scale = scale
        self.dtype = dtype
        self.widths = width_options(base_width)
        c = base_width
        self.stem_k = _param(rng, (c, 3, 3, 3), 27, dtype)
        self.stem_b = _zeros((c,), dtype)
        self.blocks = [
            [SuperCell(base_width, rng, dtype) for _ in range(cells_per_block)]
            for _ in range(cfg_blocks)
        ]
        tail_c = scale * scale * 3
        self.tail_k = _param(rng, (tail_c, c, 3, 3), c * 9, dtype)
        self.tail_b = _zeros((tail_c,), dtype)
        # one path logit per node (feature map after each block)
        self.path_logits = Tensor(np.zeros(cfg_blocks, dtype=np.float64))
        self.exec_counts = [0] * cfg_blocks

    def parameters(self):
        """Ordered (name, tensor) pairs of all shared network weights."""
        out = [("stem.k", self.stem_k), ("stem.b", self.stem_b)]
        for bi, block in enumerate(self.blocks):
            for ci, cell in enumerate(block):
                for oi, br in enumerate(cell.branches):
                    for wn, t in br.weights.items():
                        out.append((f"block{bi}.cell{ci}.op{oi}.{wn}", t))
        out.append(("tail.k", self.tail_k))
        out.append(("tail.b", self.tail_b))
        return out

    def arch_parameters(self):
        """Ordered (name, tensor) pairs of all architecture logits."""
        out = [("path", self.path_logits)]
        for bi, block in enumerate(self.blocks):
            for ci, cell in enumerate(block):
                out.append((f"block{bi}.cell{ci}.op", cell.op_logits))
                for oi, br in enumerate(cell.branches):
                    out.append((f"block{bi}.cell{ci}.op{oi}.width", br.width_logits))
        return out

    def stem(self, x):
        return ndgraph.conv2d(x, self.stem_k, self.stem_b)

    def tail(self, f):
        y = ndgraph.conv2d(f, self.tail_k, self.tail_b)
        return ndgraph.pixel_shuffle(y, self.scale)

    def reset_exec_counts(self):
        self.exec_counts = [0] * self.blocks_n


def build_supernet(cfg, rng):
    """Construct the supernet from a validated config, seeded.

    Weights are He-uniform; architecture logits start as small uniform noise
    so that early normalizations are near the simplex center but never
    exactly tied.
    """
    net = TreeSupernet(
        cfg.blocks, cfg.cells_per_block, cfg.base_width, cfg.scale, rng, dtype=cfg.np_dtype()
    )
    for _, t in net.arch_parameters():
        t.data = rng.uniform(-1e-3, 1e-3, size=t.data.shape)
    return net


def superkernel_forward(op, x, ratio_index, ste=None):
    """Run a candidate op with the sub-kernel of the given expansion ratio."""
    if not 0 <= ratio_index < len(EXPANSION_RATIOS):
        raise ValueError(f"ratio_index {ratio_index} outside [0,{len(EXPANSION_RATIOS)})")
    width = width_options(op.base_width)[ratio_index]
    out = op.forward(x, min(width, op.alloc_width))
    if ste is not None:
        out = _mul_by_scalar_tensor_at(out, ste[0], ste[1])
    return out


def _mul_by_scalar_tensor_at(x, soft, index):
    s = ndgraph.ste_select(soft, index)
    return _mul_by_scalar_tensor(x, s)


def supercell_forward(cell, x, alpha_norm, ratio_indices, stes=None):
    """Weighted sum of candidate-op outputs; weight-0 branches are skipped
    entirely (no forward cost, no gradient)."""
    a = alpha_norm.data if isinstance(alpha_norm, Tensor) else np.asarray(alpha_norm)
    graph_alpha = isinstance(alpha_norm, Tensor) and (
        alpha_norm.requires_grad or alpha_norm.tape is not None
    )
    terms = []
    for i, br in enumerate(cell.branches):
        wi = float(a[i])
        if wi == 0.0:
            continue
        ste = None if stes is None else stes[i]
        y = superkernel_forward(br, x, ratio_indices[i], ste)
        if graph_alpha:
            terms.append(ndgraph.scale_by_element(y, alpha_norm, i))
        elif wi == 1.0:
            terms.append(y)
        else:
            terms.append(ndgraph.scale(y, wi))
    if not terms:
        raise ValueError("supercell_forward: all mixture weights are zero")
    out = terms[0]
    for t in terms[1:]:
        out = ndgraph.add(out, t)
    return out


def _block_forward(net, bi, f, alpha_for, ratio_for, stes_for):
    y = f
    for ci, cell in enumerate(net.blocks[bi]):
        y = supercell_forward(
            cell, y, alpha_for(bi, ci), ratio_for(bi, ci), stes_for(bi, ci) if stes_for else None
        )
    net.exec_counts[bi] += 1
    return ndgraph.add(y, f)


def tree_forward(net, lr_batch, beta_norm, alpha_norms, ratio_indices, stes=None, per_node_tail=False):
    """Supernet output: the path-weighted fusion of node feature maps.

    ``beta_norm`` weighs the feature map after each block; blocks past the
    last nonzero weight are never executed. By default the fused map feeds
    the fixed tail once; ``per_node_tail`` applies the tail per node and
    fuses the upsampled outputs instead.
    """
    b = beta_norm.data if isinstance(beta_norm, Tensor) else np.asarray(beta_norm)
    if len(b) != net.blocks_n:
        raise ValueError(f"path weights length {len(b)} != number of nodes {net.blocks_n}")
    graph_beta = isinstance(beta_norm, Tensor) and (
        beta_norm.requires_grad or beta_norm.tape is not None
    )
    nz = np.flatnonzero(b)
    if len(nz) == 0:
        raise ValueError("tree_forward: all path weights are zero")
    last = int(nz[-1])

    def alpha_for(bi, ci):
        return alpha_norms[bi][ci]

    def ratio_for(bi, ci):
        return ratio_indices[bi][ci]

    def stes_for(bi, ci):
        return stes[bi][ci] if stes else None

    f = net.stem(lr_batch)
    terms = []
    for bi in range(last + 1):
        f = _block_forward(net, bi, f, alpha_for, ratio_for, stes_for if stes else None)
        wi = float(b[bi])
        if wi == 0.0:
            continue
        node = net.tail(f) if per_node_tail else f
        if graph_beta:
            terms.append(ndgraph.scale_by_element(node, beta_norm, bi))
        elif wi == 1.0:
            terms.append(node)
        else:
            terms.append(ndgraph.scale(node, wi))
    fused = terms[0]
    for t in terms[1:]:
        fused = ndgraph.add(fused, t)
    return fused if per_node_tail else net.tail(fused)


def enumerate_paths(net):
    """All feasible paths: prefixes of the block chain, '0' per block."""
    return [[0] * (j + 1) for j in range(net.blocks_n)]


def encode_path(terminal_node):
    """Path string for a terminal node index, e.g. 2 -> '[0,0,0]'."""
    return "[" + ",".join("0" for _ in range(terminal_node + 1)) + "]"
