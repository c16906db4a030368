"""Three-phase optimization: pretrain, alternating search, final training.

Phase 1 trains the shared weights only, sampling the widest, narrowest and
two random width settings per batch (the four-width sandwich). Phase 2
alternates: one pass of weight updates on the first data half, one pass of
architecture updates on the second half, while the exclusion radius of the
normalizations grows linearly so mixtures anneal into discrete choices.
Phase 3 trains the derived architecture, either inheriting the supernet
weights ("from_search") or re-initialized ("from_scratch").

Supervision is pure distillation: an analytic teacher (bicubic upsampling
plus one frozen, seeded, identity-dominant convolution) replaces ground
truth everywhere.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import dataio, derive, ndgraph, projections, searchspace
from .ndgraph import Adam, Tensor
from .searchspace import EXPANSION_RATIOS, OP_KINDS, width_options

__all__ = [
    "EngineError",
    "SearchConfig",
    "TeacherModel",
    "DerivedModel",
    "content_loss",
    "efficiency_cost",
    "pretrain",
    "search",
    "train_final",
    "evaluate_content",
    "evaluate_psnr",
    "eval_forward_fn",
    "final_search_loss",
    "sub_seed",
]


class EngineError(RuntimeError):
    """Training-time failure (divergence, inconsistent state)."""


@dataclass
class SearchConfig:
    """Every knob of the three phases, fully serializable."""

    # data
    data_count: int = 128
    holdout_count: int = 32
    image_h: int = 32
    image_w: int = 32
    scale: int = 2
    # backbone
    blocks: int = 3
    cells_per_block: int = 3
    base_width: int = 16
    # phase lengths
    t1: int = 20
    t2: int = 50
    t3: int = 100
    # optimization
    lr_w: float = 2e-3
    lr_arch: float = 6e-3
    batch_size: int = 8
    patch_size: int = 16
    lambda_flops: float = 1e-2
    lambda_order: float = 0.0
    omega_cell_path: float = 1.0
    omega_width: float = 1.0
    gumbel_tau_start: float = 5.0
    gumbel_tau_end: float = 0.1
    # behavior flags
    hinge_order: bool = False
    per_node_tail: bool = False
    train_mode: str = "from_search"
    softmax_baseline: bool = False
    dtype: str = "float64"
    seed: int = 0
    # efficiency-term evaluation resolution (low-resolution input size)
    flops_h: int = 32
    flops_w: int = 32

    def validate(self):
        problems = []
        for name in ("data_count", "holdout_count", "image_h", "image_w", "scale", "blocks",
                     "cells_per_block", "base_width", "batch_size", "patch_size", "flops_h", "flops_w"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        for name in ("t1", "t2", "t3"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0.0 <= self.lambda_order <= 1.0:
            problems.append("lambda_order must lie in [0, 1]")
        if self.lambda_flops < 0.0:
            problems.append("lambda_flops must be >= 0")
        if self.gumbel_tau_start <= 0.0 or self.gumbel_tau_end <= 0.0:
            problems.append("gumbel temperatures must be > 0")
        if self.train_mode not in ("from_search", "from_scratch"):
            problems.append("train_mode must be from_search or from_scratch")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if self.image_h % self.scale or self.image_w % self.scale:
            problems.append("image extents must be divisible by scale")
        if self.base_width >= 3:
            pass
        else:
            problems.append("base_width must be >= 3 so every expansion ratio keeps a channel")
        if problems:
            raise EngineError("invalid config: " + "; ".join(problems))
        return self

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def normalization(self):
        return "softmax" if self.softmax_baseline else "sparsestmax"

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sub_seed(seed, stream):
    """Stable derived seed for a named stream of the run."""
    streams = {"data": 0, "init": 1, "teacher": 2, "run": 3, "final_init": 4, "final_run": 5}
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(streams[stream],))


class TeacherModel:
    """Frozen distillation target: bicubic x n then one seeded 3x3 conv.

    The convolution starts from a per-channel identity kernel plus small
    seeded noise, so the teacher is a mild, fixed perturbation of bicubic
    upsampling. Pure function of its input; identical across phases and runs
    with the same seed.
    """

    def __init__(self, scale, seed, noise=0.05):
        self.scale = int(scale)
        rng = np.random.default_rng(sub_seed(seed, "teacher"))
        k = rng.uniform(-noise, noise, size=(3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] += 1.0
        self.kernel = k
        self.bias = np.zeros(3)

    def __call__(self, lr_batch):
        lr_batch = np.asarray(lr_batch, dtype=np.float64)
        squeeze = lr_batch.ndim == 3
        if squeeze:
            lr_batch = lr_batch[None]
        up = dataio.bicubic_upsample(lr_batch, self.scale)
        out = ndgraph.conv2d_raw(up, self.kernel, self.bias)
        return out[0] if squeeze else out


def content_loss(student, teacher_out):
    """Mean absolute error between student output and teacher output."""
    target = teacher_out if isinstance(teacher_out, Tensor) else Tensor(
        np.asarray(teacher_out, dtype=student.data.dtype)
    )
    if student.data.shape != target.data.shape:
        raise EngineError(
            f"content_loss: student {student.data.shape} vs teacher {target.data.shape}"
        )
    return ndgraph.tmean(ndgraph.absolute(ndgraph.sub(student, target)))


# ---------------------------------------------------------------------------
# differentiable efficiency term


def efficiency_cost(net, alpha_norms, beta_norm, gamma_softs, h, w):
    """Expected model cost in GFLOPs under the architecture distribution.

    Differentiable in the path, operation and width parameters: the width
    enters through the expectation of the channel count under the soft
    sampling probabilities (operation cost is linear in width, so this is
    the exact expected cost), and one-hot inputs reproduce the discrete
    count exactly.
    """
    c = net.base_width
    widths_vec = Tensor(np.asarray(width_options(c), dtype=np.float64))
    beta_is_tensor = isinstance(beta_norm, Tensor)
    cum = None
    node_terms = []
    stem_const = float(derive.stem_flops(c, h, w))
    for bi, block in enumerate(net.blocks):
        cell_costs = []
        for ci, cell in enumerate(block):
            a_norm = alpha_norms[bi][ci]
            terms = []
            for oi, kind in enumerate(OP_KINDS):
                soft = gamma_softs[bi][ci][oi]
                if isinstance(soft, Tensor):
                    wbar = ndgraph.tsum(ndgraph.mul(soft, widths_vec))
                else:
                    wbar = Tensor(np.asarray(float(np.asarray(soft) @ widths_vec.data)))
                acoef, bcoef = derive.op_flops_coeffs(kind, c, h, w)
                cost = ndgraph.scale_shift(wbar, float(acoef), float(bcoef))
                if isinstance(a_norm, Tensor):
                    terms.append(ndgraph.scale_by_element(cost, a_norm, oi))
                else:
                    terms.append(ndgraph.scale(cost, float(np.asarray(a_norm)[oi])))
            cc = terms[0]
            for t in terms[1:]:
                cc = ndgraph.add(cc, t)
            cell_costs.append(cc)
        bc = cell_costs[0]
        for t in cell_costs[1:]:
            bc = ndgraph.add(bc, t)
        bc = ndgraph.scale_shift(bc, 1.0, float(c * h * w))  # block skip add
        cum = bc if cum is None else ndgraph.add(cum, bc)
        node_cost = ndgraph.scale_shift(cum, 1.0, stem_const)
        if beta_is_tensor:
            node_terms.append(ndgraph.scale_by_element(node_cost, beta_norm, bi))
        else:
            node_terms.append(ndgraph.scale(node_cost, float(np.asarray(beta_norm)[bi])))
    total = node_terms[0]
    for t in node_terms[1:]:
        total = ndgraph.add(total, t)
    total = ndgraph.scale_shift(total, 1.0, float(derive.tail_flops(c, net.scale, h, w)))
    return ndgraph.scale(total, 1e-9)


# ---------------------------------------------------------------------------
# batching


def _crop(pair, patch, rng):
    _, h, w = pair.lr.shape
    if h == patch and w == patch:
        return pair.lr, True
    if h < patch or w < patch:
        raise EngineError(f"patch_size {patch} exceeds low-resolution image {h}x{w}")
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    return pair.lr[:, y : y + patch, x : x + patch], False


def _batches(pairs, batch_size, rng=None):
    order = rng.permutation(len(pairs)) if rng is not None else np.arange(len(pairs))
    for s in range(0, len(pairs), batch_size):
        yield [pairs[i] for i in order[s : s + batch_size]]


def _assemble(batch, cfg, teacher, cache, rng=None):
    xs, ts = [], []
    for pair in batch:
        lr, whole = _crop(pair, cfg.patch_size, rng) if rng is not None else (pair.lr, True)
        xs.append(lr)
        if whole:
            t = cache.get(pair.id)
            if t is None:
                t = teacher(pair.lr)
                cache[pair.id] = t
        else:
            t = teacher(lr)
        ts.append(t)
    dt = cfg.np_dtype()
    return np.stack(xs).astype(dt), np.stack(ts).astype(dt)


def _set_requires_grad(tensors, flag):
    for t in tensors:
        t.requires_grad = flag


def _step_lr(base, epoch, total):
    k = sum(1 for q in (0.25, 0.5, 0.75) if epoch > round(total * q))
    return base * (0.5**k)


def _check_finite(value, phase):
    if not math.isfinite(value):
        raise EngineError(f"{phase}: loss diverged to {value}; aborting")


# ---------------------------------------------------------------------------
# evaluation helpers


def eval_forward_fn(net, cfg, r_frac=None):
    """Deterministic supernet forward at the current architecture state.

    Mixture weights use the configured normalization at the given radius
    fraction (defaults to the search endpoint, i.e. discrete choices) and
    widths take their argmax ratios. Consumes no randomness.
    """
    kind = cfg.normalization()
    if kind == "softmax":
        alpha = [[projections.softmax_norm(cell.op_logits.data) for cell in block] for block in net.blocks]
        beta = projections.softmax_norm(net.path_logits.data)
    else:
        frac = 1.0 if r_frac is None else r_frac
        r_a = frac * projections.circumradius(len(OP_KINDS))
        r_b = frac * projections.circumradius(net.blocks_n) if net.blocks_n > 1 else 0.0
        alpha = [
            [projections.sparsestmax(cell.op_logits.data, r_a) for cell in block]
            for block in net.blocks
        ]
        beta = projections.sparsestmax(net.path_logits.data, r_b)
    ratios = [
        [
            [int(np.argmax(br.width_logits.data)) for br in cell.branches]
            for cell in block
        ]
        for block in net.blocks
    ]

    def fwd(x):
        return searchspace.tree_forward(
            net, Tensor(np.asarray(x, dtype=cfg.np_dtype())), beta, alpha, ratios,
            per_node_tail=cfg.per_node_tail,
        )

    return fwd


def evaluate_content(forward_fn, pairs, cfg, teacher):
    """Mean per-image L1 against the teacher, fixed order, no randomness."""
    losses = []
    cache = {}
    for batch in _batches(pairs, cfg.batch_size):
        x, t = _assemble(batch, cfg, teacher, cache)
        out = forward_fn(x).data
        losses.extend(np.mean(np.abs(out - t), axis=(1, 2, 3)).tolist())
    return float(np.mean(losses))


def evaluate_psnr(forward_fn, pairs, cfg, teacher):
    """Mean PSNR of the student against the teacher over ``pairs``."""
    if not pairs:
        return 0.0
    vals = []
    cache = {}
    for batch in _batches(pairs, cfg.batch_size):
        x, t = _assemble(batch, cfg, teacher, cache)
        out = forward_fn(x).data
        for i in range(len(batch)):
            vals.append(dataio.psnr(out[i], t[i]))
    return float(np.mean(vals))


def _nnz_counts(net, cfg, r_frac):
    kind = cfg.normalization()
    if kind == "softmax":
        alpha_nnz = sum(
            int(np.count_nonzero(projections.softmax_norm(cell.op_logits.data) > 0))
            for block in net.blocks
            for cell in block
        )
        beta_nnz = int(np.count_nonzero(projections.softmax_norm(net.path_logits.data) > 0))
    else:
        r_a = r_frac * projections.circumradius(len(OP_KINDS))
        r_b = r_frac * projections.circumradius(net.blocks_n) if net.blocks_n > 1 else 0.0
        alpha_nnz = sum(
            int(np.count_nonzero(projections.sparsestmax(cell.op_logits.data, r_a) > 0))
            for block in net.blocks
            for cell in block
        )
        beta_nnz = int(np.count_nonzero(projections.sparsestmax(net.path_logits.data, r_b) > 0))
    return alpha_nnz, beta_nnz


# ---------------------------------------------------------------------------
# phase 1: pretrain


def _uniform_mixtures(net, cfg):
    """Frozen normalizations at radius 0 (no sparsity during pretrain)."""
    if cfg.normalization() == "softmax":
        alpha = [[projections.softmax_norm(c.op_logits.data) for c in b] for b in net.blocks]
        beta = projections.softmax_norm(net.path_logits.data)
    else:
        alpha = [[projections.sparsemax(c.op_logits.data) for c in b] for b in net.blocks]
        beta = projections.sparsemax(net.path_logits.data)
    return alpha, beta


def _ratio_grid(net, fill):
    return [[[fill] * len(cell.branches) for cell in block] for block in net.blocks]


def _random_ratio_grid(net, rng):
    n_ratios = len(EXPANSION_RATIOS)
    return [
        [[int(rng.integers(0, n_ratios)) for _ in cell.branches] for cell in block]
        for block in net.blocks
    ]


def pretrain(net, chi1, cfg, rng, teacher, *, val_pairs=(), start_epoch=0, adam=None,
             on_epoch=None):
    """Weight-only training with the four-width sandwich per batch.

    Architecture logits stay frozen at their initialization; every batch is
    learned at the widest, the narrowest and two random width samplings.
    """
    w_params = [t for _, t in net.parameters()]
    _set_requires_grad(w_params, True)
    _set_requires_grad([t for _, t in net.arch_parameters()], False)
    if adam is None:
        adam = Adam(w_params, cfg.lr_w)
    alpha_const, beta_const = _uniform_mixtures(net, cfg)
    n_ratios = len(EXPANSION_RATIOS)
    cache = {}
    for epoch in range(start_epoch + 1, cfg.t1 + 1):
        t0 = time.perf_counter()
        lr = _step_lr(cfg.lr_w, epoch, cfg.t1)
        losses = []
        for batch in _batches(chi1, cfg.batch_size, rng):
            x, t = _assemble(batch, cfg, teacher, cache, rng)
            grids = [
                _ratio_grid(net, n_ratios - 1),
                _ratio_grid(net, 0),
                _random_ratio_grid(net, rng),
                _random_ratio_grid(net, rng),
            ]
            for grid in grids:
                out = searchspace.tree_forward(
                    net, Tensor(x), beta_const, alpha_const, grid,
                    per_node_tail=cfg.per_node_tail,
                )
                loss = content_loss(out, t)
                val = float(loss.data)
                _check_finite(val, "pretrain")
                ndgraph.backward(loss)
                adam.step(lr)
                adam.zero_grad()
                losses.append(val)
        psnr_val = evaluate_psnr(eval_forward_fn(net, cfg, r_frac=0.0), val_pairs, cfg, teacher)
        nnz_a, nnz_b = _nnz_counts(net, cfg, 0.0)
        row = {
            "epoch": epoch,
            "phase": "pretrain",
            "loss_content": float(np.mean(losses)),
            "loss_efficiency": 0.0,
            "loss_order": 0.0,
            "r_value": 0.0,
            "psnr_val": psnr_val,
            "nnz_alpha": nnz_a,
            "nnz_beta": nnz_b,
            "wall_seconds": time.perf_counter() - t0,
        }
        if on_epoch is not None:
            on_epoch(epoch, row)
    return adam


# ---------------------------------------------------------------------------
# phase 2: alternating search


def _gumbel_temperature(cfg, epoch):
    if cfg.t2 <= 1:
        return cfg.gumbel_tau_end
    frac = (epoch - 1) / (cfg.t2 - 1)
    return cfg.gumbel_tau_start * (cfg.gumbel_tau_end / cfg.gumbel_tau_start) ** frac


def _draw_noises(net, rng):
    out = []
    for block in net.blocks:
        brow = []
        for cell in block:
            crow = []
            for _ in cell.branches:
                u = rng.random(len(EXPANSION_RATIOS))
                crow.append(-np.log(-np.log(u + 1e-20) + 1e-20))
            brow.append(crow)
        out.append(brow)
    return out


def _sample_hard_ratios(net, rng, tau):
    grid = []
    for block in net.blocks:
        brow = []
        for cell in block:
            crow = []
            for br in cell.branches:
                _, hard = projections.gumbel_softmax_sample(br.width_logits.data, tau, rng)
                crow.append(hard)
            brow.append(crow)
        grid.append(brow)
    return grid


def _graph_normalizations(net, cfg, r_a, r_b):
    kind = cfg.normalization()
    if kind == "softmax":
        alpha = [[projections.normalize_op(c.op_logits, 0.0, "softmax") for c in b] for b in net.blocks]
        beta = projections.normalize_op(net.path_logits, 0.0, "softmax")
    else:
        alpha = [[projections.normalize_op(c.op_logits, r_a, "sparsestmax") for c in b] for b in net.blocks]
        beta = projections.normalize_op(net.path_logits, r_b, "sparsestmax")
    return alpha, beta


def search(net, chi1, chi2, cfg, rng, teacher, *, val_pairs=(), start_epoch=0, adam_w=None,
           adam_arch=None, state=None, on_epoch=None):
    """Alternating bi-level optimization with a growing exclusion radius.

    Per epoch: one pass of weight updates over ``chi1`` (content loss only,
    widths sampled hard), then one pass of architecture updates over
    ``chi2`` (content + weighted efficiency + ordering penalty), the radius
    advancing once per architecture batch so the final epoch ends exactly at
    the circumradius. Returns (net, trajectory).
    """
    w_params = [t for _, t in net.parameters()]
    arch_params = [t for _, t in net.arch_parameters()]
    if adam_w is None:
        adam_w = Adam(w_params, cfg.lr_w)
    if adam_arch is None:
        adam_arch = Adam(arch_params, cfg.lr_arch)
    if state is None:
        state = {"r_step": 0}
    n_arch_batches = max(1, math.ceil(len(chi2) / cfg.batch_size))
    total_arch_steps = max(1, cfg.t2 * n_arch_batches)
    sched_a = projections.RadiusSchedule(len(OP_KINDS), total_arch_steps)
    sched_b = projections.RadiusSchedule(max(net.blocks_n, 2), total_arch_steps)
    use_beta_radius = net.blocks_n > 1
    trajectory = []
    cache = {}
    for epoch in range(start_epoch + 1, cfg.t2 + 1):
        t0 = time.perf_counter()
        tau = _gumbel_temperature(cfg, epoch)
        lr_we = _step_lr(cfg.lr_w, epoch, cfg.t2)

        # weight pass on chi1
        _set_requires_grad(w_params, True)
        _set_requires_grad(arch_params, False)
        r_a = sched_a.value(state["r_step"])
        r_b = sched_b.value(state["r_step"]) if use_beta_radius else 0.0
        if cfg.normalization() == "softmax":
            alpha_const = [[projections.softmax_norm(c.op_logits.data) for c in b] for b in net.blocks]
            beta_const = projections.softmax_norm(net.path_logits.data)
        else:
            alpha_const = [
                [projections.sparsestmax(c.op_logits.data, r_a) for c in b] for b in net.blocks
            ]
            beta_const = projections.sparsestmax(net.path_logits.data, r_b)
        w_losses = []
        for batch in _batches(chi1, cfg.batch_size, rng):
            x, t = _assemble(batch, cfg, teacher, cache, rng)
            grid = _sample_hard_ratios(net, rng, tau)
            out = searchspace.tree_forward(
                net, Tensor(x), beta_const, alpha_const, grid, per_node_tail=cfg.per_node_tail
            )
            loss = content_loss(out, t)
            val = float(loss.data)
            _check_finite(val, "search/w")
            ndgraph.backward(loss)
            adam_w.step(lr_we)
            adam_w.zero_grad()
            w_losses.append(val)

        # architecture pass on chi2
        _set_requires_grad(w_params, False)
        _set_requires_grad(arch_params, True)
        a_losses, h_losses, o_losses = [], [], []
        for batch in _batches(chi2, cfg.batch_size, rng):
            x, t = _assemble(batch, cfg, teacher, cache, rng)
            state["r_step"] += 1
            r_a = sched_a.value(state["r_step"])
            r_b = sched_b.value(state["r_step"]) if use_beta_radius else 0.0
            noises = _draw_noises(net, rng)

            # efficiency term on its own tape; per-group weights applied below
            alpha_h, beta_h = _graph_normalizations(net, cfg, r_a, r_b)
            softs_h = [
                [
                    [
                        projections.gumbel_softmax_op(br.width_logits, tau, noises[bi][ci][oi])[0]
                        for oi, br in enumerate(cell.branches)
                    ]
                    for ci, cell in enumerate(block)
                ]
                for bi, block in enumerate(net.blocks)
            ]
            h_cost = efficiency_cost(net, alpha_h, beta_h, softs_h, cfg.flops_h, cfg.flops_w)
            h_val = float(h_cost.data)
            ndgraph.backward(h_cost)
            h_grads = {}
            for name, tns in net.arch_parameters():
                h_grads[name] = tns.grad if tns.grad is not None else np.zeros_like(tns.data)
                tns.grad = None

            # content term
            alpha_n, beta_n = _graph_normalizations(net, cfg, r_a, r_b)
            hards = []
            stes = []
            for bi, block in enumerate(net.blocks):
                hrow, srow = [], []
                for ci, cell in enumerate(block):
                    hcell, scell = [], []
                    for oi, br in enumerate(cell.branches):
                        soft, hard = projections.gumbel_softmax_op(
                            br.width_logits, tau, noises[bi][ci][oi]
                        )
                        hcell.append(hard)
                        scell.append((soft, hard))
                    hrow.append(hcell)
                    srow.append(scell)
                hards.append(hrow)
                stes.append(srow)
            out = searchspace.tree_forward(
                net, Tensor(x), beta_n, alpha_n, hards, stes=stes,
                per_node_tail=cfg.per_node_tail,
            )
            loss = content_loss(out, t)
            val = float(loss.data)
            _check_finite(val, "search/arch")
            ndgraph.backward(loss)

            # combine: content + lambda_f * omega_group * efficiency + ordering
            for name, tns in net.arch_parameters():
                omega = cfg.omega_width if name.endswith(".width") else cfg.omega_cell_path
                g = cfg.lambda_flops * omega * h_grads[name]
                if tns.grad is None:
                    tns.grad = g.copy()
                else:
                    tns.grad = tns.grad + g
            o_val, o_grad = projections.ordering_penalty(
                net.path_logits.data, cfg.lambda_order, cfg.hinge_order
            )
            if net.path_logits.grad is None:
                net.path_logits.grad = o_grad.copy()
            else:
                net.path_logits.grad = net.path_logits.grad + o_grad
            adam_arch.step()
            adam_arch.zero_grad()
            a_losses.append(val)
            h_losses.append(h_val)
            o_losses.append(o_val)

        r_b_now = sched_b.value(state["r_step"]) if use_beta_radius else 0.0
        frac = state["r_step"] / total_arch_steps
        psnr_val = evaluate_psnr(
            eval_forward_fn(net, cfg, r_frac=min(frac, 1.0)), val_pairs, cfg, teacher
        )
        nnz_a, nnz_b = _nnz_counts(net, cfg, min(frac, 1.0))
        trajectory.append({name: t.data.copy() for name, t in net.arch_parameters()})
        row = {
            "epoch": epoch,
            "phase": "search",
            "loss_content": float(np.mean(a_losses)) if a_losses else float(np.mean(w_losses)),
            "loss_efficiency": float(np.mean(h_losses)) if h_losses else 0.0,
            "loss_order": float(np.mean(o_losses)) if o_losses else 0.0,
            "r_value": r_b_now,
            "psnr_val": psnr_val,
            "nnz_alpha": nnz_a,
            "nnz_beta": nnz_b,
            "wall_seconds": time.perf_counter() - t0,
        }
        if on_epoch is not None:
            on_epoch(epoch, row)
    _set_requires_grad(arch_params, False)
    _set_requires_grad(w_params, False)
    return net, trajectory


def final_search_loss(net, chi2, cfg, teacher):
    """Deterministic endpoint loss of the searched supernet on ``chi2``.

    Evaluated with discrete selections (endpoint radius, argmax widths); the
    derived model must reproduce this exactly when it inherits weights.
    """
    return evaluate_content(eval_forward_fn(net, cfg), chi2, cfg, teacher)


# ---------------------------------------------------------------------------
# phase 3: final training of the derived architecture


class DerivedModel:
    """The discrete architecture, runnable and trainable.

    ``from_search`` shares the supernet's weight tensors (slicing the full
    kernels exactly like the supernet did), so its forward is bit-identical
    to the supernet's one-hot forward. ``from_scratch`` materializes compact
    freshly-initialized kernels of the derived widths.
    """

    def __init__(self, arch, cfg, *, net=None, rng=None, alloc_full=False):
        self.arch = arch
        self.cfg = cfg
        self.scale = arch.scale
        dtype = cfg.np_dtype()
        if net is not None:
            self.stem_k, self.stem_b = net.stem_k, net.stem_b
            self.tail_k, self.tail_b = net.tail_k, net.tail_b
            self.ops = []
            for bi, row in enumerate(arch.cells):
                ops_row = []
                for ci, dc in enumerate(row):
                    cell = net.blocks[bi][ci]
                    br = cell.branches[OP_KINDS.index(dc.kind)]
                    ops_row.append((br, dc.width))
                self.ops.append(ops_row)
        else:
            # standalone model: fresh init (from_scratch) or full-width
            # placeholders about to be overwritten from a checkpoint
            if rng is None:
                rng = np.random.default_rng(0)
            c = arch.base_width
            bound = np.sqrt(6.0 / 27)
            self.stem_k = Tensor(
                rng.uniform(-bound, bound, (c, 3, 3, 3)).astype(dtype), requires_grad=True
            )
            self.stem_b = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
            self.ops = []
            for row in arch.cells:
                ops_row = []
                for dc in row:
                    op = searchspace.CandidateOp(
                        dc.kind, c, rng, dtype=dtype,
                        alloc_width=c if alloc_full else dc.width,
                    )
                    ops_row.append((op, dc.width))
                self.ops.append(ops_row)
            tail_c = arch.scale * arch.scale * 3
            bound = np.sqrt(6.0 / (c * 9))
            self.tail_k = Tensor(
                rng.uniform(-bound, bound, (tail_c, c, 3, 3)).astype(dtype), requires_grad=True
            )
            self.tail_b = Tensor(np.zeros(tail_c, dtype=dtype), requires_grad=True)

    def parameters(self):
        out = [("stem.k", self.stem_k), ("stem.b", self.stem_b)]
        for bi, row in enumerate(self.ops):
            for ci, (op, _) in enumerate(row):
                for wn, t in op.weights.items():
                    out.append((f"block{bi}.cell{ci}.{wn}", t))
        out.append(("tail.k", self.tail_k))
        out.append(("tail.b", self.tail_b))
        return out

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.np_dtype()))
        f = ndgraph.conv2d(x, self.stem_k, self.stem_b)
        for row in self.ops:
            y = f
            for op, width in row:
                y = op.forward(y, width)
            f = ndgraph.add(y, f)
        y = ndgraph.conv2d(f, self.tail_k, self.tail_b)
        return ndgraph.pixel_shuffle(y, self.scale)


def train_final(model, pairs, cfg, rng, teacher, *, val_pairs=(), start_epoch=0, adam=None,
                on_epoch=None):
    """Content-loss training of the derived model for ``t3`` epochs."""
    params = [t for _, t in model.parameters()]
    _set_requires_grad(params, True)
    if adam is None:
        adam = Adam(params, cfg.lr_w)
    flops_g = derive.count_flops(model.arch, cfg.flops_h, cfg.flops_w) * 1e-9
    r_end = projections.circumradius(max(cfg.blocks, 2))
    cache = {}
    for epoch in range(start_epoch + 1, cfg.t3 + 1):
        t0 = time.perf_counter()
        lr = _step_lr(cfg.lr_w, epoch, cfg.t3)
        losses = []
        for batch in _batches(pairs, cfg.batch_size, rng):
            x, t = _assemble(batch, cfg, teacher, cache, rng)
            loss = content_loss(model.forward(x), t)
            val = float(loss.data)
            _check_finite(val, "final")
            ndgraph.backward(loss)
            adam.step(lr)
            adam.zero_grad()
            losses.append(val)
        psnr_val = evaluate_psnr(model.forward, val_pairs, cfg, teacher)
        n_cells = sum(len(row) for row in model.ops)
        row = {
            "epoch": epoch,
            "phase": "final",
            "loss_content": float(np.mean(losses)),
            "loss_efficiency": flops_g,
            "loss_order": 0.0,
            "r_value": r_end,
            "psnr_val": psnr_val,
            "nnz_alpha": n_cells,
            "nnz_beta": 1,
            "wall_seconds": time.perf_counter() - t0,
        }
        if on_epoch is not None:
            on_epoch(epoch, row)
    _set_requires_grad(params, False)
    return adam
