"""Simplex normalization operators and their gradients.

Four ways to turn raw logits into combination weights:

* ``softmax_norm`` - the dense baseline.
* ``sparsemax`` - exact Euclidean projection onto the probability simplex
  (sort-and-threshold), which produces exact zeros.
* ``sparsestmax`` - projection onto the simplex minus an open ball of radius
  ``r`` around the simplex center. As ``r`` grows to the circumradius
  ``r_c = sqrt((K-1)/K)`` the output is driven all the way to one-hot, so a
  schedule on ``r`` anneals a relaxed mixture into a discrete choice.
* ``gumbel_softmax_sample`` - reparameterized categorical sampling for the
  width choice, where a weighted mixture of sub-kernels would be too costly.

The sparsestmax solver is validated against a brute-force grid minimizer in
the test suite; the grid, not the derivation, is the correctness authority.
"""

from __future__ import annotations

import math

import numpy as np

from . import ndgraph
from .ndgraph import Tensor

__all__ = [
    "circumradius",
    "softmax_norm",
    "sparsemax",
    "sparsestmax",
    "sparsestmax_grad",
    "ordering_penalty",
    "gumbel_softmax_sample",
    "RadiusSchedule",
    "normalize_op",
    "gumbel_softmax_op",
]

_TIE_EPS = 1e-15


def circumradius(k):
    """Distance from the simplex center to a vertex, sqrt((K-1)/K)."""
    return math.sqrt((k - 1) / k)


def softmax_norm(v):
    """Max-subtracted softmax; strictly positive, sums to 1."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def sparsemax(v):
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort descending, find the largest support size rho with
    s_rho > (sum_{j<=rho} s_j - 1)/rho, threshold at tau and clip.
    """
    v = np.asarray(v, dtype=np.float64)
    s = np.sort(v)[::-1]
    css = np.cumsum(s) - 1.0
    rho_idx = np.arange(1, len(v) + 1)
    support = s > css / rho_idx
    rho = int(np.count_nonzero(support))
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def _validate_radius(k, r):
    rc = circumradius(k)
    if r < 0.0 or r > rc + 1e-12:
        raise ValueError(f"radius {r} outside [0, r_c={rc}] for K={k}")
    return min(r, rc)


def _solve_sparsestmax(v, r):
    """Shared solver; returns (q, support_mask, active_flag).

    Procedure: project with sparsemax; if already outside the exclusion ball
    return it. Otherwise expand radially from the (current face's) center to
    the consistent radius, drop coordinates that went negative, and repeat on
    the reduced face. After an expansion every coordinate outside the
    sparsemax support is negative, so the final support is always a subset
    of the sparsemax support; on that support the output equals
    ``u_S + r_S * c / ||c||`` with ``c`` the centered restriction of ``v``,
    which is what the gradient path differentiates.
    """
    v = np.asarray(v, dtype=np.float64)
    k = len(v)
    r = _validate_radius(k, r)
    rc = circumradius(k)
    if r >= rc - 1e-12 and k > 1:
        # at the circumradius the feasible set is exactly the vertex set, so
        # the minimizer is the one-hot at argmax (lowest index on ties)
        q = np.zeros(k)
        q[int(np.argmax(v))] = 1.0
        return q, q > 0.0, True
    p = sparsemax(v)
    u = np.full(k, 1.0 / k)
    if np.linalg.norm(p - u) >= r - 1e-15:
        return p, p > 0.0, False
    support = np.ones(k, dtype=bool)
    q = p
    while True:
        m = int(support.sum())
        u_face = 1.0 / m
        # points of the face at distance r from the full center lie at
        # distance r_face from the face center
        r_face_sq = r * r - (1.0 / m - 1.0 / k)
        r_face = math.sqrt(max(r_face_sq, 0.0))
        d = np.where(support, q - u_face, 0.0)
        nd = np.linalg.norm(d)
        if nd < _TIE_EPS:
            # fully tied: deterministic escape toward the lowest live index
            d = np.where(support, -u_face, 0.0)
            d[np.argmax(support)] += 1.0
            nd = np.linalg.norm(d)
        q = np.where(support, u_face + r_face * d / nd, 0.0)
        neg = q < 0.0
        if not neg.any():
            return q, support, True
        support &= ~neg
        if support.sum() == 1:
            q = support.astype(np.float64)
            return q, support, True
        # re-project the clipped point onto the reduced face
        clipped = np.where(support, q, 0.0)
        shift = (clipped[support].sum() - 1.0) / support.sum()
        q = np.where(support, clipped - shift, 0.0)


def sparsestmax(v, r):
    """Projection onto the simplex intersected with ``||q - u|| >= r``."""
    q, _, _ = _solve_sparsestmax(v, r)
    return np.maximum(q, 0.0)


def sparsestmax_grad(v, r, upstream):
    """Vector-Jacobian product of ``sparsestmax`` at ``v``.

    Valid away from support-change boundaries. With the ball constraint
    inactive this is the sparsemax Jacobian (centering on the support); when
    active it differentiates the fixed-support radial form
    ``q = u_S + r_S * c(v_S)/||c(v_S)||``.
    """
    v = np.asarray(v, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    q, support, active = _solve_sparsestmax(v, r)
    m = int(support.sum())
    g = np.where(support, upstream, 0.0)
    if not active:
        # J = I_S - (1/|S|) 1 1^T on the support
        mean = g[support].sum() / m
        return np.where(support, g - mean, 0.0)
    if m == 1:
        return np.zeros_like(v)
    c = np.where(support, v - v[support].mean(), 0.0)
    nc = np.linalg.norm(c)
    if nc < _TIE_EPS:
        return np.zeros_like(v)  # tie point; subgradient 0 by convention
    k = len(v)
    r_face = math.sqrt(max(r * r - (1.0 / m - 1.0 / k), 0.0))
    chat = c / nc
    # J^T g = (r_S/||c||) * C (g - chat (chat.g)) on the support
    t = g - chat * float(chat @ g)
    t = np.where(support, t - t[support].sum() / m, 0.0)
    return (r_face / nc) * t


def ordering_penalty(beta_path, lam, hinge=False):
    """Depth-ordering regularizer on a path's raw logits.

    Default: lam * sum_j (b_j - b_{j-1}), which telescopes to
    lam * (b_last - b_first) and rewards front-loaded weight. The hinge
    variant lam * sum_j max(0, b_j - b_{j-1}) penalizes only increases.
    Returns (value, gradient).
    """
    b = np.asarray(beta_path, dtype=np.float64)
    lam = float(lam)
    grad = np.zeros_like(b)
    if len(b) < 2 or lam == 0.0:
        return 0.0, grad
    if hinge:
        diffs = b[1:] - b[:-1]
        up = diffs > 0.0
        value = lam * float(diffs[up].sum())
        grad[1:] += lam * up
        grad[:-1] -= lam * up
        return value, grad
    value = lam * float(b[-1] - b[0])
    grad[0] = -lam
    grad[-1] = lam
    return value, grad


def gumbel_softmax_sample(logits, temperature, rng):
    """Sample a relaxed categorical: (soft probabilities, hard argmax index).

    soft = softmax((logits + g)/temperature) with g standard Gumbel noise
    from ``rng``. Gradients flow through the soft path; the hard index is
    meant for straight-through use.
    """
    if temperature <= 0.0:
        raise ValueError(f"gumbel temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("gumbel logits must be finite")
    u = rng.random(len(logits))
    g = -np.log(-np.log(u + 1e-20) + 1e-20)
    soft = softmax_norm((logits + g) / temperature)
    return soft, int(np.argmax(soft))


class RadiusSchedule:
    """Linearly grow the exclusion radius from 0 to the circumradius."""

    def __init__(self, k, total_steps):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.r_max = circumradius(k)
        self.total_steps = int(total_steps)

    def value(self, step):
        if step < 0:
            raise ValueError("step must be >= 0")
        return self.r_max * min(1.0, step / self.total_steps)


# ---------------------------------------------------------------------------
# graph-op wrappers


def normalize_op(logits, r, kind="sparsestmax"):
    """Normalization as an autodiff node over a logits Tensor."""
    if kind == "sparsestmax":
        q = sparsestmax(logits.data, r)

        def bw(g):
            logits.accumulate_grad(sparsestmax_grad(logits.data, r, g))

        return ndgraph.from_op(q, (logits,), bw)
    if kind == "softmax":
        q = softmax_norm(logits.data)

        def bw(g):
            logits.accumulate_grad(q * (g - float(q @ g)))

        return ndgraph.from_op(q, (logits,), bw)
    raise ValueError(f"unknown normalization kind {kind!r}")


def gumbel_softmax_op(logits, temperature, noise):
    """Relaxed categorical with fixed noise as an autodiff node.

    ``noise`` is the pre-drawn Gumbel vector so the same draw can be replayed
    on a second tape within one optimization step.
    """
    soft = softmax_norm((logits.data + noise) / temperature)
    hard = int(np.argmax(soft))

    def bw(g):
        logits.accumulate_grad(soft * (g - float(soft @ g)) / temperature)

    return ndgraph.from_op(soft, (logits,), bw), hard
