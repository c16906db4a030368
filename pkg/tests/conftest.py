import os

# pin BLAS threads before numpy loads anywhere: tiny desk-scale tensors plus
# threaded GEMM is slower and breaks bit-reproducible summation order
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function at x (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        step = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def grad_close(g_ad, g_fd, rel=1e-4, abs_floor=1e-8):
    """Gradient-check criterion: relative error with a floor for zeros."""
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    diff = np.linalg.norm((g_ad - g_fd).ravel())
    scale = max(np.linalg.norm(g_fd.ravel()), np.linalg.norm(g_ad.ravel()))
    return diff <= abs_floor + rel * scale


def simplex_grid(k, step=1e-3):
    """Dense grid over the (k-1)-simplex, for brute-force projections."""
    if k == 2:
        t = np.arange(0.0, 1.0 + step / 2, step)
        return np.stack([t, 1.0 - t], axis=1)
    if k == 3:
        pts = []
        t = np.arange(0.0, 1.0 + step / 2, step)
        for a in t:
            b = np.arange(0.0, 1.0 - a + step / 2, step)
            pts.append(np.stack([np.full_like(b, a), b, 1.0 - a - b], axis=1))
        return np.concatenate(pts)
    raise ValueError("grid oracle supports k in {2, 3}")


def grid_project(v, r, grid):
    """Brute-force minimizer of ||q - v||^2 over the grid outside radius r."""
    k = grid.shape[1]
    u = 1.0 / k
    feasible = grid[np.linalg.norm(grid - u, axis=1) >= r - 1e-9]
    d = ((feasible - np.asarray(v)) ** 2).sum(axis=1)
    return feasible[int(np.argmin(d))]


def _local_grid(center, half_width, step, k):
    lo = np.maximum(np.asarray(center[: k - 1]) - half_width, 0.0)
    hi = np.minimum(np.asarray(center[: k - 1]) + half_width, 1.0)
    axes = [np.arange(lo[i], hi[i] + step / 2, step) for i in range(k - 1)]
    if k == 2:
        a = axes[0]
        pts = np.stack([a, 1.0 - a], axis=1)
    else:
        a, b = np.meshgrid(axes[0], axes[1], indexing="ij")
        a = a.ravel()
        b = b.ravel()
        pts = np.stack([a, b, 1.0 - a - b], axis=1)
    return pts[(pts >= -1e-12).all(axis=1)]


def grid_project_refined(v, r, grid, half_width=0.03, step=2.5e-4):
    """Two-stage brute force: global 1e-3 sweep, then local enumeration.

    Near an active spherical constraint the coarse lattice argmin can sit
    ~step^(2/3) away from the true minimizer (lattice points land at varying
    distances from the constraint boundary); refining the basin by plain
    enumeration sharpens the certificate without changing its nature.
    """
    k = grid.shape[1]
    q0 = grid_project(v, r, grid)
    local = _local_grid(q0, half_width, step, k)
    u = 1.0 / k
    feasible = local[np.linalg.norm(local - u, axis=1) >= r - 1e-9]
    if len(feasible) == 0:
        return q0
    d = ((feasible - np.asarray(v)) ** 2).sum(axis=1)
    q1 = feasible[int(np.argmin(d))]
    return q1 if ((q1 - v) ** 2).sum() <= ((q0 - v) ** 2).sum() else q0


@pytest.fixture(scope="session")
def grid2():
    return simplex_grid(2)


@pytest.fixture(scope="session")
def grid3():
    return simplex_grid(3)
