"""Independent reference computations used as test oracles."""

import itertools

import numpy as np

from fsynth.hilbert import Grid
from fsynth.weights import Panel


def simplex_grid(n, step=1e-3):
    """All points of the probability simplex in R^n on a lattice of spacing ``step``."""
    m = int(round(1 / step))
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        a = np.arange(m + 1) / m
        return np.column_stack([a, 1 - a])
    if n == 3:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        i, j = i[keep], j[keep]
        return np.column_stack([i, j, m - i - j]) / m
    raise ValueError("grid search is only practical for n <= 3")


def pre_objective_matrix(panel):
    """(treated vector, control matrix) of quadrature-weighted pre-period values."""
    sw = np.sqrt(panel.grid.quad_weights)
    y = panel.outcomes[:, : panel.T0] * sw
    flat = y.reshape(panel.N, -1)
    return flat[0], flat[1:]


def grid_search_scm(panel, step=1e-3, extra=None):
    """Brute-force minimizer of the FSC objective over a simplex lattice.

    ``extra`` is an optional ``(z1, z0, w)`` covariate balance term.
    """
    a1, A = pre_objective_matrix(panel)
    pts = simplex_grid(A.shape[0], step)
    resid = a1[None, :] - pts @ A
    obj = np.sum(resid ** 2, axis=1)
    if extra is not None:
        z1, z0, w = extra
        obj = obj + w * np.sum((z1[None, :] - pts @ z0) ** 2, axis=1)
    return pts[np.argmin(obj)]


def support_enumeration_scm(panel):
    """Exact FSC minimizer: equality-constrained LS on every support, keep feasible ones."""
    a1, A = pre_objective_matrix(panel)
    n = A.shape[0]
    best, best_obj = None, np.inf
    for size in range(1, n + 1):
        for S in itertools.combinations(range(n), size):
            S = list(S)
            G = A[S] @ A[S].T
            kkt = np.zeros((size + 1, size + 1))
            kkt[:size, :size] = 2 * G
            kkt[:size, size] = 1
            kkt[size, :size] = 1
            rhs = np.concatenate([2 * A[S] @ a1, [1.0]])
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:size]
            if np.any(sol < -1e-12):
                continue
            x = np.zeros(n)
            x[S] = np.maximum(sol, 0)
            x /= x.sum()
            obj = float(np.sum((a1 - x @ A) ** 2))
            if obj < best_obj - 1e-15:
                best, best_obj = x, obj
    return best


def direct_prefit(panel, gamma):
    """Pre-treatment fit by explicit loops over periods and grid points."""
    total = 0.0
    for t in range(panel.T0):
        for j in range(panel.grid.size):
            synth = 0.0
            for i in range(1, panel.N):
                synth += gamma[i - 1] * panel.outcomes[i, t, j]
            total += panel.grid.quad_weights[j] * (panel.outcomes[0, t, j] - synth) ** 2
    return np.sqrt(total)


def constrained_ridge(r0, r1, gamma_scm, lam, z0=None, z1=None):
    """KKT solve of min ||r1 - r0'g||^2 + lam ||g - gamma_scm||^2, sum g = 1 [, z0'g = z1]."""
    n = r0.shape[0]
    rows = [np.ones(n)]
    vals = [1.0]
    if z0 is not None:
        rows.extend(z0.T)
        vals.extend(z1)
    C = np.vstack(rows)
    m = C.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = 2 * (r0 @ r0.T + lam * np.eye(n))
    kkt[:n, n:] = C.T
    kkt[n:, :n] = C
    rhs = np.concatenate([2 * (r0 @ r1 + lam * np.asarray(gamma_scm)), vals])
    return np.linalg.solve(kkt, rhs)[:n]


def random_panel(rng, N, T, T0, grid=None, p=0, scale=1.0):
    grid = grid or Grid.index(1)
    y = rng.normal(scale=scale, size=(N, T, grid.size))
    z = rng.normal(size=(N, p)) if p else None
    return Panel(y, grid, T0, z)
