"""Weight fitting: simplex QP, ridge augmentation, covariates, and CV for lambda."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from fsynth.errors import (
    DimensionError,
    NumericalError,
    RankDeficiencyError,
    SolverError,
    ValidationError,
)
from fsynth.hilbert import BasisSystem, Grid, HilbertElement

SIMPLEX_TOL = 1e-10
SUM_TOL = 1e-8
KKT_TOL = 1e-7


# --------------------------------------------------------------------------
# data containers


@dataclass(frozen=True, eq=False)
class Panel:
    """Embedded outcomes of ``N`` units over ``T`` periods.

    Unit 0 is the treated unit; units ``1..N-1`` are controls.  ``outcomes``
    has shape ``(N, T, G)`` where ``G`` is the grid size.
    """

    outcomes: np.ndarray
    grid: Grid
    T0: int
    covariates: Optional[np.ndarray] = None
    unit_ids: Optional[tuple] = None

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=float)
        if y.ndim == 2 and self.grid.size == 1:
            y = y[:, :, None]
        if y.ndim != 3:
            raise DimensionError("outcomes must have shape (N, T, grid size)")
        N, T, G = y.shape
        if G != self.grid.size:
            raise DimensionError(f"outcomes have {G} grid values, grid has {self.grid.size}")
        if N < 2:
            raise ValidationError("a panel needs at least one control unit (N >= 2)")
        if not 1 <= int(self.T0) < T:
            raise ValidationError(f"T0 must satisfy 1 <= T0 < T (T0={self.T0}, T={T})")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcomes must be finite")
        y.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "T0", int(self.T0))
        if self.covariates is not None:
            z = np.array(self.covariates, dtype=float)
            if z.ndim == 1:
                z = z[:, None]
            if z.shape[0] != N or z.shape[1] < 1:
                raise DimensionError(f"covariates must have shape ({N}, p) with p >= 1")
            if not np.all(np.isfinite(z)):
                raise ValidationError("covariates must be finite")
            z.setflags(write=False)
            object.__setattr__(self, "covariates", z)
        if self.unit_ids is None:
            object.__setattr__(self, "unit_ids", tuple(range(1, N + 1)))
        elif len(self.unit_ids) != N:
            raise DimensionError("unit_ids length must equal N")
        else:
            object.__setattr__(self, "unit_ids", tuple(self.unit_ids))

    @classmethod
    def from_elements(cls, elements, T0, covariates=None, unit_ids=None):
        """Build from a nested ``N x T`` list of :class:`HilbertElement`."""
        grid = elements[0][0].grid
        rows = []
        for row in elements:
            vals = []
            for e in row:
                if e.grid != grid:
                    raise DimensionError("all panel elements must share one grid")
                vals.append(e.values)
            rows.append(vals)
        return cls(np.asarray(rows), grid, T0, covariates, unit_ids)

    @property
    def N(self) -> int:
        return self.outcomes.shape[0]

    @property
    def T(self) -> int:
        return self.outcomes.shape[1]

    @property
    def has_covariates(self) -> bool:
        return self.covariates is not None

    def element(self, i: int, t: int) -> HilbertElement:
        """Outcome of unit ``i`` (0 = treated) at period ``t`` (1-based)."""
        return HilbertElement(self.outcomes[i, t - 1], self.grid)

    def as_treated(self, i: int, drop: Sequence[int] = ()) -> "Panel":
        """Reorder so that unit ``i`` is treated; units in ``drop`` are removed."""
        drop = set(drop) | {i}
        order = [i] + [j for j in range(self.N) if j not in drop]
        z = None if self.covariates is None else self.covariates[order]
        ids = tuple(self.unit_ids[j] for j in order)
        return Panel(self.outcomes[order], self.grid, self.T0, z, ids)

    def with_T0(self, T0: int) -> "Panel":
        return Panel(self.outcomes, self.grid, T0, self.covariates, self.unit_ids)

    def select_periods(self, periods: Sequence[int], T0: int) -> "Panel":
        """Sub-panel with the given 1-based periods (in order)."""
        idx = [p - 1 for p in periods]
        return Panel(self.outcomes[:, idx], self.grid, T0, self.covariates, self.unit_ids)


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Control-unit weights; ``kind`` is ``"simplex"`` or ``"sum_to_one"``."""

    weights: np.ndarray
    kind: str
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if self.kind not in ("simplex", "sum_to_one"):
            raise ValidationError(f"unknown weight kind {self.kind!r}")
        if not np.all(np.isfinite(w)):
            raise NumericalError("weights are not finite")
        if abs(w.sum() - 1.0) > SUM_TOL:
            raise NumericalError(f"weights sum to {w.sum():.12g}, not 1")
        if self.kind == "simplex" and w.size and w.min() < -SIMPLEX_TOL:
            raise NumericalError(f"simplex weight below zero ({w.min():.3g})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)


@dataclass(frozen=True, eq=False)
class CoefficientBlock:
    """Basis coefficients of control-mean-centred pre-period outcomes.

    ``r0[i - 1, s * K + k] = <phi_k, Y_{i,s+1} - Ybar_{s+1}>`` for controls ``i``
    and ``r1`` is the same vector for the treated unit.
    """

    r0: np.ndarray
    r1: np.ndarray
    basis: BasisSystem
    centered_means: np.ndarray


# --------------------------------------------------------------------------
# simplex QP


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _stack_pre(panel: Panel, T0: Optional[int] = None, periods=None):
    """Rows of sqrt-weighted, flattened pre-period outcomes: (treated, controls)."""
    if periods is None:
        periods = np.arange(panel.T0 if T0 is None else T0)
    sw = np.sqrt(panel.grid.quad_weights)
    y = panel.outcomes[:, periods, :] * sw
    flat = y.reshape(panel.N, -1)
    return flat[0], flat[1:]


@dataclass
class QPResult:
    weights: np.ndarray
    objective: float
    gap: float
    iterations: int
    polished: bool


def _fw_gap(g, x):
    return float(g @ x - g.min())


def _polish(A, a1, support):
    """Least squares on the affine hull of ``support``; A rows are the units."""
    S = np.flatnonzero(support)
    if S.size == 1:
        x = np.zeros(A.shape[0])
        x[S[0]] = 1.0
        return x
    last = A[S[-1]]
    D = (A[S[:-1]] - last).T
    u, *_ = np.linalg.lstsq(D, a1 - last, rcond=None)
    x = np.zeros(A.shape[0])
    x[S[:-1]] = u
    x[S[-1]] = 1.0 - u.sum()
    return x


def solve_simplex_ls(A: np.ndarray, a1: np.ndarray, tol: float = 1e-9,
                     max_iter: int = 50_000, polish_every: int = 50) -> QPResult:
    """Minimize ``||a1 - A' x||^2`` over the probability simplex.

    Accelerated projected gradient (FISTA with adaptive restart) from the
    uniform point, with periodic active-set polishing.  Stops when the
    gradient mapping is below ``tol`` or when a polished point satisfies the
    optimality conditions.
    """
    A = np.asarray(A, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    n = A.shape[0]
    if n == 1:
        return QPResult(np.ones(1), float(np.sum((a1 - A[0]) ** 2)), 0.0, 0, False)
    G = A @ A.T
    b = A @ a1
    c = float(a1 @ a1)
    scale = max(1.0, float(np.abs(G).max()))

    def grad(x):
        return 2.0 * (G @ x - b)

    def obj(x):
        return float(x @ G @ x - 2 * b @ x + c)

    L = 2.0 * float(np.linalg.eigvalsh(G)[-1])
    x = np.full(n, 1.0 / n)
    if L <= 0:
        return QPResult(x, obj(x), 0.0, 0, False)

    gap_tol = KKT_TOL * scale * 1e-2

    def refine(support):
        """Active-set search from ``support``; returns an optimal point or None."""
        S = support.copy()
        for _ in range(2 * n):
            if not S.any():
                return None
            cand = _polish(A, a1, S)
            neg = S & (cand < -1e-14)
            if neg.any():
                S &= ~neg
                continue
            cand = np.maximum(cand, 0.0)
            cand /= cand.sum()
            g = grad(cand)
            if _fw_gap(g, cand) <= gap_tol:
                return cand
            out = np.flatnonzero(~S)
            if out.size == 0:
                return None
            S[out[np.argmin(g[out])]] = True
        return None

    y = x.copy()
    t = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        x_new = project_simplex(y - grad(y) / L)
        if (y - x_new) @ (x_new - x) > 0:
            # gradient-based restart of the momentum sequence
            t = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
        gm = np.linalg.norm(x - project_simplex(x - grad(x) / L))
        if gm <= tol:
            break
        if it % polish_every == 0:
            cand = refine(x > 0)
            if cand is not None:
                return QPResult(cand, obj(cand), _fw_gap(grad(cand), cand), it, True)
    # final polish attempt
    polished = False
    cand = refine(x > 0)
    if cand is not None and obj(cand) <= obj(x) + 1e-13 * max(1.0, abs(c)):
        x, polished = cand, True
    gap = _fw_gap(grad(x), x)
    if gap > KKT_TOL * scale:
        raise SolverError(
            f"simplex QP did not converge in {max_iter} iterations (duality gap {gap:.3g})",
            gap=gap,
            iterations=it,
        )
    return QPResult(x, obj(x), gap, it, polished)


def scm_objective(panel: Panel, gamma) -> float:
    """``sum_{t <= T0} ||Y_1t - sum_i gamma_i Y_it||^2``."""
    gamma = np.asarray(gamma, dtype=float)
    resid = panel.outcomes[0, : panel.T0] - np.tensordot(gamma, panel.outcomes[1:, : panel.T0], 1)
    return float(np.sum(panel.grid.sqnorm(resid)))


def kkt_residual(panel: Panel, gamma, w: float = 0.0) -> float:
    """Frank-Wolfe gap of the (covariate) FSC objective at ``gamma``, scaled."""
    a1, A = _stack_pre(panel)
    if w > 0:
        zc = _centered_covariates(panel)
        a1 = np.concatenate([a1, np.sqrt(w) * zc[0]])
        A = np.hstack([A, np.sqrt(w) * zc[1:]])
    G = A @ A.T
    g = 2 * (G @ np.asarray(gamma) - A @ a1)
    return _fw_gap(g, np.asarray(gamma)) / max(1.0, float(np.abs(G).max()))


def fit_scm(panel: Panel, tol: float = 1e-9, max_iter: int = 50_000) -> WeightVector:
    """FSC weights: simplex-constrained fit of the treated pre-period path.

    Ties between minimizers are resolved by the solver path from the uniform
    start, so the output is deterministic.
    """
    a1, A = _stack_pre(panel)
    res = solve_simplex_ls(A, a1, tol=tol, max_iter=max_iter)
    return WeightVector(res.weights, "simplex",
                        {"method": "fsc", "objective": res.objective, "gap": res.gap})


def _centered_covariates(panel: Panel) -> np.ndarray:
    if panel.covariates is None:
        raise ValidationError("this operation needs covariates")
    z = panel.covariates
    return z - z[1:].mean(axis=0)


def fit_scm_cov(panel: Panel, w: float, tol: float = 1e-9,
                max_iter: int = 50_000) -> WeightVector:
    """FSC weights with an extra ``w * ||Z_1 - sum gamma_i Z_i||^2`` balance term."""
    if w < 0:
        raise ValidationError("covariate weight w must be nonnegative")
    a1, A = _stack_pre(panel)
    if w > 0:
        zc = _centered_covariates(panel)
        a1 = np.concatenate([a1, np.sqrt(w) * zc[0]])
        A = np.hstack([A, np.sqrt(w) * zc[1:]])
    elif panel.covariates is None:
        raise ValidationError("this operation needs covariates")
    res = solve_simplex_ls(A, a1, tol=tol, max_iter=max_iter)
    return WeightVector(res.weights, "simplex",
                        {"method": "fsc_cov", "w": float(w), "objective": res.objective})


# --------------------------------------------------------------------------
# ridge augmentation


def center_and_expand(panel: Panel, basis: BasisSystem, periods=None) -> CoefficientBlock:
    """Centre pre-period outcomes on the control mean and expand them in ``basis``."""
    if basis.grid != panel.grid:
        raise DimensionError("basis grid does not match panel grid")
    if periods is None:
        periods = np.arange(panel.T0)
    y = panel.outcomes[:, periods, :]
    means = y[1:].mean(axis=0)
    coefs = basis.coefficients_of(y - means)
    flat = coefs.reshape(panel.N, -1)
    return CoefficientBlock(flat[1:], flat[0], basis, means)


def _ridge_correction(r0, v, lam):
    """``r0 (r0' r0 + lam I)^{-1} v`` through the (N-1)-sized system."""
    rv = r0 @ v
    M = r0 @ r0.T
    M[np.diag_indices_from(M)] += lam
    try:
        cf = linalg.cho_factor(M, lower=True, check_finite=False)
        out = linalg.cho_solve(cf, rv, check_finite=False)
        if np.all(np.isfinite(out)):
            return out
    except linalg.LinAlgError:
        pass
    return _ridge_correction_svd(r0, v, lam)


def _ridge_correction_svd(r0, v, lam):
    U, s, Vt = np.linalg.svd(r0, full_matrices=False)
    denom = s * s + lam
    if not np.all(denom > 0):
        cond = np.inf if denom.min() <= 0 else denom.max() / denom.min()
        raise NumericalError(f"ridge system is singular (condition estimate {cond:.3g})")
    return U @ ((s / denom) * (Vt @ v))


def augment_weights(r0, r1, gamma_scm, lam) -> np.ndarray:
    """Closed-form ridge-augmented weights from a coefficient block."""
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    gamma_scm = np.asarray(gamma_scm, dtype=float)
    return gamma_scm + _ridge_correction(r0, r1 - r0.T @ gamma_scm, lam)


def fit_ridge_augmented(panel: Panel, basis: BasisSystem, lam: float,
                        gamma_scm: Optional[WeightVector] = None) -> WeightVector:
    """Ridge-augmented FSC weights (sum to one, may be negative)."""
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    if gamma_scm is None:
        gamma_scm = fit_scm(panel)
    blk = center_and_expand(panel, basis)
    g = augment_weights(blk.r0, blk.r1, np.asarray(gamma_scm), lam)
    return WeightVector(g, "sum_to_one", {"method": "afsc", "lambda": float(lam)})


def penalized_qp_oracle(coefs: CoefficientBlock, gamma_scm, lam: float) -> WeightVector:
    """Solve ``min ||r1 - r0' g||^2 + lam ||g - gamma_scm||^2`` s.t. ``sum g = 1`` by KKT."""
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    r0, r1 = coefs.r0, coefs.r1
    gs = np.asarray(gamma_scm, dtype=float)
    n = r0.shape[0]
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2 * (r0 @ r0.T + lam * np.eye(n))
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.concatenate([2 * (r0 @ r1 + lam * gs), [1.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("penalized QP KKT system is singular") from exc
    return WeightVector(sol[:n], "sum_to_one", {"method": "penalized_qp", "lambda": float(lam)})


def _full_rank_covariates(z0: np.ndarray):
    """Raise naming collinear columns if ``Z0' Z0`` is singular."""
    p = z0.shape[1]
    if z0.shape[0] <= p:
        raise RankDeficiencyError(
            f"{p} covariates need more than {p} control units after centering",
            columns=range(p),
        )
    _, R, piv = linalg.qr(z0, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(z0.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0)
    rank = int(np.sum(d > max(tol, 1e-12)))
    if rank < p:
        bad = sorted(int(c) for c in piv[rank:])
        raise RankDeficiencyError(
            f"covariate matrix is rank deficient; collinear columns {bad}", columns=bad
        )


def augment_weights_cov(r0, r1, z0, z1, gamma_scm, lam) -> np.ndarray:
    """Closed-form covariate-residualized ridge weights (covariates pre-centred)."""
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    gs = np.asarray(gamma_scm, dtype=float)
    _full_rank_covariates(z0)
    zz_inv_zt = np.linalg.solve(z0.T @ z0, z0.T)  # (Z0'Z0)^{-1} Z0'
    hat = z0 @ zz_inv_zt
    r0c = r0 - hat @ r0
    r1c = r1 - r0.T @ (z0 @ np.linalg.solve(z0.T @ z0, z1))
    g = gs + _ridge_correction(r0c, r1c - r0c.T @ gs, lam)
    g = g + z0 @ np.linalg.solve(z0.T @ z0, z1 - z0.T @ gs)
    return g


def fit_ridge_augmented_cov(panel: Panel, basis: BasisSystem, lam: float,
                            gamma_scm: Optional[WeightVector] = None) -> WeightVector:
    """Ridge-augmented weights with covariates; balances covariates exactly."""
    zc = _centered_covariates(panel)
    if gamma_scm is None:
        gamma_scm = fit_scm(panel)
    blk = center_and_expand(panel, basis)
    g = augment_weights_cov(blk.r0, blk.r1, zc[1:], zc[0], np.asarray(gamma_scm), lam)
    return WeightVector(g, "sum_to_one", {"method": "afsc_cov", "lambda": float(lam)})


def covariate_imbalance(panel: Panel, gamma) -> float:
    if panel.covariates is None:
        return float("nan")
    z = panel.covariates
    return float(np.linalg.norm(z[0] - np.asarray(gamma) @ z[1:]))


# --------------------------------------------------------------------------
# cross-validation and diagnostics


def default_lambda_grid(panel: Panel, basis: BasisSystem, n: int = 20) -> np.ndarray:
    """Log-spaced grid over ``[1e-4, 1e4] * d_max^2`` of the coefficient matrix."""
    blk = center_and_expand(panel, basis)
    s = np.linalg.svd(blk.r0, compute_uv=False)
    dmax2 = float(s[0] ** 2) if s.size and s[0] > 0 else 1.0
    return dmax2 * np.logspace(-4, 4, n)


@dataclass
class CVResult:
    best_lambda: float
    lambdas: np.ndarray
    curve: np.ndarray
    fold_errors: np.ndarray  # (n_lambda, T0)


def cv_lambda(panel: Panel, basis: BasisSystem, lambda_grid=None,
              covariates: bool = False) -> CVResult:
    """Leave-one-pre-period-out CV for the ridge penalty.

    For every held-out period the FSC weights are refitted on the remaining
    ``T0 - 1`` periods, then augmented for each lambda; the score is the
    squared norm of the held-out treated residual.  Ties go to the larger
    lambda.
    """
    T0 = panel.T0
    if T0 < 2:
        raise ValidationError("cross-validation needs T0 >= 2")
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(panel, basis)
    lams = np.asarray(lambda_grid, dtype=float).ravel()
    if lams.size == 0:
        raise ValidationError("lambda grid is empty")
    if np.any(lams <= 0):
        raise ValidationError("lambda grid values must be positive")
    errs = np.empty((lams.size, T0))
    w = panel.grid.quad_weights
    zc = _centered_covariates(panel) if covariates else None
    for t in range(T0):
        keep = np.array([s for s in range(T0) if s != t])
        a1, A = _stack_pre(panel, periods=keep)
        try:
            gs = solve_simplex_ls(A, a1).weights
        except SolverError as exc:
            raise SolverError(f"CV fold t={t + 1}: {exc}", gap=exc.gap,
                              iterations=exc.iterations) from exc
        blk = center_and_expand(panel, basis, periods=keep)
        U, s, Vt = np.linalg.svd(blk.r0, full_matrices=False)
        if covariates:
            z0, z1 = zc[1:], zc[0]
            _full_rank_covariates(z0)
            zsol = np.linalg.solve(z0.T @ z0, np.column_stack([z0.T, z1]))
            r0c = blk.r0 - z0 @ (zsol[:, :-1] @ blk.r0)
            r1c = blk.r1 - blk.r0.T @ (z0 @ zsol[:, -1])
            U, s, Vt = np.linalg.svd(r0c, full_matrices=False)
            resid_v = Vt @ (r1c - r0c.T @ gs)
            base = gs + z0 @ np.linalg.solve(z0.T @ z0, z1 - z0.T @ gs)
        else:
            resid_v = Vt @ (blk.r1 - blk.r0.T @ gs)
            base = gs
        y_held = panel.outcomes[:, t, :]
        for j, lam in enumerate(lams):
            g = base + U @ ((s / (s * s + lam)) * resid_v)
            diff = y_held[0] - g @ y_held[1:]
            errs[j, t] = float(diff * diff @ w)
    curve = errs.sum(axis=1)
    best = curve.min()
    cand = np.flatnonzero(curve <= best)
    best_lam = float(lams[cand].max())
    return CVResult(best_lam, lams, curve, errs)


@dataclass
class Diagnostics:
    prefit: float
    l1_norm: float
    l2_norm: float
    covariate_imbalance: float
    singular_values: np.ndarray

    def as_dict(self):
        return {
            "prefit": self.prefit,
            "l1_norm": self.l1_norm,
            "l2_norm": self.l2_norm,
            "covariate_imbalance": self.covariate_imbalance,
            "singular_values": [float(v) for v in self.singular_values],
        }


def prefit(panel: Panel, gamma) -> float:
    """Root of the summed squared pre-period discrepancies."""
    return float(np.sqrt(max(scm_objective(panel, gamma), 0.0)))


def diagnostics(panel: Panel, weights, basis: BasisSystem, K: Optional[int] = None) -> Diagnostics:
    """Fit and weight-size summaries plus the singular values of ``r0``."""
    g = np.asarray(weights, dtype=float)
    if g.size != panel.N - 1:
        raise DimensionError(f"expected {panel.N - 1} weights, got {g.size}")
    if K is not None and K != basis.K:
        raise ValidationError(f"K={K} does not match basis with K={basis.K}")
    blk = center_and_expand(panel, basis)
    sv = np.linalg.svd(blk.r0, compute_uv=False)
    return Diagnostics(
        prefit=prefit(panel, g),
        l1_norm=float(np.abs(g).sum()),
        l2_norm=float(np.linalg.norm(g)),
        covariate_imbalance=covariate_imbalance(panel, g),
        singular_values=sv,
    )
