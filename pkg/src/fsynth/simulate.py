"""Simulation designs, Monte Carlo comparisons and finite-sample bound checks.

Two designs for functional outcomes on ``L2[0, 1]``:

* autoregressive: pre-period curves are random cosine expansions, the last
  period is a kernel regression on three lags plus bounded noise;
* latent factor: outcomes are loadings times cosine factors plus bounded noise.

All randomness comes from one master seed.  Replication ``r`` draws from the
stream ``SeedSequence(seed, spawn_key=(1, r))`` so replications can run in any
order; fixed design components use ``spawn_key=(0,)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import norm as normal

from fsynth.errors import FsynthError, ValidationError
from fsynth.hilbert import BasisSystem, Grid, HilbertElement, build_basis
from fsynth.weights import (
    Panel,
    augment_weights,
    augment_weights_cov,
    center_and_expand,
    covariate_imbalance,
    cv_lambda,
    fit_scm,
    prefit,
)

DEFAULT_SEED = 20240611


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def noise_profile(grid: Grid) -> np.ndarray:
    """The four noise shapes ``1, x^(1/2), x^(1/3), x^(1/4)`` as rows."""
    x = grid.points
    return np.stack([np.ones_like(x), x ** 0.5, x ** (1 / 3), x ** 0.25])


def noise_bound(grid: Grid, C: float) -> float:
    """Almost-sure bound on the norm of the noise curve (all components at ``C``)."""
    return float(C * grid.norm(noise_profile(grid).sum(axis=0)))


def draw_noise(rng, grid: Grid, C: float, size) -> np.ndarray:
    """Noise curves with coefficients uniform on ``[-C, C]``; shape ``size + (G,)``."""
    size = tuple(np.atleast_1d(size))
    e = rng.uniform(-C, C, size=size + (4,))
    return e @ noise_profile(grid)


def covariate_shapes(grid: Grid, p: int, t_shift: int = 0, scale: float = 0.05) -> np.ndarray:
    """Coefficient curves ``eta_l`` for covariate effects, shape ``(p, G)``."""
    x = grid.points
    return np.stack([scale * np.sqrt(2) * np.cos((l + 1 + t_shift) * np.pi * x)
                     for l in range(p)]) if p else np.zeros((0, x.size))


@dataclass(frozen=True)
class ArConfig:
    N: int = 50
    T: int = 10
    T0: int = 9
    C: float = 0.05
    grid_size: int = 100
    lag_coefs: tuple = (0.6, 0.3, 0.1)
    kernel_sd: float = 0.1
    n_terms: int = 10
    decay: float = 1.2
    u_bound: float = math.sqrt(3) / 100
    n_covariates: int = 0
    covariate_scale: float = 0.05
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.T != self.T0 + 1:
            raise ValidationError("autoregressive design has one post period (T = T0 + 1)")
        if self.T0 < len(self.lag_coefs):
            raise ValidationError("T0 must cover all lags")
        if self.N < 2 or self.C < 0:
            raise ValidationError("need N >= 2 and C >= 0")


@dataclass(frozen=True)
class FactorConfig:
    N: int = 50
    T: int = 10
    T0: int = 9
    J: int = 5
    C: float = 0.02
    loading_sd: float = 0.1
    grid_size: int = 100
    n_covariates: int = 0
    covariate_scale: float = 0.05
    factors: str = "cosine"
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.T != self.T0 + 1:
            raise ValidationError("factor design has one post period (T = T0 + 1)")
        if self.N < 2 or self.C < 0 or self.J < 1:
            raise ValidationError("need N >= 2, J >= 1 and C >= 0")
        if self.factors not in ("cosine", "separable"):
            raise ValidationError(f"unknown factor family {self.factors!r}")


@dataclass(frozen=True, eq=False)
class SimInstance:
    """A simulated panel, the counterfactual truth at ``T`` and the design internals."""

    panel: Panel
    truth: HilbertElement
    internals: dict


def ar_kernels(config: ArConfig, grid: Grid) -> np.ndarray:
    """Kernels ``beta_t(x, y)`` on the grid, shape ``(T0, G, G)``; zero beyond the lags."""
    x = grid.points
    base = normal.pdf(x[None, :], loc=x[:, None], scale=config.kernel_sd)
    beta = np.zeros((config.T0, x.size, x.size))
    for lag, c in enumerate(config.lag_coefs):
        beta[config.T0 - 1 - lag] = c * base
    return beta


def kernel_norm(beta: np.ndarray, grid: Grid) -> np.ndarray:
    """Discretized double-integral norm of each kernel (last two axes)."""
    w = grid.quad_weights
    return np.sqrt(np.einsum("...ij,i,j->...", beta ** 2, w, w))


def apply_kernels(beta: np.ndarray, y_pre: np.ndarray, grid: Grid) -> np.ndarray:
    """``sum_t <beta_t(x, .), Y_t>`` for each unit; ``y_pre`` is ``(N, T0, G)``."""
    return np.einsum("txy,nty,y->nx", beta, y_pre, grid.quad_weights)


def ar_pre_period(config: ArConfig, grid: Grid) -> np.ndarray:
    """Fixed pre-period curves, shape ``(N, T0, G)``."""
    rng = _stream(config.seed, 0)
    L = config.n_terms
    x = grid.points
    g = np.empty((L, x.size))
    g[0] = 1.0
    for l in range(1, L):
        g[l] = np.sqrt(2) * np.cos(l * np.pi * x)
    scale = np.arange(1, L + 1) ** (-config.decay)
    U = rng.uniform(-config.u_bound, config.u_bound, size=(config.N, config.T0, L))
    return (U * scale) @ g


def gen_autoregressive(config: ArConfig = ArConfig(), rep: int = 0) -> SimInstance:
    """Autoregressive design; pre-period fixed by the master seed, noise by ``rep``."""
    grid = Grid.uniform(config.grid_size)
    pre = ar_pre_period(config, grid)
    beta = ar_kernels(config, grid)
    fixed = _stream(config.seed, 0, 1)
    p = config.n_covariates
    Z = fixed.normal(size=(config.N, p)) if p else None
    eta = covariate_shapes(grid, p, scale=config.covariate_scale)
    signal = apply_kernels(beta, pre, grid)
    if p:
        signal = signal + Z @ eta
    rng = _stream(config.seed, 1, rep)
    eps = draw_noise(rng, grid, config.C, config.N)
    post = signal + eps
    outcomes = np.concatenate([pre, post[:, None, :]], axis=1)
    panel = Panel(outcomes, grid, config.T0, Z)
    internals = {
        "kind": "autoregressive",
        "beta": beta,
        "sigma": noise_bound(grid, config.C),
        "signal": signal,
        "noise": eps,
        "eta": eta,
        "config": config,
    }
    return SimInstance(panel, HilbertElement(post[0], grid), internals)


def factor_curves(config: FactorConfig, grid: Grid) -> np.ndarray:
    """Factor curves ``mu_jt(x)``, shape ``(J, T, G)``.

    ``cosine``: ``mu_11 = 1`` and ``sqrt(2) cos((j + t) pi x)`` otherwise.  For
    every ``x`` these pre-period matrices have rank at most 3, so the smallest
    eigenvalue bound ``M2`` is zero when ``J > 3``.  ``separable`` uses
    ``sqrt(2) cos(j pi (t - 1/2) / T) (1 + x / 2)``, whose pre-period matrix has
    full column rank at every ``x``.
    """
    x = grid.points
    mu = np.empty((config.J, config.T, x.size))
    if config.factors == "separable":
        j = np.arange(1, config.J + 1)[:, None]
        t = np.arange(1, config.T + 1)[None, :]
        temporal = np.sqrt(2) * np.cos(j * np.pi * (t - 0.5) / config.T)
        return temporal[:, :, None] * (1.0 + 0.5 * x)[None, None, :]
    for j in range(1, config.J + 1):
        for t in range(1, config.T + 1):
            mu[j - 1, t - 1] = 1.0 if (j, t) == (1, 1) else np.sqrt(2) * np.cos((j + t) * np.pi * x)
    return mu


def gen_latent_factor(config: FactorConfig = FactorConfig(), rep: int = 0,
                      loadings: Optional[np.ndarray] = None) -> SimInstance:
    """Latent factor design; loadings and noise are redrawn for every ``rep``."""
    grid = Grid.uniform(config.grid_size)
    mu = factor_curves(config, grid)
    rng = _stream(config.seed, 1, rep)
    phi = rng.normal(0.0, config.loading_sd, size=(config.N, config.J))
    if loadings is not None:
        phi = np.asarray(loadings, dtype=float)
    eps = draw_noise(rng, grid, config.C, (config.N, config.T))
    p = config.n_covariates
    Z = rng.normal(size=(config.N, p)) if p else None
    eta = np.stack([covariate_shapes(grid, p, t, config.covariate_scale)
                    for t in range(config.T)], axis=1) if p else np.zeros((0, config.T, grid.size))
    signal = np.einsum("nj,jtx->ntx", phi, mu)
    if p:
        signal = signal + np.einsum("nl,ltx->ntx", Z, eta)
    outcomes = signal + eps
    panel = Panel(outcomes, grid, config.T0, Z)
    internals = {
        "kind": "factor",
        "mu": mu,
        "loadings": phi,
        "sigma": noise_bound(grid, config.C),
        "signal": signal,
        "noise": eps,
        "eta": eta,
        "config": config,
    }
    return SimInstance(panel, HilbertElement(outcomes[0, -1], grid), internals)


# --------------------------------------------------------------------------
# estimators


ESTIMATOR_NAMES = ("fsc", "afsc_100cv", "afsc_cv", "afsc_0.01cv", "agsc")
_AFSC_SCALES = {"afsc_100cv": 100.0, "afsc_cv": 1.0, "afsc_0.01cv": 0.01}


@dataclass
class FittedWeights:
    """Pre-period fits shared by every estimator for one panel."""

    gamma_scm: np.ndarray
    lam_cv: Optional[float]
    weights: Dict[str, np.ndarray]


def fit_pre_period(panel: Panel, basis: BasisSystem, names: Sequence[str],
                   lambda_grid=None, covariates: bool = False) -> FittedWeights:
    """FSC weights, CV-selected penalty and augmented weights for ``names``."""
    gs = np.asarray(fit_scm(panel))
    out = {"fsc": gs, "agsc": gs}
    lam_cv = None
    need = [n for n in names if n.startswith("afsc")]
    if need:
        blk = center_and_expand(panel, basis)
        if covariates:
            zc = panel.covariates - panel.covariates[1:].mean(axis=0)
        for name in need:
            if name in _AFSC_SCALES:
                if lam_cv is None:
                    lam_cv = cv_lambda(panel, basis, lambda_grid, covariates=covariates).best_lambda
                lam = _AFSC_SCALES[name] * lam_cv
            elif name.startswith("afsc:"):
                lam = float(name.split(":", 1)[1])
            else:
                raise ValidationError(f"unknown estimator {name!r}")
            if covariates:
                out[name] = augment_weights_cov(blk.r0, blk.r1, zc[1:], zc[0], gs, lam)
            else:
                out[name] = augment_weights(blk.r0, blk.r1, gs, lam)
    for name in names:
        if name not in out:
            raise ValidationError(f"unknown estimator {name!r}")
    return FittedWeights(gs, lam_cv, out)


def agsc_coefficients(panel: Panel) -> np.ndarray:
    """Least-squares coefficients of the last period on the pre-periods, over controls."""
    sw = np.sqrt(panel.grid.quad_weights)
    y = panel.outcomes[1:] * sw
    X = np.moveaxis(y[:, : panel.T0], 1, -1).reshape(-1, panel.T0)
    target = y[:, panel.T - 1].reshape(-1)
    alpha, *_ = np.linalg.lstsq(X, target, rcond=None)
    return alpha


def agsc_estimate(panel: Panel, gamma_scm) -> np.ndarray:
    """FSC estimate plus the linear-regression bias correction at period ``T``."""
    alpha = agsc_coefficients(panel)
    m = np.einsum("t,ntx->nx", alpha, panel.outcomes[:, : panel.T0])
    g = np.asarray(gamma_scm)
    return g @ panel.outcomes[1:, -1] + m[0] - g @ m[1:]


def estimate(panel: Panel, fitted: FittedWeights, name: str) -> np.ndarray:
    if name == "agsc":
        return agsc_estimate(panel, fitted.gamma_scm)
    return fitted.weights[name] @ panel.outcomes[1:, -1]


# --------------------------------------------------------------------------
# bounds


@dataclass
class BoundReport:
    """Realized error against the error bound's right-hand side at one ``delta``."""

    realized: float
    rhs: float
    terms: dict
    violated: bool
    delta: float
    skipped: bool = False
    reason: str = ""


def _realized(instance: SimInstance, weights) -> float:
    g = np.asarray(weights, dtype=float)
    est = g @ instance.panel.outcomes[1:, -1]
    return float(instance.panel.grid.norm(instance.truth.values - est))


def evaluate_bound_auto(instance: SimInstance, weights, delta: float) -> BoundReport:
    """Autoregressive-design bound (with the covariate term when covariates exist)."""
    it = instance.internals
    panel = instance.panel
    g = np.asarray(weights, dtype=float)
    beta_norm = float(np.sqrt(np.sum(kernel_norm(it["beta"], panel.grid) ** 2)))
    fit = prefit(panel, g)
    sigma = it["sigma"]
    terms = {
        "fit": beta_norm * fit,
        "noise": delta * sigma * (1.0 + np.linalg.norm(g)),
    }
    eta = it.get("eta")
    if panel.has_covariates and eta is not None and eta.size:
        eta_norm = float(np.sqrt(np.sum(panel.grid.sqnorm(eta))))
        terms["covariate"] = eta_norm * covariate_imbalance(panel, g)
    rhs = float(sum(terms.values()))
    realized = _realized(instance, g)
    return BoundReport(realized, rhs, terms, realized > rhs, float(delta))


def factor_constants(mu: np.ndarray, T0: int):
    """``(M1, M2, M1^2 J^(3/2) / (M2 sqrt(T0)))`` from factor curves ``(J, T, G)``."""
    J = mu.shape[0]
    M1 = float(np.max(np.abs(mu)))
    pre = np.moveaxis(mu[:, :T0, :], -1, 0)  # (G, J, T0)
    gram = pre @ np.swapaxes(pre, 1, 2)  # (G, J, J) = mu(x)' mu(x)
    M2 = float(np.min(np.linalg.eigvalsh(gram)[:, 0]))
    coef = M1 ** 2 * J ** 1.5 / (M2 * math.sqrt(T0)) if M2 > 0 else math.inf
    return M1, M2, coef


def evaluate_bound_factor(instance: SimInstance, weights, delta: float) -> BoundReport:
    """Latent-factor-design bound (with the covariate term when covariates exist)."""
    it = instance.internals
    panel = instance.panel
    g = np.asarray(weights, dtype=float)
    mu = it["mu"]
    J = mu.shape[0]
    M1, M2, coef = factor_constants(mu, panel.T0)
    realized = _realized(instance, g)
    if not M2 > 0:
        return BoundReport(realized, math.inf, {"M1": M1, "M2": M2}, False, float(delta),
                           skipped=True, reason="factor matrix is rank deficient at some x")
    sigma = it["sigma"]
    terms = {
        "fit": coef * prefit(panel, g),
        "weights": 2 * sigma * M1 ** 2 * J ** 1.5 / M2 * float(np.abs(g).sum()),
        "noise": delta * sigma * (1.0 + np.linalg.norm(g)),
    }
    eta = it.get("eta")
    if panel.has_covariates and eta is not None and eta.size:
        eta_norm = float(np.sqrt(np.sum(panel.grid.sqnorm(eta))))
        terms["covariate"] = (math.sqrt(2) * max(1.0, coef) * eta_norm
                              * covariate_imbalance(panel, g))
    rhs = float(sum(terms.values()))
    return BoundReport(realized, rhs, dict(terms, M1=M1, M2=M2), realized > rhs, float(delta))


# --------------------------------------------------------------------------
# Monte Carlo driver


@dataclass
class MonteCarloResult:
    """Per-replication errors for each estimator plus optional bound reports."""

    config: object
    names: List[str]
    errors: Dict[str, np.ndarray]
    failures: Dict[int, str]
    lam_cv: np.ndarray
    bounds: Dict[str, Dict[float, np.ndarray]] = field(default_factory=dict)

    def summary(self) -> List[dict]:
        rows = []
        for name in self.names:
            e = self.errors[name]
            ok = e[np.isfinite(e)]
            q = np.quantile(ok, [0.25, 0.5, 0.75]) if ok.size else [np.nan] * 3
            rows.append({
                "estimator": name,
                "reps": int(e.size),
                "failures": int(np.sum(~np.isfinite(e))),
                "q25": float(q[0]),
                "median": float(q[1]),
                "q75": float(q[2]),
                "mean": float(ok.mean()) if ok.size else float("nan"),
            })
        return rows

    def median(self, name: str) -> float:
        e = self.errors[name]
        return float(np.median(e[np.isfinite(e)]))

    def violation_rate(self, name: str, delta: float) -> float:
        v = self.bounds[name][delta]
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else float("nan")


def _generator(config):
    if isinstance(config, ArConfig):
        return gen_autoregressive, evaluate_bound_auto
    if isinstance(config, FactorConfig):
        return gen_latent_factor, evaluate_bound_factor
    raise ValidationError("config must be an ArConfig or FactorConfig")


def run_monte_carlo(config, estimators: Optional[Sequence[str]] = None, reps: int = 500,
                    basis_kind: str = "bspline_cubic", K: int = 50,
                    lambda_grid=None, bound_estimators: Sequence[str] = (),
                    deltas: Sequence[float] = (1.0, 2.0, 3.0), threads: int = 1,
                    covariates: bool = False) -> MonteCarloResult:
    """Replicate a design ``reps`` times and record each estimator's error at ``T``.

    In the autoregressive design the pre-period is fixed, so pre-period fits
    are computed once and reused.  Failed replications are recorded with NaN
    errors and a message instead of aborting the run.
    """
    if reps < 1:
        raise ValidationError("reps must be at least 1")
    names = list(estimators or ESTIMATOR_NAMES)
    bound_names = list(bound_estimators)
    gen, bound_fn = _generator(config)
    grid = Grid.uniform(config.grid_size)
    basis = build_basis(basis_kind, min(K, grid.size), grid)
    fit_names = sorted(set(names) | set(bound_names))
    shared = None
    if isinstance(config, ArConfig):
        shared = fit_pre_period(gen(config, 0).panel, basis, fit_names, lambda_grid, covariates)

    def one(rep):
        inst = gen(config, rep)
        fitted = shared or fit_pre_period(inst.panel, basis, fit_names, lambda_grid, covariates)
        errs = {}
        for name in names:
            est = estimate(inst.panel, fitted, name)
            errs[name] = float(grid.norm(inst.truth.values - est))
        bnd = {}
        for name in bound_names:
            bnd[name] = {d: bound_fn(inst, fitted.weights[name], d) for d in deltas}
        return errs, bnd, fitted.lam_cv

    def safe(rep):
        try:
            return rep, one(rep), None
        except (FsynthError, np.linalg.LinAlgError) as exc:
            return rep, None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(safe, range(reps)))
    else:
        results = [safe(r) for r in range(reps)]

    errors = {n: np.full(reps, np.nan) for n in names}
    viol = {n: {d: np.full(reps, np.nan) for d in deltas} for n in bound_names}
    lam = np.full(reps, np.nan)
    failures = {}
    for rep, res, msg in sorted(results, key=lambda r: r[0]):
        if res is None:
            failures[rep] = msg
            continue
        errs, bnd, lam_cv = res
        for n in names:
            errors[n][rep] = errs[n]
        for n in bound_names:
            for d in deltas:
                r = bnd[n][d]
                viol[n][d][rep] = np.nan if r.skipped else float(r.violated)
        if lam_cv is not None:
            lam[rep] = lam_cv
    return MonteCarloResult(config, names, errors, failures, lam, viol)


def with_noise(config, C: float):
    """Copy of a design config with a different noise bound."""
    return replace(config, C=C)
