"""Counterfactual estimation and effect summaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from fsynth.errors import DimensionError, ValidationError
from fsynth.hilbert import BasisSystem, HilbertElement, build_basis
from fsynth.spaces import L2Adapter, SpaceAdapter, geodesic
from fsynth.weights import (
    Panel,
    WeightVector,
    cv_lambda,
    fit_ridge_augmented,
    fit_ridge_augmented_cov,
    fit_scm,
    fit_scm_cov,
)

ESTIMATORS = ("fsc", "afsc")


@dataclass(frozen=True)
class FitConfig:
    """Everything needed to refit weights the same way on another panel.

    ``lam`` fixes the ridge penalty; when it is ``None`` the penalty is chosen
    by leave-one-period-out CV over ``lambda_grid`` (default grid if ``None``),
    then multiplied by ``lambda_scale``.
    """

    estimator: str = "fsc"
    lam: Optional[float] = None
    lambda_grid: Optional[tuple] = None
    lambda_scale: float = 1.0
    basis: str = "bspline_cubic"
    K: Optional[int] = None
    use_covariates: bool = False
    covariate_weight: float = 0.0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValidationError(f"estimator must be one of {ESTIMATORS}")
        if self.lam is not None and not self.lam > 0:
            raise ValidationError("lambda must be positive")
        if self.K is not None and self.K < 1:
            raise ValidationError("K must be at least 1")
        if self.lambda_grid is not None:
            object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))


def default_K(kind: str, grid_size: int) -> int:
    if kind == "standard":
        return grid_size
    if kind == "bspline_cubic":
        # K near the grid size makes the spline design rank deficient
        return max(4, min(50, (grid_size + 1) // 2))
    return min(50, grid_size)


def basis_for(panel: Panel, config: FitConfig) -> BasisSystem:
    if config.K is None and config.basis == "bspline_cubic" and panel.grid.size < 4:
        # too few points for a cubic spline; the coordinate basis spans the same space
        return build_basis("standard", panel.grid.size, panel.grid)
    K = config.K if config.K is not None else default_K(config.basis, panel.grid.size)
    return build_basis(config.basis, K, panel.grid)


@dataclass
class FitResult:
    weights: WeightVector
    gamma_scm: WeightVector
    lam: Optional[float] = None
    cv: object = None
    basis: Optional[BasisSystem] = None


def fit_weights(panel: Panel, config: FitConfig, basis: Optional[BasisSystem] = None,
                lam: Optional[float] = None) -> FitResult:
    """Fit FSC or augmented weights according to ``config``.

    ``lam`` overrides the configured penalty policy (used when a placebo
    refit should reuse an already selected penalty).
    """
    cov = config.use_covariates
    if cov and not panel.has_covariates:
        raise ValidationError("configuration asks for covariates but the panel has none")
    if cov and config.covariate_weight > 0:
        gs = fit_scm_cov(panel, config.covariate_weight)
    else:
        gs = fit_scm(panel)
    if config.estimator == "fsc":
        return FitResult(gs, gs)
    if basis is None:
        basis = basis_for(panel, config)
    cv = None
    if lam is None:
        lam = config.lam
    if lam is None:
        cv = cv_lambda(panel, basis, config.lambda_grid, covariates=cov)
        lam = cv.best_lambda * config.lambda_scale
    if cov:
        w = fit_ridge_augmented_cov(panel, basis, lam, gs)
    else:
        w = fit_ridge_augmented(panel, basis, lam, gs)
    return FitResult(w, gs, float(lam), cv, basis)


@dataclass(frozen=True, eq=False)
class CounterfactualEstimate:
    """Synthetic outcome for one post-treatment period."""

    t: int
    raw: HilbertElement
    projected: HilbertElement
    object: object
    weights_used: WeightVector


def _adapter_for(panel: Panel, adapter: Optional[SpaceAdapter]) -> SpaceAdapter:
    if adapter is None:
        return L2Adapter(panel.grid)
    if adapter.grid != panel.grid:
        raise DimensionError("adapter grid does not match panel grid")
    return adapter


def predict(panel: Panel, weights, adapter: Optional[SpaceAdapter] = None,
            t: Optional[int] = None) -> CounterfactualEstimate:
    """Weighted combination of control outcomes at period ``t``, projected and inverted."""
    if t is None:
        raise ValidationError("period t is required")
    if not panel.T0 < t <= panel.T:
        raise ValidationError(
            f"period {t} is not post-treatment (T0={panel.T0}, T={panel.T})"
        )
    adapter = _adapter_for(panel, adapter)
    if not isinstance(weights, WeightVector):
        weights = WeightVector(np.asarray(weights, dtype=float), "sum_to_one")
    g = weights.weights
    if g.size != panel.N - 1:
        raise DimensionError(f"expected {panel.N - 1} weights, got {g.size}")
    raw = g @ panel.outcomes[1:, t - 1]
    proj = adapter.project_values(raw)
    obj = adapter.inverse_values(proj)
    return CounterfactualEstimate(
        t, HilbertElement(raw, panel.grid), HilbertElement(proj, panel.grid), obj, weights
    )


def predict_all(panel: Panel, weights, adapter: Optional[SpaceAdapter] = None
                ) -> List[CounterfactualEstimate]:
    return [predict(panel, weights, adapter, t) for t in range(panel.T0 + 1, panel.T + 1)]


@dataclass
class EffectSeries:
    """Per-period differences in the Hilbert space and geodesic endpoints."""

    periods: List[int]
    differences: List[HilbertElement]
    magnitudes: np.ndarray
    endpoints: List[tuple]
    adapter: SpaceAdapter = field(repr=False)

    def sample(self, t: int, s: float):
        """Point at fraction ``s`` along the effect geodesic of period ``t``."""
        a, b = self.endpoints[self.periods.index(t)]
        return geodesic(self.adapter, a, b, s)


def effects(panel: Panel, estimates: Sequence[CounterfactualEstimate],
            adapter: Optional[SpaceAdapter] = None) -> EffectSeries:
    """Effects ``Y_1t - Yhat_1t`` for every post-treatment period."""
    adapter = _adapter_for(panel, adapter)
    by_t = {e.t: e for e in estimates}
    periods = list(range(panel.T0 + 1, panel.T + 1))
    missing = [t for t in periods if t not in by_t]
    if missing:
        raise ValidationError(f"estimates missing for periods {missing}")
    diffs, mags, ends = [], [], []
    for t in periods:
        est = by_t[t]
        y = panel.outcomes[0, t - 1]
        d = y - est.projected.values
        diffs.append(HilbertElement(d, panel.grid))
        mags.append(float(panel.grid.norm(d)))
        ends.append((est.object, adapter.inverse_values(adapter.project_values(y))))
    return EffectSeries(periods, diffs, np.asarray(mags), ends, adapter)
