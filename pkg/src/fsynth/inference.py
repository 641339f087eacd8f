"""Conformal prediction bands and placebo permutation tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fsynth.errors import FsynthError, InfeasibleLevelError, ValidationError
from fsynth.estimator import FitConfig, fit_weights, predict
from fsynth.spaces import SpaceAdapter
from fsynth.weights import Panel


@dataclass(frozen=True, eq=False)
class PredictionBand:
    """Pointwise band ``center +/- quantile_radius`` for one period."""

    t: int
    alpha: float
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    quantile_radius: np.ndarray
    order_index: int

    def contains(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return (self.lower <= y) & (y <= self.upper)


def _weights_array(weights):
    return np.asarray(weights, dtype=float).ravel()


def order_statistic_index(T0: int, alpha: float) -> int:
    """1-based rank of the pre-period residual used as the band radius.

    The band is the set of values whose conformal p-value is at least
    ``alpha``; that set is ``|y - center| <= rho_(k)`` with
    ``k = T0 + 1 - ceil((T0 + 1) * alpha - 1)``.
    """
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    need = round((T0 + 1) * alpha - 1, 12)
    if need <= 0:
        raise InfeasibleLevelError(
            f"alpha={alpha} is too small for T0={T0}; need alpha > 1/(T0+1) = {1 / (T0 + 1):.6g}"
        )
    return T0 + 1 - int(math.ceil(need))


def residuals(panel: Panel, weights) -> np.ndarray:
    """Absolute pre-period residuals, shape ``(T0, grid size)``."""
    g = _weights_array(weights)
    pre = panel.outcomes[:, : panel.T0]
    return np.abs(pre[0] - np.tensordot(g, pre[1:], 1))


def _center(panel, weights, t):
    if not panel.T0 < t <= panel.T:
        raise ValidationError(f"period {t} is not post-treatment")
    return _weights_array(weights) @ panel.outcomes[1:, t - 1]


def conformal_band(panel: Panel, weights, t: int, alpha: float) -> PredictionBand:
    """Pointwise conformal band for the counterfactual at period ``t``.

    Weights are held fixed across the null values being tested.
    """
    k = order_statistic_index(panel.T0, alpha)
    rho = np.sort(residuals(panel, weights), axis=0)
    q = rho[k - 1]
    c = _center(panel, weights, t)
    return PredictionBand(t, float(alpha), c, c - q, c + q, q, k)


def conformal_pvalue(y0: float, x: int, panel: Panel, weights, t: int) -> float:
    """p-value of the sharp null that the counterfactual at grid index ``x`` equals ``y0``."""
    c = _center(panel, weights, t)[x]
    rho = residuals(panel, weights)[:, x]
    count = int(np.sum(abs(y0 - c) <= rho))
    return (count + 1) / (panel.T0 + 1)


@dataclass(frozen=True, eq=False)
class PlaceboResult:
    """Residual norms with unit 0 first, and the permutation p-value."""

    t: int
    residual_norms: np.ndarray
    p_value: float
    unit_ids: tuple
    lambdas: Optional[np.ndarray] = None


def placebo_pvalue(residual_norms) -> float:
    r = np.asarray(residual_norms, dtype=float)
    return float((np.sum(r[0] <= r[1:]) + 1) / r.size)


def placebo_test(panel: Panel, fit_config: FitConfig, t: int,
                 adapter: Optional[SpaceAdapter] = None,
                 reselect_lambda: bool = True,
                 include_treated_as_donor: bool = False) -> PlaceboResult:
    """Permutation test that puts each unit in turn in the treated role.

    Every placebo unit is refitted with the same configuration.  With
    ``reselect_lambda=False`` an augmented fit reuses the penalty chosen for
    the actual treated unit.  By default the treated unit is left out of the
    placebo donor pools.
    """
    if not panel.T0 < t <= panel.T:
        raise ValidationError(f"period {t} is not post-treatment")
    if panel.N < 3 and not include_treated_as_donor:
        raise ValidationError("placebo test needs at least two control units")
    norms = np.empty(panel.N)
    lams = np.full(panel.N, np.nan)
    base = fit_weights(panel, fit_config)
    fixed_lam = None if reselect_lambda else base.lam
    for i in range(panel.N):
        if i == 0:
            sub, res = panel, base
        else:
            drop = () if include_treated_as_donor else (0,)
            sub = panel.as_treated(i, drop=drop)
            try:
                res = fit_weights(sub, fit_config, lam=fixed_lam)
            except FsynthError as exc:
                raise type(exc)(f"placebo refit for unit {panel.unit_ids[i]} failed: {exc}") from exc
        est = predict(sub, res.weights, adapter, t)
        norms[i] = float(sub.grid.norm(sub.outcomes[0, t - 1] - est.projected.values))
        if res.lam is not None:
            lams[i] = res.lam
    return PlaceboResult(t, norms, placebo_pvalue(norms), panel.unit_ids,
                         None if np.all(np.isnan(lams)) else lams)
