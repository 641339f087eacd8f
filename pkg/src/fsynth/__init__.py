"""Synthetic control for outcomes in metric spaces embedded in a Hilbert space."""

from fsynth.errors import (
    ConvergenceError,
    DimensionError,
    DomainError,
    FsynthError,
    InfeasibleLevelError,
    NumericalError,
    RankDeficiencyError,
    SolverError,
    ValidationError,
)
from fsynth.hilbert import BasisSystem, Grid, HilbertElement, build_basis, coefficients, inner, norm
from fsynth.spaces import (
    CompositionAdapter,
    L2Adapter,
    LaplacianAdapter,
    SpdAdapter,
    WassersteinAdapter,
    distance,
    embed,
    geodesic,
    inverse,
    make_adapter,
    project,
)
from fsynth.weights import (
    Panel,
    WeightVector,
    center_and_expand,
    cv_lambda,
    diagnostics,
    fit_ridge_augmented,
    fit_ridge_augmented_cov,
    fit_scm,
    fit_scm_cov,
    penalized_qp_oracle,
    prefit,
)
from fsynth.estimator import FitConfig, effects, fit_weights, predict, predict_all
from fsynth.inference import conformal_band, conformal_pvalue, placebo_test

__version__ = "0.1.0"
