"""Discretized Hilbert-space arithmetic.

Functions are stored as their values on a fixed :class:`Grid`; integrals are
weighted sums with the grid's quadrature weights.  Euclidean spaces use the
index grid ``{1, ..., d}`` with unit weights so that the same code serves both
cases.

Most numerical code in the package works directly on ``numpy`` arrays whose
last axis is the grid axis (see :meth:`Grid.inner`); :class:`HilbertElement`
is the checked, user-facing wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BSpline

from fsynth.errors import DimensionError, NumericalError, ValidationError

ORTHONORMAL_TOL = 1e-10

BASIS_KINDS = ("bspline_cubic", "fourier", "standard")


@dataclass(frozen=True, eq=False)
class Grid:
    """Quadrature grid: abscissae plus nonnegative weights.

    Parameters
    ----------
    points : array_like
        Strictly increasing abscissae.
    quad_weights : array_like
        Nonnegative weights with positive sum, same length as ``points``.
    domain : tuple of float, optional
        Interval the grid discretizes.  Defaults to ``(points[0], points[-1])``.
    """

    points: np.ndarray
    quad_weights: np.ndarray
    domain: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        wts = np.array(self.quad_weights, dtype=float)
        if pts.ndim != 1 or wts.ndim != 1 or pts.size == 0:
            raise ValidationError("grid points and weights must be nonempty 1-D arrays")
        if pts.shape != wts.shape:
            raise ValidationError(
                f"grid has {pts.size} points but {wts.size} quadrature weights"
            )
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(wts))):
            raise ValidationError("grid points and weights must be finite")
        if np.any(np.diff(pts) <= 0):
            raise ValidationError("grid points must be strictly increasing (no duplicates)")
        if np.any(wts < 0) or wts.sum() <= 0:
            raise ValidationError("quadrature weights must be nonnegative with positive sum")
        pts.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "quad_weights", wts)
        if self.domain is None:
            object.__setattr__(self, "domain", (float(pts[0]), float(pts[-1])))
        else:
            lo, hi = (float(v) for v in self.domain)
            if not lo < hi and pts.size > 1:
                raise ValidationError("grid domain must satisfy lo < hi")
            object.__setattr__(self, "domain", (lo, hi))

    @classmethod
    def uniform(cls, n: int, lo: float = 0.0, hi: float = 1.0, rule: str = "midpoint") -> "Grid":
        """Uniform grid on ``[lo, hi]``.

        ``rule="midpoint"`` places ``n`` cell centres with equal weights
        ``(hi - lo) / n`` (endpoints excluded); ``rule="trapezoid"`` uses ``n``
        points including both endpoints with trapezoid weights.
        """
        if n < 1:
            raise ValidationError("grid size must be positive")
        if not hi > lo:
            raise ValidationError("grid interval must satisfy lo < hi")
        if rule == "midpoint":
            h = (hi - lo) / n
            pts = lo + h * (np.arange(n) + 0.5)
            wts = np.full(n, h)
        elif rule == "trapezoid":
            if n < 2:
                raise ValidationError("trapezoid rule needs at least two points")
            pts = np.linspace(lo, hi, n)
            h = (hi - lo) / (n - 1)
            wts = np.full(n, h)
            wts[[0, -1]] = h / 2
        else:
            raise ValidationError(f"unknown quadrature rule {rule!r}")
        return cls(pts, wts, (lo, hi))

    @classmethod
    def index(cls, d: int) -> "Grid":
        """The Euclidean grid ``{1, ..., d}`` with unit weights (counting measure)."""
        if d < 1:
            raise ValidationError("dimension must be positive")
        return cls(np.arange(1, d + 1, dtype=float), np.ones(d), (1.0, float(d)))

    @property
    def size(self) -> int:
        return self.points.size

    def __len__(self):
        return self.size

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.quad_weights, other.quad_weights)
        )

    def __hash__(self):
        return hash((self.points.tobytes(), self.quad_weights.tobytes()))

    def inner(self, f, g):
        """Weighted inner product along the last axis (broadcasts)."""
        return (np.asarray(f) * np.asarray(g)) @ self.quad_weights

    def norm(self, f):
        return np.sqrt(np.maximum(self.inner(f, f), 0.0))

    def sqnorm(self, f):
        f = np.asarray(f)
        return (f * f) @ self.quad_weights


@dataclass(frozen=True, eq=False)
class HilbertElement:
    """An element of the latent Hilbert space, stored by its grid values."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 1 or vals.size != self.grid.size:
            raise DimensionError(
                f"element has shape {vals.shape}, grid has {self.grid.size} points"
            )
        if not np.all(np.isfinite(vals)):
            raise ValidationError("element values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def _check(self, other):
        if not isinstance(other, HilbertElement):
            return NotImplemented
        _same_grid(self.grid, other.grid)
        return other

    def __add__(self, other):
        other = self._check(other)
        if other is NotImplemented:
            return other
        return HilbertElement(self.values + other.values, self.grid)

    def __sub__(self, other):
        other = self._check(other)
        if other is NotImplemented:
            return other
        return HilbertElement(self.values - other.values, self.grid)

    def __mul__(self, c):
        if not np.isscalar(c):
            return NotImplemented
        return HilbertElement(c * self.values, self.grid)

    __rmul__ = __mul__

    def __neg__(self):
        return HilbertElement(-self.values, self.grid)

    def __len__(self):
        return self.values.size


def _same_grid(a: Grid, b: Grid):
    if a != b:
        raise DimensionError("elements live on different grids")


def inner(f: HilbertElement, g: HilbertElement) -> float:
    """``<f, g> = sum_j w_j f(x_j) g(x_j)``."""
    _same_grid(f.grid, g.grid)
    return float(f.grid.inner(f.values, g.values))


def norm(f: HilbertElement) -> float:
    return float(f.grid.norm(f.values))


def lincomb(coeffs: Sequence[float], elems: Sequence[HilbertElement]) -> HilbertElement:
    """Pointwise linear combination ``sum_i coeffs[i] * elems[i]``."""
    coeffs = np.asarray(coeffs, dtype=float).ravel()
    if coeffs.size != len(elems):
        raise DimensionError(f"{coeffs.size} coefficients for {len(elems)} elements")
    if not elems:
        raise DimensionError("lincomb needs at least one element")
    grid = elems[0].grid
    for e in elems[1:]:
        _same_grid(grid, e.grid)
    stacked = np.stack([e.values for e in elems])
    return HilbertElement(coeffs @ stacked, grid)


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """``K`` orthonormal functions on a grid (rows of ``basis_matrix``)."""

    kind: str
    K: int
    basis_matrix: np.ndarray
    grid: Grid
    _weighted: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mat = np.array(self.basis_matrix, dtype=float)
        if mat.shape != (self.K, self.grid.size):
            raise DimensionError(
                f"basis matrix has shape {mat.shape}, expected ({self.K}, {self.grid.size})"
            )
        mat.setflags(write=False)
        object.__setattr__(self, "basis_matrix", mat)
        weighted = mat * self.grid.quad_weights
        weighted.setflags(write=False)
        object.__setattr__(self, "_weighted", weighted)

    def gram(self) -> np.ndarray:
        return self._weighted @ self.basis_matrix.T

    def coefficients_of(self, values) -> np.ndarray:
        """Coefficients ``<phi_k, f>`` for arrays whose last axis is the grid."""
        return np.asarray(values) @ self._weighted.T

    def reconstruct(self, coefs) -> np.ndarray:
        return np.asarray(coefs) @ self.basis_matrix


def _orthonormalize(raw: np.ndarray, grid: Grid) -> np.ndarray:
    """Weighted QR of the columns of ``raw`` (grid x K); returns rows of orthonormal functions."""
    w = grid.quad_weights
    sw = np.sqrt(w)
    q, r = np.linalg.qr(sw[:, None] * raw)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q = q * signs
    r = r * signs[:, None]
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise NumericalError(
            f"cannot orthonormalize {raw.shape[1]} functions on {grid.size} points: "
            "raw basis is rank deficient on this grid"
        )
    if np.all(w > 0):
        return (q / sw[:, None]).T
    from scipy.linalg import solve_triangular

    return solve_triangular(r, raw.T, trans="T", lower=False)


def _cubic_bspline_design(K: int, grid: Grid) -> np.ndarray:
    if K < 4:
        raise ValidationError("cubic B-spline basis needs K >= 4")
    lo, hi = grid.domain
    interior = np.linspace(lo, hi, K - 2)[1:-1]
    knots = np.concatenate([[lo] * 4, interior, [hi] * 4])
    x = np.clip(grid.points, lo, hi)
    return BSpline.design_matrix(x, knots, 3).toarray()


def build_basis(kind: str, K: int, grid: Grid) -> BasisSystem:
    """Build ``K`` orthonormal basis functions on ``grid``.

    ``standard`` gives the coordinate vectors (scaled by ``1/sqrt(w_k)``), with
    zero rows for ``k > d``.  ``fourier`` is the cosine system
    ``1, sqrt(2) cos(k pi u)`` on the grid's domain.  ``bspline_cubic`` is the
    uniform-knot cubic B-spline system orthonormalized by weighted QR.
    """
    if kind == "bspline":
        kind = "bspline_cubic"
    if kind not in BASIS_KINDS:
        raise ValidationError(f"unknown basis kind {kind!r}; choose from {BASIS_KINDS}")
    K = int(K)
    if K < 1:
        raise ValidationError("K must be at least 1")
    n = grid.size
    if kind == "standard":
        mat = np.zeros((K, n))
        m = min(K, n)
        w = grid.quad_weights[:m]
        if np.any(w <= 0):
            raise NumericalError("standard basis needs positive weights")
        mat[np.arange(m), np.arange(m)] = 1.0 / np.sqrt(w)
        return BasisSystem(kind, K, mat, grid)
    if K > n:
        raise NumericalError(
            f"cannot build {K} orthonormal functions on a {n}-point grid"
        )
    if kind == "fourier":
        lo, hi = grid.domain
        u = (grid.points - lo) / (hi - lo)
        raw = np.empty((n, K))
        raw[:, 0] = 1.0
        for k in range(1, K):
            raw[:, k] = np.sqrt(2.0) * np.cos(k * np.pi * u)
        raw /= np.sqrt(hi - lo)
    else:
        raw = _cubic_bspline_design(K, grid)
    return BasisSystem(kind, K, _orthonormalize(raw, grid), grid)


def coefficients(f: HilbertElement, basis: BasisSystem) -> np.ndarray:
    """``r_k = <phi_k, f>`` for ``k = 1..K``."""
    _same_grid(f.grid, basis.grid)
    return basis.coefficients_of(f.values)
