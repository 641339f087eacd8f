"""Metric-space adapters.

Each adapter maps objects of a metric space into the discretized Hilbert space
of :mod:`fsynth.hilbert` (``embed``), maps image points back (``inverse``) and
projects arbitrary Hilbert elements onto the closed convex image
(``project``).  Metric objects are plain ``numpy`` arrays:

* functions and quantile functions: 1-D arrays on the adapter's grid,
* SPD matrices and graph Laplacians: ``(m, m)`` arrays,
* compositions: 1-D arrays of positive entries summing to one.

Adapter methods work on raw value arrays; the module-level functions
(:func:`embed`, :func:`inverse`, :func:`project`, :func:`distance`,
:func:`geodesic`) wrap them with :class:`~fsynth.hilbert.HilbertElement`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import isotonic_regression

from fsynth.errors import ConvergenceError, DimensionError, DomainError, ValidationError
from fsynth.hilbert import Grid, HilbertElement

MEMBERSHIP_TOL = 1e-10
EIG_FLOOR = 1e-12


def _values(h) -> np.ndarray:
    if isinstance(h, HilbertElement):
        return np.asarray(h.values)
    return np.asarray(h, dtype=float)


def _scale(x) -> float:
    return max(1.0, float(np.max(np.abs(x))) if np.size(x) else 1.0)


class SpaceAdapter:
    """Base class.  Subclasses set ``kind`` and ``grid``."""

    kind = "abstract"
    grid: Grid

    # native coordinates used by file formats
    def to_coords(self, obj) -> np.ndarray:
        return np.asarray(obj, dtype=float).ravel()

    def from_coords(self, coords) -> np.ndarray:
        return np.asarray(coords, dtype=float)

    @property
    def n_coords(self) -> int:
        return self.grid.size

    def check(self, obj) -> np.ndarray:
        """Validate a metric object and return it as a float array."""
        raise NotImplementedError

    def embed_values(self, obj) -> np.ndarray:
        raise NotImplementedError

    def inverse_values(self, v: np.ndarray):
        raise NotImplementedError

    def project_values(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, v, tol: float = MEMBERSHIP_TOL) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(self.grid.norm(v - self.project_values(v)) <= tol * _scale(v))

    def _check_len(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.grid.size,):
            raise DimensionError(
                f"{self.kind}: expected {self.grid.size} values, got shape {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"{self.kind}: values must be finite")
        return v

    def describe(self) -> str:
        return self.kind


@dataclass(frozen=True)
class L2Adapter(SpaceAdapter):
    """Functions in L2 (or vectors in R^d): every map is the identity."""

    grid: Grid
    kind: str = field(default="l2", init=False)

    def check(self, obj):
        return self._check_len(obj)

    def embed_values(self, obj):
        return self.check(obj).copy()

    def inverse_values(self, v):
        return self._check_len(v).copy()

    def project_values(self, v):
        return self._check_len(v).copy()


@dataclass(frozen=True)
class WassersteinAdapter(SpaceAdapter):
    """One-dimensional distributions represented by quantile functions.

    The image is the cone of nondecreasing vectors.  ``projection`` selects
    the map back onto it: ``"rearrangement"`` sorts the values,
    ``"isotonic"`` computes the exact weighted least-squares projection by
    pool-adjacent-violators.
    """

    grid: Grid
    projection: str = "rearrangement"
    kind: str = field(default="wasserstein", init=False)

    def __post_init__(self):
        if self.projection not in ("rearrangement", "isotonic"):
            raise ValidationError(f"unknown quantile projection {self.projection!r}")

    @classmethod
    def on_quantile_grid(cls, n: int = 100, projection: str = "rearrangement"):
        """Adapter on the midpoint grid of ``(0, 1)`` (endpoints excluded)."""
        return cls(Grid.uniform(n, 0.0, 1.0), projection)

    def _is_monotone(self, q):
        return bool(np.all(np.diff(q) >= -MEMBERSHIP_TOL * _scale(q)))

    def check(self, obj):
        q = self._check_len(obj)
        if not self._is_monotone(q):
            i = int(np.argmin(np.diff(q)))
            raise DomainError(
                f"quantile values must be nondecreasing (drop at position {i})"
            )
        return q

    def embed_values(self, obj):
        return self.check(obj).copy()

    def inverse_values(self, v):
        v = self._check_len(v)
        if not self._is_monotone(v):
            raise DomainError("element is not a quantile function; project it first")
        return np.maximum.accumulate(v)

    def project_values(self, v):
        v = self._check_len(v)
        if self.projection == "rearrangement":
            return np.sort(v)
        return isotonic_regression(v, weights=self.grid.quad_weights, increasing=True).x


def _sym(a):
    return 0.5 * (a + a.T)


def _eig_apply(a, fn):
    vals, vecs = np.linalg.eigh(a)
    return (vecs * fn(vals)) @ vecs.T


class _MatrixAdapter(SpaceAdapter):
    m: int

    def _grid_for(self, m):
        return Grid.index(m * m)

    def to_coords(self, obj):
        return self._check_shape(obj).ravel()

    def from_coords(self, coords):
        c = np.asarray(coords, dtype=float)
        if c.size != self.m * self.m:
            raise DimensionError(f"expected {self.m * self.m} matrix entries, got {c.size}")
        return c.reshape(self.m, self.m)

    def _check_shape(self, a):
        a = np.asarray(a, dtype=float)
        if a.shape != (self.m, self.m):
            raise DimensionError(f"expected a {self.m}x{self.m} matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValidationError("matrix entries must be finite")
        return a

    def _check_symmetric(self, a, what="matrix"):
        if np.max(np.abs(a - a.T)) > MEMBERSHIP_TOL * _scale(a):
            raise DomainError(f"{what} is not symmetric")
        return _sym(a)

    def _mat(self, v):
        return self._check_len(v).reshape(self.m, self.m)


@dataclass(frozen=True)
class SpdAdapter(_MatrixAdapter):
    """Positive semidefinite matrices under a Frobenius-type metric.

    ``metric`` is ``"frobenius"`` (embed the matrix itself), ``"power"``
    (embed ``A**p``) or ``"log_euclidean"`` (embed ``log A``; requires
    strictly positive definite input).
    """

    m: int
    metric: str = "frobenius"
    p: float = 1.0
    kind: str = field(default="spd", init=False)
    grid: Grid = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("matrix size must be positive")
        if self.metric not in ("frobenius", "power", "log_euclidean"):
            raise ValidationError(f"unknown SPD metric {self.metric!r}")
        if self.metric == "power" and not self.p > 0:
            raise ValidationError("power metric needs p > 0")
        object.__setattr__(self, "grid", self._grid_for(self.m))

    def describe(self):
        if self.metric == "power":
            return f"spd-power:{self.p:g}"
        return "spd-logeuclidean" if self.metric == "log_euclidean" else "spd-frobenius"

    def check(self, obj):
        a = self._check_symmetric(self._check_shape(obj))
        lam = np.linalg.eigvalsh(a)
        if self.metric == "log_euclidean":
            if lam.min() < EIG_FLOOR:
                raise DomainError(
                    f"log-Euclidean metric needs a positive definite matrix "
                    f"(smallest eigenvalue {lam.min():.3g})"
                )
        elif lam.min() < -MEMBERSHIP_TOL * _scale(a):
            raise DomainError(f"matrix is not positive semidefinite (eigenvalue {lam.min():.3g})")
        return a

    def embed_values(self, obj):
        a = self.check(obj)
        if self.metric == "frobenius":
            return a.ravel().copy()
        if self.metric == "power":
            return _eig_apply(a, lambda x: np.maximum(x, 0.0) ** self.p).ravel()
        return _eig_apply(a, np.log).ravel()

    def inverse_values(self, v):
        b = self._check_symmetric(self._mat(v), "element")
        if self.metric == "log_euclidean":
            return _eig_apply(b, np.exp)
        lam = np.linalg.eigvalsh(b)
        if lam.min() < -MEMBERSHIP_TOL * _scale(b):
            raise DomainError("element is not positive semidefinite; project it first")
        if self.metric == "frobenius":
            return b
        return _eig_apply(b, lambda x: np.maximum(x, 0.0) ** (1.0 / self.p))

    def project_values(self, v):
        b = _sym(self._mat(v))
        if self.metric == "log_euclidean":
            return b.ravel()
        return _eig_apply(b, lambda x: np.maximum(x, 0.0)).ravel()


def project_symmetric_zero_rowsum(b: np.ndarray) -> np.ndarray:
    """Frobenius projection onto symmetric matrices with zero row sums."""
    b = _sym(np.asarray(b, dtype=float))
    m = b.shape[0]
    s = b.sum(axis=1)
    sigma = s.sum() / (2 * m)
    mu = (s - sigma) / m
    return b - mu[:, None] - mu[None, :]


def _laplacian_design(m):
    """Linear map from upper off-diagonal entries to the flattened Laplacian."""
    iu, ju = np.triu_indices(m, 1)
    a = np.zeros((m * m, iu.size))
    cols = np.arange(iu.size)
    a[iu * m + ju, cols] = 1.0
    a[ju * m + iu, cols] = 1.0
    a[iu * m + iu, cols] = -1.0
    a[ju * m + ju, cols] = -1.0
    return a, iu, ju


@dataclass(frozen=True)
class LaplacianAdapter(_MatrixAdapter):
    """Graph Laplacians with edge weights bounded by ``W``.

    The image is ``{L symmetric, L 1 = 0, -W <= L_ij <= 0 for i != j}``.
    Projection runs Dykstra's algorithm over the affine part and the box part,
    with an active-set polish that returns the exact nearest point once the
    active bounds have been identified.
    """

    m: int
    W: float
    max_iter: int = 10_000
    tol: float = 1e-9
    kind: str = field(default="laplacian", init=False)
    grid: Grid = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("matrix size must be positive")
        if not self.W > 0:
            raise ValidationError("Laplacian weight cap W must be positive")
        object.__setattr__(self, "grid", self._grid_for(self.m))

    def describe(self):
        return f"laplacian:{self.W:g}"

    def _member(self, a, tol):
        sc = max(_scale(a), self.W)
        off = a[~np.eye(self.m, dtype=bool)]
        return (
            np.max(np.abs(a - a.T)) <= tol * sc
            and np.max(np.abs(a.sum(axis=1))) <= tol * sc * self.m
            and (off.size == 0 or (off.max() <= tol * sc and off.min() >= -self.W - tol * sc))
        )

    def check(self, obj):
        a = self._check_shape(obj)
        if not self._member(a, MEMBERSHIP_TOL):
            raise DomainError("matrix is not a graph Laplacian with edge weights in [0, W]")
        return _sym(a)

    def embed_values(self, obj):
        return self.check(obj).ravel().copy()

    def inverse_values(self, v):
        a = self._mat(v)
        if not self._member(a, 1e-8):
            raise DomainError("element is not a graph Laplacian; project it first")
        return _sym(a)

    def _box(self, x):
        off = ~np.eye(self.m, dtype=bool)
        y = x.copy()
        y[off] = np.clip(x[off], -self.W, 0.0)
        return y

    def _polish(self, x, target):
        """Exact projection given the active set guessed from ``x``; None if KKT fails."""
        a, iu, ju = _laplacian_design(self.m)
        w = x[iu, ju]
        band = 1e-7 * max(self.W, 1.0)
        at_hi = w >= -band
        at_lo = w <= -self.W + band
        free = ~(at_hi | at_lo)
        fixed = np.where(at_lo, -self.W, 0.0)
        b = target.ravel()
        w_new = fixed.copy()
        if free.any():
            rhs = b - a[:, ~free] @ fixed[~free]
            sol, *_ = np.linalg.lstsq(a[:, free], rhs, rcond=None)
            w_new[free] = sol
        if np.any(w_new[free] > 0) or np.any(w_new[free] < -self.W):
            return None
        grad = 2 * a.T @ (a @ w_new - b)
        gtol = 1e-9 * max(_scale(target), self.W)
        ok = (
            np.all(np.abs(grad[free]) <= gtol)
            and np.all(grad[at_hi & ~at_lo] <= gtol)
            and np.all(grad[at_lo & ~at_hi] >= -gtol)
        )
        if not ok:
            return None
        return (a @ w_new).reshape(self.m, self.m)

    def project_values(self, v):
        target = self._mat(v)
        if self.m == 1:
            return np.zeros(1)
        x = target.copy()
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        change = np.inf
        for it in range(1, self.max_iter + 1):
            y = project_symmetric_zero_rowsum(x + p)
            p = x + p - y
            x_new = self._box(y + q)
            q = y + q - x_new
            change = np.max(np.abs(x_new - x))
            x = x_new
            if change <= self.tol or it % 25 == 0:
                polished = self._polish(x, target)
                if polished is not None:
                    return polished.ravel()
                if change <= self.tol:
                    return project_symmetric_zero_rowsum(x).ravel()
        raise ConvergenceError(
            f"Laplacian projection did not converge in {self.max_iter} iterations",
            residual=float(change),
            iterations=self.max_iter,
        )


@dataclass(frozen=True)
class CompositionAdapter(SpaceAdapter):
    """Compositions under the Aitchison metric, embedded by the centred log-ratio."""

    d: int
    kind: str = field(default="composition", init=False)
    grid: Grid = field(init=False, repr=False)

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError("composition length must be positive")
        object.__setattr__(self, "grid", Grid.index(self.d))

    def check(self, obj):
        x = self._check_len(obj)
        if np.any(x <= 0):
            raise DomainError("composition entries must be strictly positive")
        if abs(x.sum() - 1.0) > 1e-10:
            raise DomainError(f"composition must sum to 1 (sum {x.sum():.12g})")
        return x

    def embed_values(self, obj):
        lx = np.log(self.check(obj))
        return lx - lx.mean()

    def inverse_values(self, v):
        v = self._check_len(v)
        if abs(v.sum()) > 1e-8 * _scale(v) * self.d:
            raise DomainError("element does not have zero sum; project it first")
        e = np.exp(v - v.max())
        return e / e.sum()

    def project_values(self, v):
        v = self._check_len(v)
        return v - v.mean()


def make_adapter(name: str, grid: Optional[Grid] = None, dim: Optional[int] = None,
                 **options) -> SpaceAdapter:
    """Build an adapter from a short name.

    Names: ``l2``, ``wasserstein``, ``spd-frobenius``, ``spd-power:<p>``,
    ``spd-logeuclidean``, ``laplacian:<W>``, ``composition``.  Function spaces
    need ``grid`` (Wasserstein defaults to 100 midpoints on (0, 1)); matrix
    spaces need ``dim`` = matrix size; compositions need ``dim`` = length.
    """
    key, _, arg = name.strip().lower().partition(":")

    def need_dim():
        if dim is None:
            raise ValidationError(f"space {name!r} needs a dimension")
        return int(dim)

    try:
        if key == "l2":
            if grid is None:
                grid = Grid.index(need_dim())
            return L2Adapter(grid)
        if key == "wasserstein":
            if grid is None:
                grid = Grid.uniform(dim or 100, 0.0, 1.0)
            return WassersteinAdapter(grid, **options)
        if key == "spd-frobenius":
            return SpdAdapter(need_dim(), "frobenius")
        if key == "spd-power":
            return SpdAdapter(need_dim(), "power", float(arg))
        if key in ("spd-logeuclidean", "spd-log-euclidean", "spd-log"):
            return SpdAdapter(need_dim(), "log_euclidean")
        if key == "laplacian":
            return LaplacianAdapter(need_dim(), float(arg), **options)
        if key == "composition":
            return CompositionAdapter(need_dim())
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"bad space parameter in {name!r}: {exc}") from exc
    raise ValidationError(f"unknown space {name!r}")


def embed(adapter: SpaceAdapter, obj) -> HilbertElement:
    return HilbertElement(adapter.embed_values(obj), adapter.grid)


def inverse(adapter: SpaceAdapter, h):
    return adapter.inverse_values(_values(h))


def project(adapter: SpaceAdapter, h):
    """Nearest point of the image; returns the same type it was given."""
    out = adapter.project_values(_values(h))
    if isinstance(h, HilbertElement):
        return HilbertElement(out, adapter.grid)
    return out


def distance(adapter: SpaceAdapter, a, b) -> float:
    return float(adapter.grid.norm(adapter.embed_values(a) - adapter.embed_values(b)))


def geodesic(adapter: SpaceAdapter, a, b, s: float):
    """Point at fraction ``s`` of the way from ``a`` to ``b``."""
    if not 0.0 <= s <= 1.0:
        raise ValidationError("geodesic parameter must lie in [0, 1]")
    ea, eb = adapter.embed_values(a), adapter.embed_values(b)
    if s == 0.0:
        return adapter.inverse_values(ea)
    if s == 1.0:
        return adapter.inverse_values(eb)
    return adapter.inverse_values((1.0 - s) * ea + s * eb)
