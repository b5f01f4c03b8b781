"""Univariate bases over functional time ``t`` and longitudinal time ``T``.

Four kinds are supported: open-knot B-splines, natural cubic splines (B-splines
restricted to zero second derivative at both boundaries), orthogonal
polynomials built on an equally spaced grid, and the constant function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import qr, solve_triangular

DOMAIN_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class UnivariateBasis:
    """A finite set of functions on ``domain`` evaluated column-wise.

    Parameters
    ----------
    kind : {'bspline', 'natural_cubic', 'ortho_poly', 'constant'}
    domain : (lo, hi)
    order : int
        Spline order (degree + 1) for the spline kinds.
    knots : tuple of float
        Full knot vector including repeated boundary knots (spline kinds).
    transform : ndarray or None
        Optional ``(n_raw, n_basis)`` matrix applied to the raw B-spline columns.
    recurrence : tuple or None
        ``(alpha, norm2)`` three-term recurrence coefficients for ``ortho_poly``.
    """

    kind: str
    domain: tuple
    order: int = 4
    knots: tuple = ()
    transform: np.ndarray | None = None
    recurrence: tuple | None = None
    grid_size: int = 0
    _n_basis: int = field(default=0, repr=False)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        if not hi > lo:
            raise ValueError("basis domain must satisfy lo < hi")
        object.__setattr__(self, "domain", (lo, hi))
        if self.kind not in ("bspline", "natural_cubic", "ortho_poly", "constant"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.transform is not None:
            tr = np.array(self.transform, dtype=float)
            tr.setflags(write=False)
            object.__setattr__(self, "transform", tr)
        if self.kind in ("bspline", "natural_cubic"):
            knots = tuple(float(k) for k in self.knots)
            if any(b < a for a, b in zip(knots, knots[1:])):
                raise ValueError("knots must be non-decreasing")
            if knots[0] > lo or knots[-1] < hi:
                raise ValueError("knots must span the domain")
            object.__setattr__(self, "knots", knots)
            n_raw = len(knots) - self.order
            n = self.transform.shape[1] if self.transform is not None else n_raw
        elif self.kind == "ortho_poly":
            alpha, norm2 = self.recurrence
            object.__setattr__(self, "recurrence", (tuple(map(float, alpha)), tuple(map(float, norm2))))
            n = len(alpha) + 1
        else:
            n = 1
        if n < 1:
            raise ValueError("basis must have at least one function")
        object.__setattr__(self, "_n_basis", n)

    @property
    def n_basis(self) -> int:
        return self._n_basis

    @property
    def interior_knots(self) -> np.ndarray:
        k = np.asarray(self.knots)
        return k[self.order : len(k) - self.order]

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knots inside the domain; the basis is polynomial between them."""
        lo, hi = self.domain
        if self.kind in ("bspline", "natural_cubic"):
            inner = [k for k in np.unique(self.knots) if lo < k < hi]
            return np.array([lo, *inner, hi])
        return np.array([lo, hi])

    @property
    def piece_degree(self) -> int:
        if self.kind in ("bspline", "natural_cubic"):
            return self.order - 1
        if self.kind == "ortho_poly":
            return self.n_basis - 1
        return 0

    @cached_property
    def _splines(self):
        n_raw = len(self.knots) - self.order
        return BSpline(np.asarray(self.knots), np.eye(n_raw), self.order - 1, extrapolate=True)

    def _check_points(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.domain
        span = hi - lo
        if np.any(x < lo - DOMAIN_TOL * max(1.0, span)) or np.any(x > hi + DOMAIN_TOL * max(1.0, span)):
            raise ValueError(f"points outside the basis domain [{lo}, {hi}]")
        return np.clip(x, lo, hi)

    def __call__(self, x, deriv: int = 0) -> np.ndarray:
        """Evaluate all basis functions (or their ``deriv``-th derivative); shape ``(len(x), n_basis)``."""
        x = self._check_points(x)
        if self.kind == "constant":
            return np.full((x.size, 1), 1.0 if deriv == 0 else 0.0)
        if self.kind == "ortho_poly":
            return _ortho_poly_eval(x, *self.recurrence, deriv=deriv)
        raw = self._splines(x, nu=deriv) if deriv else self._splines(x)
        raw = np.asarray(raw).reshape(x.size, -1)
        if self.transform is not None:
            raw = raw @ self.transform
        return raw

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "domain": list(self.domain)}
        if self.kind in ("bspline", "natural_cubic"):
            out.update(order=self.order, knots=list(self.knots), n_basis=self.n_basis)
            if self.transform is not None:
                out["transform"] = self.transform.tolist()
        elif self.kind == "ortho_poly":
            out.update(
                degree=self.n_basis - 1,
                grid_size=self.grid_size,
                alpha=list(self.recurrence[0]),
                norm2=list(self.recurrence[1]),
            )
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "UnivariateBasis":
        """Exact reload of :meth:`to_dict` output, or construction from a short config.

        Short configs name only the kind and size, e.g. ``{"kind": "natural_cubic", "n_basis": 4}``.
        """
        kind = spec["kind"]
        domain = tuple(spec.get("domain", (0.0, 1.0)))
        if kind == "constant":
            return constant_basis(domain)
        if kind == "ortho_poly":
            if "alpha" in spec:
                return cls(
                    "ortho_poly",
                    domain,
                    recurrence=(spec["alpha"], spec["norm2"]),
                    grid_size=int(spec.get("grid_size", 0)),
                )
            return ortho_poly_basis(int(spec["degree"]), int(spec.get("grid_size", 101)), domain)
        if "knots" in spec:
            return cls(
                kind,
                domain,
                order=int(spec.get("order", 4)),
                knots=tuple(spec["knots"]),
                transform=None if spec.get("transform") is None else np.asarray(spec["transform"]),
            )
        if kind == "bspline":
            return bspline_basis(int(spec["n_basis"]), int(spec.get("order", 4)), domain)
        if kind == "natural_cubic":
            return natural_cubic_basis(int(spec["n_basis"]), domain)
        raise ValueError(f"unknown basis kind {kind!r}")

    def orthonormalized(self) -> "UnivariateBasis":
        """Same span, re-combined so the Gram matrix is the identity (spline kinds)."""
        if self.kind not in ("bspline", "natural_cubic"):
            raise ValueError("orthonormalization is provided for spline bases")
        G = gram_matrix(self)
        L = np.linalg.cholesky(G)
        inv = solve_triangular(L, np.eye(self.n_basis), lower=True).T
        base = self.transform if self.transform is not None else np.eye(self.n_basis)
        return UnivariateBasis(self.kind, self.domain, self.order, self.knots, transform=base @ inv)


def _ortho_poly_eval(x, alpha, norm2, deriv=0):
    """Three-term recurrence for grid-orthogonal polynomials with a unit constant column."""
    degree = len(alpha)
    Z = np.zeros((degree + 1, x.size))
    dZ = np.zeros((degree + 1, x.size))
    d2Z = np.zeros((degree + 1, x.size))
    Z[0] = 1.0
    if degree >= 1:
        Z[1] = x - alpha[0]
        dZ[1] = 1.0
    for j in range(1, degree):
        c = norm2[j + 1] / norm2[j]
        Z[j + 1] = (x - alpha[j]) * Z[j] - c * Z[j - 1]
        dZ[j + 1] = Z[j] + (x - alpha[j]) * dZ[j] - c * dZ[j - 1]
        d2Z[j + 1] = 2 * dZ[j] + (x - alpha[j]) * d2Z[j] - c * d2Z[j - 1]
    out = {0: Z, 1: dZ, 2: d2Z}[deriv].copy()
    scale = np.sqrt(np.asarray(norm2[2:], dtype=float))
    out[1:] /= scale[:, None]
    return out.T


# -- constructors -----------------------------------------------------------------
def constant_basis(domain=(0.0, 1.0)) -> UnivariateBasis:
    return UnivariateBasis("constant", tuple(domain))


def _open_knots(n_interior: int, order: int, domain) -> tuple:
    lo, hi = domain
    inner = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return tuple([lo] * order + inner.tolist() + [hi] * order)


def bspline_basis(n_basis: int, order: int = 4, domain=(0.0, 100.0)) -> UnivariateBasis:
    """Open-knot B-spline basis with equally spaced interior knots."""
    if n_basis < order:
        raise ValueError("a B-spline basis needs n_basis >= order")
    return UnivariateBasis("bspline", tuple(domain), order, _open_knots(n_basis - order, order, domain))


def natural_cubic_basis(n_basis: int, domain=(0.0, 1.0)) -> UnivariateBasis:
    """Natural cubic spline basis without the constant, ``n_basis`` columns.

    Uses ``n_basis - 1`` equally spaced interior knots; the first B-spline is
    dropped and the remaining columns are projected onto the null space of the
    second-derivative constraints at both boundaries (the construction used by
    R's ``splines::ns`` with ``intercept = FALSE``).
    """
    if n_basis < 1:
        raise ValueError("natural cubic basis needs n_basis >= 1")
    lo, hi = float(domain[0]), float(domain[1])
    knots = _open_knots(n_basis - 1, 4, (lo, hi))
    raw = UnivariateBasis("bspline", (lo, hi), 4, knots)
    const = raw(np.array([lo, hi]), deriv=2)[:, 1:]
    q, _ = qr(const.T)
    drop_first = np.vstack([np.zeros((1, const.shape[1])), np.eye(const.shape[1])])
    transform = drop_first @ q[:, 2:]
    return UnivariateBasis("natural_cubic", (lo, hi), 4, knots, transform=transform)


def ortho_poly_basis(degree: int, grid_size: int, domain=(0.0, 1.0)) -> UnivariateBasis:
    """Polynomials up to ``degree`` orthonormal over an equally spaced grid, constant column set to 1.

    The non-constant columns have unit sum of squares over the construction grid
    (as with R's ``poly``); the first column is the constant function ``1``.
    """
    if degree < 0 or grid_size < degree + 1:
        raise ValueError("ortho_poly needs degree >= 0 and grid_size >= degree + 1")
    x = np.linspace(domain[0], domain[1], grid_size)
    alpha, norm2 = [], [1.0, float(grid_size)]
    z_prev, z = np.zeros_like(x), np.ones_like(x)
    for j in range(degree):
        a = float(np.sum(x * z * z) / np.sum(z * z))
        alpha.append(a)
        c = norm2[-1] / norm2[-2] if j > 0 else 0.0
        z_prev, z = z, (x - a) * z - c * z_prev
        norm2.append(float(np.sum(z * z)))
    return UnivariateBasis("ortho_poly", tuple(domain), recurrence=(alpha, norm2), grid_size=grid_size)


def basis_from_config(spec: dict, domain=None) -> UnivariateBasis:
    spec = dict(spec)
    if domain is not None and "domain" not in spec:
        spec["domain"] = list(domain)
    return UnivariateBasis.from_dict(spec)


# -- evaluation helpers -------------------------------------------------------------
def eval_basis(basis: UnivariateBasis, points) -> np.ndarray:
    return basis(points)


def gauss_legendre_nodes(basis: UnivariateBasis, n_nodes: int | None = None) -> tuple:
    """Quadrature nodes and weights exact for products of two basis functions on each polynomial piece."""
    if n_nodes is None:
        n_nodes = max(1, basis.piece_degree + 1)
    u, w = np.polynomial.legendre.leggauss(n_nodes)
    br = basis.breakpoints
    a, b = br[:-1, None], br[1:, None]
    nodes = (0.5 * (b - a) * u + 0.5 * (a + b)).ravel()
    weights = (0.5 * (b - a) * w).ravel()
    return nodes, weights


def gram_matrix(basis: UnivariateBasis) -> np.ndarray:
    """``G[i, j] = integral of b_i * b_j`` over the domain, exact for piecewise polynomials."""
    nodes, weights = gauss_legendre_nodes(basis)
    B = basis(nodes)
    G = B.T @ (weights[:, None] * B)
    return 0.5 * (G + G.T)


class Projector:
    """Least-squares projection of gridded values onto a basis, factorised once."""

    def __init__(self, basis: UnivariateBasis, grid):
        grid = np.asarray(grid, dtype=float)
        design = basis(grid)
        if design.shape[1] > design.shape[0]:
            raise ValueError("more basis functions than grid points")
        q, r = qr(design, mode="economic")
        diag = np.abs(np.diag(r))
        if diag.min() <= 1e-10 * max(diag.max(), 1.0):
            raise ValueError("rank-deficient basis design on this grid")
        self.basis = basis
        self.grid = grid
        self.design = design
        self._solve = solve_triangular(r, q.T)

    def coefficients(self, values) -> np.ndarray:
        """OLS coefficients along the last axis: ``(..., G) -> (..., B)``."""
        return np.asarray(values) @ self._solve.T

    def evaluate(self, coefs) -> np.ndarray:
        return np.asarray(coefs) @ self.design.T


def fit_coefficients(dataset, basis: UnivariateBasis) -> np.ndarray:
    """Per-dimension OLS basis coefficients of every curve, shape ``(N_total, P, B)``."""
    return Projector(basis, dataset.grid).coefficients(dataset.values)


def trapezoid_weights(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    w = np.zeros_like(grid)
    h = np.diff(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w
