"""Longitudinal basis systems: the functions of ``T`` used by the score models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import UnivariateBasis, constant_basis, natural_cubic_basis, ortho_poly_basis
from .mvfpca import MlFpcaBasis


@dataclass(frozen=True, eq=False)
class LongitudinalBasis:
    """Functions ``xi_d(T)`` on ``[0, 1]``.

    The fixed intercept always uses the full system (an optional leading constant
    followed by the columns of ``basis``).  Random effects use column subsets of
    the same system, chosen by the covariance specification, unless ``per_k``
    supplies score-specific ml-FPCA bases, in which case the subject and
    subject-side levels use the estimated eigenfunctions of that score.
    """

    basis: UnivariateBasis | None
    add_constant: bool = True
    per_k: dict = field(default_factory=dict)

    @property
    def D(self) -> int:
        return int(self.add_constant) + (self.basis.n_basis if self.basis is not None else 0)

    def fixed(self, T, deriv: int = 0) -> np.ndarray:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        cols = []
        if self.add_constant:
            cols.append(np.full((T.size, 1), 1.0 if deriv == 0 else 0.0))
        if self.basis is not None:
            cols.append(self.basis(T, deriv))
        return np.hstack(cols)

    def random(self, T, level: str, columns, k: int | None = None, deriv: int = 0) -> np.ndarray:
        """Random-effect design for ``level`` in {'subject', 'side'}."""
        if self.per_k and k is not None:
            ml = self.per_k[k]
            funcs = ml.subject_level if level == "subject" else ml.side_level
            return funcs(T, deriv)
        return self.fixed(T, deriv)[:, list(columns)]

    def n_random(self, level: str, columns, k: int | None = None) -> int:
        if self.per_k and k is not None:
            ml = self.per_k[k]
            return (ml.subject_level if level == "subject" else ml.side_level).n_basis
        return len(columns)

    def with_mlfpca(self, per_k: dict) -> "LongitudinalBasis":
        return LongitudinalBasis(self.basis, self.add_constant, dict(per_k))

    def to_dict(self) -> dict:
        return {
            "basis": None if self.basis is None else self.basis.to_dict(),
            "add_constant": self.add_constant,
            "per_k": {str(k): v.to_dict() for k, v in sorted(self.per_k.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LongitudinalBasis":
        basis = None if d.get("basis") is None else UnivariateBasis.from_dict(d["basis"])
        per_k = {int(k): MlFpcaBasis.from_dict(v) for k, v in (d.get("per_k") or {}).items()}
        return cls(basis, bool(d.get("add_constant", True)), per_k)


def constant_only() -> LongitudinalBasis:
    return LongitudinalBasis(None, True)


def spline_system(n_spline: int = 3) -> LongitudinalBasis:
    """Constant plus ``n_spline`` natural cubic splines on ``[0, 1]``."""
    return LongitudinalBasis(natural_cubic_basis(n_spline, (0.0, 1.0)), True)


def polynomial_system(degree: int = 2, grid_size: int = 101) -> LongitudinalBasis:
    """Grid-orthogonal polynomials with a unit constant first column."""
    return LongitudinalBasis(ortho_poly_basis(degree, grid_size, (0.0, 1.0)), False)


def longitudinal_from_config(spec: dict) -> LongitudinalBasis:
    kind = spec.get("kind", "natural_cubic")
    if kind == "constant":
        return constant_only()
    if kind == "natural_cubic":
        return spline_system(int(spec.get("n_basis", 3)))
    if kind == "ortho_poly":
        return polynomial_system(int(spec.get("degree", 2)), int(spec.get("grid_size", 101)))
    if kind == "full":
        return LongitudinalBasis.from_dict(spec["value"])
    raise ValueError(f"unknown longitudinal basis kind {kind!r}")


__all__ = [
    "LongitudinalBasis",
    "constant_basis",
    "constant_only",
    "spline_system",
    "polynomial_system",
    "longitudinal_from_config",
]
