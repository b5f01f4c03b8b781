"""Pooled multivariate FPCA on per-dimension spline coefficients, plus a two-level
method-of-moments FPCA for longitudinal score trajectories."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd

from .basis import Projector, UnivariateBasis, gram_matrix, trapezoid_weights
from .datamodel import DataError, MvCurve, MvLongDataset, ObservationKey, center_dataset

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-12


def _sym_sqrt(G: np.ndarray, floor: float = EIG_FLOOR) -> tuple:
    w, U = np.linalg.eigh(G)
    if w.min() < -1e-10 * max(1.0, w.max()):
        raise ValueError("Gram matrix is not positive semi-definite")
    w = np.maximum(w, floor)
    root = (U * np.sqrt(w)) @ U.T
    inv_root = (U / np.sqrt(w)) @ U.T
    return root, inv_root


@dataclass(frozen=True, eq=False)
class MvFpcaModel:
    """Fitted pooled mv-FPCA.

    ``eig_coefs[k]`` stacks the spline coefficients of eigenfunction ``k`` over the
    ``P`` dimensions (dimension-major); eigenfunctions are orthonormal in the
    inner product ``sum_p integral psi_p psi'_p dt``.
    """

    mean: MvCurve
    eig_coefs: np.ndarray
    eigenvalues: np.ndarray
    pve: np.ndarray
    basis: UnivariateBasis
    dim_names: tuple
    spectrum: np.ndarray

    @property
    def K(self) -> int:
        return self.eig_coefs.shape[0]

    @property
    def n_dims(self) -> int:
        return len(self.dim_names)

    @property
    def grid(self) -> np.ndarray:
        return self.mean.grid

    @cached_property
    def gram(self) -> np.ndarray:
        """Block-diagonal Gram matrix of the stacked per-dimension basis."""
        return np.kron(np.eye(self.n_dims), gram_matrix(self.basis))

    @cached_property
    def projector(self) -> Projector:
        return Projector(self.basis, self.grid)

    def psi(self, t=None) -> np.ndarray:
        """Eigenfunctions evaluated at ``t`` (default: the model grid), shape ``(K, P, len(t))``."""
        B = self.projector.design if t is None else self.basis(t)
        coefs = self.eig_coefs.reshape(self.K, self.n_dims, -1)
        return coefs @ B.T

    @cached_property
    def psi_grid(self) -> np.ndarray:
        return self.psi()

    def scores_from_coefs(self, coefs: np.ndarray) -> np.ndarray:
        return coefs.reshape(coefs.shape[0], -1) @ self.gram @ self.eig_coefs.T

    def truncate(self, K: int) -> "MvFpcaModel":
        return MvFpcaModel(
            self.mean, self.eig_coefs[:K], self.eigenvalues[:K], self.pve[:K], self.basis, self.dim_names, self.spectrum
        )

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.to_dict(),
            "dim_names": list(self.dim_names),
            "grid": self.grid.tolist(),
            "mean": self.mean.values.tolist(),
            "eig_coefs": self.eig_coefs.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "pve": self.pve.tolist(),
            "spectrum": self.spectrum.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MvFpcaModel":
        return cls(
            mean=MvCurve(np.asarray(d["mean"]), np.asarray(d["grid"])),
            eig_coefs=np.asarray(d["eig_coefs"], dtype=float).reshape(len(d["eigenvalues"]), -1),
            eigenvalues=np.asarray(d["eigenvalues"], dtype=float),
            pve=np.asarray(d["pve"], dtype=float),
            basis=UnivariateBasis.from_dict(d["basis"]),
            dim_names=tuple(d["dim_names"]),
            spectrum=np.asarray(d["spectrum"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """mv-FPC scores, one row per observation, with the observation keys."""

    scores: np.ndarray
    subject_ids: np.ndarray
    sides: np.ndarray
    strides: np.ndarray
    long_time: np.ndarray

    @classmethod
    def for_dataset(cls, scores, dataset: MvLongDataset) -> "ScoreTable":
        return cls(np.asarray(scores), dataset.subject_ids, dataset.sides, dataset.strides, dataset.long_time)

    @property
    def K(self) -> int:
        return self.scores.shape[1]

    @property
    def keys(self) -> list:
        return [
            ObservationKey(s, j, int(l), float(T))
            for s, j, l, T in zip(self.subject_ids, self.sides, self.strides, self.long_time)
        ]

    def take(self, index) -> "ScoreTable":
        return ScoreTable(
            self.scores[index], self.subject_ids[index], self.sides[index], self.strides[index], self.long_time[index]
        )

    def to_frame(self) -> pd.DataFrame:
        n, K = self.scores.shape
        return pd.DataFrame(
            {
                "subject_id": np.repeat(self.subject_ids, K),
                "side": np.repeat(self.sides, K),
                "stride": np.repeat(self.strides, K),
                "T": np.repeat(self.long_time, K),
                "k": np.tile(np.arange(1, K + 1), n),
                "score": self.scores.reshape(-1),
            }
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def choose_K(eigenvalues, pve_threshold: float) -> int:
    """Smallest ``K`` whose leading eigenvalues explain at least ``pve_threshold`` of the total."""
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0:
        raise ValueError("empty spectrum")
    if not 0 < pve_threshold <= 1:
        raise ValueError("pve threshold must lie in (0, 1]")
    lam = lam[lam > 0]
    cum = np.cumsum(lam) / lam.sum()
    return int(min(np.searchsorted(cum, pve_threshold - 1e-12) + 1, lam.size))


def _truncation_K(spectrum: np.ndarray, truncation: dict) -> int:
    if "k" in truncation:
        k = int(truncation["k"])
        if not 1 <= k <= spectrum.size:
            raise ValueError(f"k must lie in [1, {spectrum.size}]")
        return k
    return choose_K(spectrum, float(truncation["pve"]))


def pooled_mvfpca(
    centered: MvLongDataset, basis: UnivariateBasis, truncation: dict, mean: MvCurve | None = None
) -> tuple:
    """Pooled mv-FPCA of an already-centred dataset.

    Each dimension is projected onto ``basis``; the stacked coefficient
    covariance (divisor ``N_total - 1``) is symmetrically weighted by the square
    root of the block-diagonal Gram matrix and eigendecomposed.

    Returns
    -------
    (MvFpcaModel, ScoreTable)
    """
    n = centered.n_total
    if n < 2:
        raise DataError("mv-FPCA needs at least two observations")
    if mean is None:
        mean = MvCurve(np.zeros((centered.n_dims, centered.n_grid)), centered.grid)
    proj = Projector(basis, centered.grid)
    xi = proj.coefficients(centered.values).reshape(n, -1)
    W = np.kron(np.eye(centered.n_dims), gram_matrix(basis))
    root, inv_root = _sym_sqrt(W)
    cov = xi.T @ xi / (n - 1)
    lam, V = np.linalg.eigh(root @ cov @ root)
    lam, V = lam[::-1], V[:, ::-1]
    positive = lam > EIG_FLOOR * max(lam[0], 0.0)
    if not positive.any():
        raise DataError("data have no variation")
    lam, V = lam[positive], V[:, positive]
    K = _truncation_K(lam, truncation)
    C = (inv_root @ V[:, :K]).T
    # sign: largest absolute spline coefficient positive
    pick = np.argmax(np.abs(C), axis=1)
    C *= np.sign(C[np.arange(K), pick])[:, None]
    cum = np.cumsum(lam) / lam.sum()
    model = MvFpcaModel(mean, C, lam[:K].copy(), cum[:K].copy(), basis, centered.dim_names, lam.copy())
    scores = xi @ W @ C.T
    return model, ScoreTable.for_dataset(scores, centered)


def fit_mvfpca(dataset: MvLongDataset, basis: UnivariateBasis, truncation: dict) -> tuple:
    """Centre by the pointwise mean, then run :func:`pooled_mvfpca`."""
    mean, centered = center_dataset(dataset)
    return pooled_mvfpca(centered, basis, truncation, mean=mean)


def project_scores(dataset: MvLongDataset, model: MvFpcaModel) -> ScoreTable:
    """Scores of (uncentred) curves against the model eigenfunctions."""
    if dataset.n_grid != model.grid.size or not np.allclose(dataset.grid, model.grid, rtol=0, atol=1e-12):
        raise DataError("grid mismatch between dataset and model")
    coefs = model.projector.coefficients(dataset.values - model.mean.values)
    return ScoreTable.for_dataset(model.scores_from_coefs(coefs), dataset)


def reconstruct_values(model: MvFpcaModel, scores) -> np.ndarray:
    """``mean + sum_k score_k psi_k`` on the model grid, shape ``(N, P, G)``."""
    S = scores.scores if isinstance(scores, ScoreTable) else np.atleast_2d(np.asarray(scores, dtype=float))
    if S.shape[1] != model.K:
        raise ValueError(f"score width {S.shape[1]} does not match K = {model.K}")
    return model.mean.values + np.einsum("nk,kpg->npg", S, model.psi_grid)


def reconstruct_curves(model: MvFpcaModel, scores) -> list:
    return [MvCurve(v, model.grid) for v in reconstruct_values(model, scores)]


def _subject_folds(subjects: list, folds: int, seed: int) -> list:
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(len(subjects))
    assignment = np.empty(len(subjects), dtype=int)
    assignment[order] = np.arange(len(subjects)) % folds
    return [[s for s, a in zip(subjects, assignment) if a == f] for f in range(folds)]


def _heldout_ss(train: MvLongDataset, test: MvLongDataset, basis, truncation) -> tuple:
    model, _ = fit_mvfpca(train, basis, truncation)
    fitted = reconstruct_values(model, project_scores(test, model))
    ss_res = float(np.sum((test.values - fitted) ** 2))
    ss_tot = float(np.sum((test.values - model.mean.values) ** 2))
    return ss_res, ss_tot


def grouped_cv_pve(dataset: MvLongDataset, basis: UnivariateBasis, folds: int, truncation: dict, seed: int) -> float:
    """Out-of-sample proportion of variance explained with subjects kept within one fold."""
    subjects = dataset.subjects
    if folds < 2:
        raise ValueError("folds must be at least 2")
    if len(subjects) < folds:
        raise DataError(f"{len(subjects)} subjects cannot fill {folds} folds")
    ss_res = ss_tot = 0.0
    for fold in _subject_folds(subjects, folds, seed):
        held = np.isin(dataset.subject_ids, np.array(fold, dtype=object))
        r, t = _heldout_ss(dataset.take(~held), dataset.take(held), basis, truncation)
        ss_res += r
        ss_tot += t
    return 1.0 - ss_res / ss_tot


def loso_within_subject_pve(
    dataset: MvLongDataset, basis: UnivariateBasis, truncation: dict, return_details: bool = False
):
    """Average over subjects of the variance explained for that subject by a model fitted without it.

    The per-subject denominator measures deviations from the leave-one-out
    training mean.  Subjects with a zero denominator are excluded and reported.
    """
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise DataError("leave-one-subject-out needs at least two subjects")
    per_subject, excluded = {}, []
    for sid in subjects:
        held = dataset.subject_ids == sid
        r, t = _heldout_ss(dataset.take(~held), dataset.take(held), basis, truncation)
        if t <= 0:
            excluded.append({"subject_id": sid, "reason": "zero variance about the training mean"})
            logger.warning("subject %s excluded from within-subject PVE", sid)
            continue
        per_subject[sid] = 1.0 - r / t
    value = float(np.mean(list(per_subject.values())))
    if return_details:
        return value, {"per_subject": per_subject, "excluded": excluded, "centering": "leave-one-out training mean"}
    return value


# -- multilevel FPCA of longitudinal score trajectories ---------------------------------
@dataclass(frozen=True, eq=False)
class GridFunctions:
    """Functions tabulated on a regular grid of ``[0, 1]`` and linearly interpolated.

    Evaluation mirrors :class:`~mvlfmm.basis.UnivariateBasis`: ``f(x, deriv)``
    returns a ``(len(x), n_basis)`` matrix.
    """

    grid: np.ndarray
    values: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_basis(self) -> int:
        return self.values.shape[1]

    def __call__(self, x, deriv: int = 0) -> np.ndarray:
        x = np.clip(np.atleast_1d(np.asarray(x, dtype=float)), self.grid[0], self.grid[-1])
        if deriv == 0:
            return np.column_stack([np.interp(x, self.grid, v) for v in self.values.T])
        if deriv == 1:
            slopes = np.diff(self.values, axis=0) / np.diff(self.grid)[:, None]
            seg = np.clip(np.searchsorted(self.grid, x, side="right") - 1, 0, self.grid.size - 2)
            return slopes[seg]
        return np.zeros((x.size, self.n_basis))

    def to_dict(self) -> dict:
        return {
            "kind": "grid",
            "grid": self.grid.tolist(),
            "values": self.values.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridFunctions":
        vals = np.asarray(d["values"], dtype=float).reshape(len(d["grid"]), -1)
        return cls(np.asarray(d["grid"], dtype=float), vals, np.asarray(d["eigenvalues"], dtype=float))


@dataclass(frozen=True, eq=False)
class MlFpcaBasis:
    subject_level: GridFunctions
    side_level: GridFunctions
    noise_var: float

    def to_dict(self) -> dict:
        return {
            "subject_level": self.subject_level.to_dict(),
            "side_level": self.side_level.to_dict(),
            "noise_var": self.noise_var,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlFpcaBasis":
        return cls(
            GridFunctions.from_dict(d["subject_level"]), GridFunctions.from_dict(d["side_level"]), float(d["noise_var"])
        )


def _fill_unobserved(raw: np.ndarray, counts: np.ndarray, grid: np.ndarray, exclude_diagonal: bool) -> np.ndarray:
    """Complete a binned covariance estimate by linear interpolation from observed cells."""
    occupied = np.flatnonzero(counts.sum(axis=1) > 0)
    if occupied.size < 2:
        raise DataError("too few distinct longitudinal times for ml-FPCA")
    sub = raw[np.ix_(occupied, occupied)].copy()
    have = counts[np.ix_(occupied, occupied)] > 0
    if exclude_diagonal:
        have[np.diag_indices_from(have)] = False
    # fill missing cells from the nearest observed cells along the row, then symmetrise
    for i in range(sub.shape[0]):
        ok = np.flatnonzero(have[i])
        if ok.size == 0:
            continue
        miss = np.flatnonzero(~have[i])
        sub[i, miss] = np.interp(miss, ok, sub[i, ok])
    sub = 0.5 * (sub + sub.T)
    g_occ = grid[occupied]
    rows = np.array([np.interp(grid, g_occ, col) for col in sub.T]).T  # (G, n_occ)
    full = np.array([np.interp(grid, g_occ, r) for r in rows])
    return 0.5 * (full + full.T)


def _level_eigen(K: np.ndarray, grid: np.ndarray, pve: float) -> GridFunctions:
    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    lam, V = np.linalg.eigh(sw[:, None] * K * sw[None, :])
    lam, V = lam[::-1], V[:, ::-1]
    lam = np.maximum(lam, 0.0)
    if lam[0] <= 0:
        n_keep = 1
    else:
        n_keep = choose_K(lam, pve)
    phi = V[:, :n_keep] / sw[:, None]
    pick = np.argmax(np.abs(phi), axis=0)
    phi *= np.sign(phi[pick, np.arange(n_keep)])
    return GridFunctions(grid, phi, lam[:n_keep])


def estimate_mlfpca_basis(
    subject_ids, sides, long_time, values, pve: float = 0.995, t_grid_size: int = 41
) -> MlFpcaBasis:
    """Two-level method-of-moments FPCA of detrended score trajectories.

    Parameters
    ----------
    subject_ids, sides, long_time, values : array-like, shape (n,)
        One scalar trajectory value per observation; values should already have
        the fixed effects removed.
    pve : float
        Variance-explained threshold applied separately at each level.
    t_grid_size : int
        Number of nodes of the regular ``T`` grid on ``[0, 1]``; times are binned
        to the nearest node.

    Notes
    -----
    Cross-side products within a subject estimate the subject-level covariance;
    products between distinct strides of the same subject-side estimate the sum
    of both levels.  The side level is their difference.  Unobserved cells
    (including the within-side diagonal) are filled by linear interpolation.
    """
    grid = np.linspace(0.0, 1.0, t_grid_size)
    bins = np.clip(np.rint(np.asarray(long_time, dtype=float) * (t_grid_size - 1)).astype(int), 0, t_grid_size - 1)
    y = np.asarray(values, dtype=float)
    sids = np.asarray(subject_ids).astype(str)
    sds = np.asarray(sides).astype(str)
    G = t_grid_size
    within = np.zeros((G, G))
    within_n = np.zeros((G, G))
    cross = np.zeros((G, G))
    cross_n = np.zeros((G, G))
    diag_sq = np.zeros(G)
    diag_n = np.zeros(G)
    skipped = []
    frame = pd.DataFrame({"s": sids, "j": sds, "b": bins, "y": y})
    for sid, sub in frame.groupby("s", sort=True):
        per_side = {}
        for side, grp in sub.groupby("j", sort=True):
            s = np.bincount(grp["b"], weights=grp["y"], minlength=G)
            c = np.bincount(grp["b"], minlength=G).astype(float)
            q = np.bincount(grp["b"], weights=grp["y"] ** 2, minlength=G)
            within += np.outer(s, s) - np.diag(q)
            within_n += np.outer(c, c) - np.diag(c)
            diag_sq += q
            diag_n += c
            per_side[side] = (s, c)
        if len(per_side) == 2:
            (s1, c1), (s2, c2) = per_side.values()
            cross += np.outer(s1, s2) + np.outer(s2, s1)
            cross_n += np.outer(c1, c2) + np.outer(c2, c1)
        else:
            skipped.append(sid)
    if skipped:
        logger.info("ml-FPCA: %d subjects observed on a single side skipped at subject level", len(skipped))
    if cross_n.sum() == 0:
        raise DataError("no subject is observed on both sides")
    with np.errstate(invalid="ignore", divide="ignore"):
        Ku_raw = np.where(cross_n > 0, cross / cross_n, 0.0)
        Kt_raw = np.where(within_n > 0, within / within_n, 0.0)
    Ku = _fill_unobserved(Ku_raw, cross_n, grid, exclude_diagonal=False)
    Kt = _fill_unobserved(Kt_raw, within_n, grid, exclude_diagonal=True)
    Kv = Kt - Ku
    obs = diag_n > 0
    total_diag = diag_sq[obs] / diag_n[obs]
    noise = float(max(np.mean(total_diag - np.diag(Kt)[obs]), 0.0))
    return MlFpcaBasis(_level_eigen(Ku, grid, pve), _level_eigen(Kv, grid, pve), noise)
