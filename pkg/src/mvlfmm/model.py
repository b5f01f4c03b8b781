"""The multivariate multilevel longitudinal functional model.

A fit is a pooled mv-FPCA basis plus one scalar mixed model per retained
score.  Everything functional (fixed-effect curves, intercept surfaces,
covariance surfaces, trajectories, predictions) is reassembled from the
per-score estimates through the eigenfunctions.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .basis import UnivariateBasis, trapezoid_weights
from .datamodel import DataError, MvCurve, MvLongDataset, ObservationKey
from .lmm import CovSpec, LevelSpec, RemlOptions, ScoreLmmFit, build_design, fit_reml
from .longitudinal import LongitudinalBasis
from .mvfpca import MvFpcaModel, ScoreTable, estimate_mlfpca_basis, fit_mvfpca, project_scores

logger = logging.getLogger(__name__)

T_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True, eq=False)
class MvLfmmFit:
    """Assembled model: eigenbasis, longitudinal basis and the K per-score fits."""

    fpca: MvFpcaModel
    long_basis: LongitudinalBasis
    covspecs: tuple
    fits: tuple
    covariate_names: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.fits) != self.fpca.K or len(self.covspecs) != self.fpca.K:
            raise ValueError("one score fit and covspec per retained component required")

    @property
    def K(self) -> int:
        return self.fpca.K

    @property
    def D(self) -> int:
        return self.long_basis.D

    @property
    def grid(self) -> np.ndarray:
        return self.fpca.grid

    @property
    def singular_flags(self) -> list:
        return [f.singular for f in self.fits]

    def random_design(self, T, level: str, k: int, deriv: int = 0) -> np.ndarray:
        spec = self.covspecs[k].subject if level == "subject" else self.covspecs[k].side
        if spec is None:
            return np.zeros((np.atleast_1d(T).size, 0))
        return self.long_basis.random(T, level, spec.columns, k, deriv)


# -- fitting ---------------------------------------------------------------------------------
def mlfpca_covspec(per_k: dict, k: int) -> CovSpec:
    ml = per_k[k]
    return CovSpec(
        LevelSpec("diagonal", tuple(range(ml.subject_level.n_basis))),
        LevelSpec("diagonal", tuple(range(ml.side_level.n_basis))),
    )


def _fit_one(args):
    y, keys, T, cov, long_basis, covspec, k, names, opts = args
    design = build_design(y, keys[0], keys[1], T, cov, long_basis, covspec, k, names)
    return fit_reml(design, covspec, opts)


def _map(func, items, workers: int):
    if workers is None or workers <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def estimate_mlfpca_bases(scores: ScoreTable, X: np.ndarray, pve: float = 0.995) -> dict:
    """Per-score two-level FPCA bases of the OLS-detrended score trajectories."""
    per_k = {}
    for k in range(scores.K):
        y = scores.scores[:, k]
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        per_k[k] = estimate_mlfpca_basis(scores.subject_ids, scores.sides, scores.long_time, y - X @ beta, pve)
    return per_k


def fit_scores(
    scores: ScoreTable,
    covariates: np.ndarray,
    long_basis: LongitudinalBasis,
    covspec: CovSpec | None,
    covariate_names=(),
    opts: RemlOptions | None = None,
    mlfpca: bool = False,
    mlfpca_pve: float = 0.995,
    workers: int = 1,
    ks=None,
) -> tuple:
    """Fit the score models; returns ``(long_basis, covspecs, fits)``.

    With ``mlfpca=True`` the random-effect bases are estimated per score first
    and diagonal covariances are used at both levels.
    """
    ks = range(scores.K) if ks is None else ks
    cov = np.asarray(covariates, dtype=float).reshape(scores.scores.shape[0], -1)
    if mlfpca:
        X = np.hstack([long_basis.fixed(scores.long_time), cov])
        long_basis = long_basis.with_mlfpca(estimate_mlfpca_bases(scores, X, mlfpca_pve))
        covspecs = tuple(mlfpca_covspec(long_basis.per_k, k) for k in ks)
    else:
        covspecs = tuple(covspec for _ in ks)
    keys = (scores.subject_ids, scores.sides)
    jobs = [
        (scores.scores[:, k], keys, scores.long_time, cov, long_basis, cs, k, tuple(covariate_names), opts)
        for k, cs in zip(ks, covspecs)
    ]
    fits = tuple(_map(_fit_one, jobs, workers))
    return long_basis, covspecs, fits


def fit_model(
    train: MvLongDataset,
    covariates,
    long_basis: LongitudinalBasis,
    covspec: CovSpec | None,
    truncation: dict,
    basis: UnivariateBasis | None = None,
    opts: RemlOptions | None = None,
    mlfpca: bool = False,
    mlfpca_pve: float = 0.995,
    fpca: MvFpcaModel | None = None,
    workers: int = 1,
    metadata: dict | None = None,
) -> MvLfmmFit:
    """Centre, run the pooled mv-FPCA (or reuse ``fpca``) and fit one mixed model per score.

    Parameters
    ----------
    covariates : list of str
        Covariate names, in the order used for ``beta``.
    covspec : CovSpec
        Ignored when ``mlfpca`` is set (diagonal covariances on estimated bases).
    """
    if train.n_total == 0:
        raise DataError("empty training set")
    names = tuple(covariates)
    cov = train.covariate_matrix(list(names))
    if fpca is None:
        if basis is None:
            raise ValueError("a functional basis is needed when no mv-FPCA model is supplied")
        fpca, scores = fit_mvfpca(train, basis, truncation)
    else:
        scores = project_scores(train, fpca)
    lb, covspecs, fits = fit_scores(scores, cov, long_basis, covspec, names, opts, mlfpca, mlfpca_pve, workers)
    n_sing = sum(f.singular for f in fits)
    if n_sing:
        logger.info("%d of %d score models converged to a singular fit", n_sing, len(fits))
    meta = {"singular": [bool(f.singular) for f in fits], "mlfpca": bool(mlfpca)}
    meta.update(metadata or {})
    return MvLfmmFit(fpca, lb, covspecs, fits, names, meta)


# -- functional fixed effects ------------------------------------------------------------------
def _combine(coef: np.ndarray, var: np.ndarray, psi: np.ndarray) -> tuple:
    """``sum_k coef_k psi_k`` and ``sum_k var_k psi_k^2`` for ``psi`` of shape ``(K, P, G)``."""
    est = np.einsum("k,kpg->pg", coef, psi)
    v = np.einsum("k,kpg->pg", var, psi**2)
    return est, v


def fixed_effect_curve(fit: MvLfmmFit, a: int, t=None) -> tuple:
    """Covariate effect ``beta_a(t)`` and its pointwise variance, each ``(P, G)``."""
    if not 0 <= a < len(fit.covariate_names):
        raise IndexError(f"covariate index {a} out of range")
    j = fit.D + a
    coef = np.array([f.beta[j] for f in fit.fits])
    var = np.array([f.beta_cov[j, j] for f in fit.fits])
    return _combine(coef, var, fit.fpca.psi(t) if t is not None else fit.fpca.psi_grid)


def longitudinal_coefficient_curves(fit: MvLfmmFit, t=None) -> tuple:
    """Coefficient functions of the longitudinal basis, arrays ``(D, P, G)`` of estimates and variances."""
    psi = fit.fpca.psi(t) if t is not None else fit.fpca.psi_grid
    est, var = [], []
    for d in range(fit.D):
        e, v = _combine(np.array([f.beta[d] for f in fit.fits]), np.array([f.beta_cov[d, d] for f in fit.fits]), psi)
        est.append(e)
        var.append(v)
    return np.array(est), np.array(var)


def intercept_surface(fit: MvLfmmFit, t=None, T=None) -> np.ndarray:
    """``beta_0(t, T)`` with shape ``(P, len(t), len(T))``."""
    T = T_GRID if T is None else np.atleast_1d(np.asarray(T, dtype=float))
    psi = fit.fpca.psi(t) if t is not None else fit.fpca.psi_grid
    B0 = np.array([f.beta[: fit.D] for f in fit.fits])  # (K, D)
    xi = fit.long_basis.fixed(T)  # (nT, D)
    return np.einsum("kd,Td,kpg->pgT", B0, xi, psi)


def model_pointwise_band(estimate, variance, level: float = 0.95) -> tuple:
    """Normal-theory pointwise band from the combined per-score variances."""
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(np.maximum(variance, 0.0))
    return estimate - half, estimate + half


def _standardised(point, boot):
    boot = np.asarray(boot, dtype=float)
    if boot.shape[0] == 0:
        raise ValueError("empty bootstrap array")
    sd = boot.std(axis=0, ddof=1) if boot.shape[0] > 1 else np.zeros(boot.shape[1:])
    dev = np.abs(boot - point)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, dev / np.where(sd > 0, sd, 1.0), 0.0)
    return sd, z


def simultaneous_band(point_estimate, bootstrap_array, level: float = 0.95) -> dict:
    """Sup-statistic band: ``point +/- q * sd`` with ``q`` the level quantile of the max standardised deviation.

    ``bootstrap_array`` has the replicate on axis 0 and the shape of
    ``point_estimate`` otherwise.  Where the bootstrap sd is zero the band
    collapses to the estimate.
    """
    point = np.asarray(point_estimate, dtype=float)
    sd, z = _standardised(point, bootstrap_array)
    m = z.reshape(z.shape[0], -1).max(axis=1)
    q = float(np.quantile(m, level))
    return {"lower": point - q * sd, "upper": point + q * sd, "sd": sd, "q": q}


def pointwise_band(point_estimate, bootstrap_array, level: float = 0.95) -> dict:
    """Bootstrap pointwise band from per-point quantiles of the standardised deviation.

    Since each pointwise quantile is at most the quantile of the maximum, this
    band always nests inside :func:`simultaneous_band` at the same level.
    """
    point = np.asarray(point_estimate, dtype=float)
    sd, z = _standardised(point, bootstrap_array)
    q = np.quantile(z, level, axis=0)
    return {"lower": point - q * sd, "upper": point + q * sd, "sd": sd, "q": q}


def _resample(train: MvLongDataset, rng) -> MvLongDataset:
    subjects = train.subjects
    draw = rng.integers(0, len(subjects), len(subjects))
    parts, sids, rows = [], [], {}
    for m, i in enumerate(draw):
        sid = subjects[i]
        idx = np.flatnonzero(train.subject_ids == sid)
        parts.append(idx)
        new = f"{sid}#{m}"
        sids.append(np.full(idx.size, new, dtype=object))
        for side in set(train.sides[idx].tolist()):
            rows[(new, side)] = train.covariates.row(sid, side)
    idx = np.concatenate(parts)
    table = type(train.covariates)(train.covariates.names, rows)
    return replace(
        train,
        values=train.values[idx],
        subject_ids=np.concatenate(sids),
        sides=train.sides[idx],
        strides=train.strides[idx],
        long_time=train.long_time[idx],
        covariates=table,
    )


def _boot_replicate(args):
    train, fit, seed, b, opts = args
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, b]))
    data = _resample(train, rng)
    scores = project_scores(data, fit.fpca)
    cov = data.covariate_matrix(list(fit.covariate_names))
    mlfpca = bool(fit.metadata.get("mlfpca"))
    base = LongitudinalBasis(fit.long_basis.basis, fit.long_basis.add_constant)
    try:
        _, _, fits = fit_scores(scores, cov, base, fit.covspecs[0], fit.covariate_names, opts, mlfpca)
    except (DataError, np.linalg.LinAlgError, ValueError) as exc:
        logger.warning("bootstrap replicate %d failed: %s", b, exc)
        return None
    psi = fit.fpca.psi_grid
    out = []
    for a in range(len(fit.covariate_names)):
        coef = np.array([f.beta[fit.D + a] for f in fits])
        out.append(np.einsum("k,kpg->pg", coef, psi))
    return np.array(out)


def bootstrap_fixed_effects(
    train: MvLongDataset, fit: MvLfmmFit, B: int, seed: int, opts: RemlOptions | None = None, workers: int = 1
) -> dict:
    """Subject bootstrap of the covariate effect curves.

    Subjects are drawn with replacement (with all their strides and both
    sides), scores are re-projected on the full-data eigenbasis and the score
    models refitted.  Replicate ``b`` uses its own counter block of a Philox
    stream, so results do not depend on ``workers``.

    Returns
    -------
    dict
        ``curves``: array ``(A, B_ok, P, G)``; ``failures``: count of skipped replicates.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    jobs = [(train, fit, seed, b, opts) for b in range(B)]
    results = _map(_boot_replicate, jobs, workers)
    ok = [r for r in results if r is not None]
    A = len(fit.covariate_names)
    curves = np.stack(ok, axis=1) if ok else np.zeros((A, 0, fit.fpca.n_dims, fit.grid.size))
    return {"curves": curves, "failures": B - len(ok), "basis": "full-data mv-FPCA"}


# -- covariance structure ---------------------------------------------------------------------
def covariance_surface(fit: MvLfmmFit, level: str, t, t2, T=0.0, T2=0.0) -> np.ndarray:
    """``P x P`` covariance between dimensions at ``(t, T)`` and ``(t2, T2)`` for one level.

    ``level`` is 'subject' (Q), 'side' (R) or 'error' (S); ``T`` and ``T2`` are
    ignored for the error level.
    """
    psi1 = fit.fpca.psi(np.atleast_1d(float(t)))[:, :, 0]  # (K, P)
    psi2 = fit.fpca.psi(np.atleast_1d(float(t2)))[:, :, 0]
    weights = np.empty(fit.K)
    for k, f in enumerate(fit.fits):
        if level == "error":
            weights[k] = f.s
            continue
        if level not in ("subject", "side"):
            raise ValueError(f"unknown level {level!r}")
        G = f.Q_star if level == "subject" else f.R_star
        if G.size == 0:
            weights[k] = 0.0
            continue
        z1 = fit.random_design(np.atleast_1d(float(T)), level, k)[0]
        z2 = fit.random_design(np.atleast_1d(float(T2)), level, k)[0]
        weights[k] = z1 @ G @ z2
    return np.einsum("k,kp,kq->pq", weights, psi1, psi2)


def implied_covariance(fit: MvLfmmFit, key1: ObservationKey, key2: ObservationKey, t, t2) -> np.ndarray:
    """Covariance matrix between two observations' curves at ``t`` and ``t2``."""
    if key1.subject_id != key2.subject_id:
        return np.zeros((fit.fpca.n_dims, fit.fpca.n_dims))
    out = covariance_surface(fit, "subject", t, t2, key1.long_time, key2.long_time)
    if key1.side != key2.side:
        return out
    out = out + covariance_surface(fit, "side", t, t2, key1.long_time, key2.long_time)
    if key1.stride_index == key2.stride_index:
        out = out + covariance_surface(fit, "error", t, t2)
    return out


# -- prediction ---------------------------------------------------------------------------------------
def _blup_terms(fit: MvLfmmFit, subject_id, side, T, deriv: int = 0) -> tuple:
    """Per-score random-effect contributions ``(u_part, v_part)``, each ``(K, len(T))``, and seen flags."""
    T = np.atleast_1d(np.asarray(T, dtype=float))
    u_part = np.zeros((fit.K, T.size))
    v_part = np.zeros((fit.K, T.size))
    seen_u = seen_v = False
    for k, f in enumerate(fit.fits):
        u = f.blup_u(subject_id)
        if u is not None:
            seen_u = True
            u_part[k] = fit.random_design(T, "subject", k, deriv) @ u
        if side is not None and f.blups_v.shape[1]:
            v = f.blup_v(subject_id, side)
            if v is not None:
                seen_v = True
                v_part[k] = fit.random_design(T, "side", k, deriv) @ v
    return u_part, v_part, seen_u, seen_v


def predicted_scores(fit: MvLfmmFit, key: ObservationKey, covariate_row) -> tuple:
    """Fitted score vector (length K) for one observation and whether BLUPs were used."""
    x = np.asarray(covariate_row, dtype=float).reshape(-1)
    if x.size != len(fit.covariate_names):
        raise DataError(f"expected {len(fit.covariate_names)} covariates, got {x.size}")
    xi = fit.long_basis.fixed(np.atleast_1d(key.long_time))[0]
    row = np.concatenate([xi, x])
    fixed = np.array([row @ f.beta for f in fit.fits])
    u, v, seen_u, _ = _blup_terms(fit, key.subject_id, key.side, key.long_time)
    return fixed + u[:, 0] + v[:, 0], seen_u


def predict_curve(fit: MvLfmmFit, key: ObservationKey, covariate_row) -> MvCurve:
    """Predicted curve; unseen subjects or sides get zero BLUP contributions."""
    scores, _ = predicted_scores(fit, key, covariate_row)
    return MvCurve(fit.fpca.mean.values + np.einsum("k,kpg->pg", scores, fit.fpca.psi_grid), fit.grid)


def predict_dataset(fit: MvLfmmFit, dataset: MvLongDataset) -> tuple:
    """Predicted curves for every observation of ``dataset``: ``(values (N, P, G), seen (N,))``."""
    cov = dataset.covariate_matrix(list(fit.covariate_names))
    X = np.hstack([fit.long_basis.fixed(dataset.long_time), cov])
    S = np.column_stack([X @ f.beta for f in fit.fits])
    seen = np.zeros(dataset.n_total, dtype=bool)
    for key in dataset.groups:
        rows = np.flatnonzero((dataset.subject_ids == key[0]) & (dataset.sides == key[1]))
        u, v, seen_u, _ = _blup_terms(fit, key[0], key[1], dataset.long_time[rows])
        S[rows] += (u + v).T
        seen[rows] = seen_u
    values = fit.fpca.mean.values + np.einsum("nk,kpg->npg", S, fit.fpca.psi_grid)
    return values, seen


def subject_trajectory(fit: MvLfmmFit, subject_id, side=None, T=None) -> np.ndarray:
    """``u_i(t, T)`` (plus ``v_ij`` if ``side`` is given), shape ``(len(T), P, G)``."""
    T = T_GRID if T is None else T
    if fit.fits[0].blup_u(subject_id) is None:
        raise DataError(f"unknown subject {subject_id!r}")
    u, v, _, seen_v = _blup_terms(fit, subject_id, side, T)
    if side is not None and not seen_v and fit.fits[0].blups_v.shape[1]:
        raise DataError(f"unknown subject-side {subject_id}/{side}")
    return np.einsum("kT,kpg->Tpg", u + v, fit.fpca.psi_grid)


def change_metrics(fit: MvLfmmFit, subject_id, side) -> dict:
    """Integrated squared longitudinal derivative and overall change of the subject-side profile.

    Both use ``f(t, T) = u_i(t, T) + v_ij(t, T)``, trapezoid integration in
    ``t`` on the model grid and in ``T`` on 101 equally spaced points, and the
    1/100 scaling of the functional domain.
    """
    du, dv, _, _ = _blup_terms(fit, subject_id, side, T_GRID, deriv=1)
    deriv = np.einsum("kT,kpg->Tpg", du + dv, fit.fpca.psi_grid)
    wt = trapezoid_weights(fit.grid)
    wT = trapezoid_weights(T_GRID)
    isd = float(np.einsum("T,g,Tpg->", wT, wt, deriv**2)) / 100.0
    ends = subject_trajectory(fit, subject_id, side, np.array([0.0, 1.0]))
    diff = ends[1] - ends[0]
    overall = float(np.sqrt(np.einsum("g,pg->", wt, diff**2) / 100.0))
    return {"isd": isd, "overall_change": overall}


# -- persistence ----------------------------------------------------------------------------------
def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_bundle(fit: MvLfmmFit, directory) -> Path:
    """Write ``fpca.json``, ``fits/k_###.json`` and ``meta.json``."""
    out = Path(directory)
    (out / "fits").mkdir(parents=True, exist_ok=True)
    _dump(fit.fpca.to_dict(), out / "fpca.json")
    for k, (f, cs) in enumerate(zip(fit.fits, fit.covspecs)):
        d = f.to_dict()
        d["covspec"] = cs.to_dict()
        _dump(d, out / "fits" / f"k_{k + 1:03d}.json")
    meta = {
        "K": fit.K,
        "covariate_names": list(fit.covariate_names),
        "long_basis": fit.long_basis.to_dict(),
        "metadata": fit.metadata,
    }
    _dump(meta, out / "meta.json")
    return out


def load_bundle(directory) -> MvLfmmFit:
    d = Path(directory)
    try:
        fpca = MvFpcaModel.from_dict(json.loads((d / "fpca.json").read_text()))
        meta = json.loads((d / "meta.json").read_text())
        fits, specs = [], []
        for k in range(int(meta["K"])):
            raw = json.loads((d / "fits" / f"k_{k + 1:03d}.json").read_text())
            specs.append(CovSpec.from_dict(raw["covspec"]))
            fits.append(ScoreLmmFit.from_dict(raw))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable fit bundle {d}: {exc}") from exc
    return MvLfmmFit(
        fpca,
        LongitudinalBasis.from_dict(meta["long_basis"]),
        tuple(specs),
        tuple(fits),
        tuple(meta["covariate_names"]),
        meta.get("metadata", {}),
    )


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
