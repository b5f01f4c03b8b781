"""Simulation engine: data generation from the multilevel score model, the four
competing model variants, ISE/ISPE metrics and the eigenfunction-recovery study."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .basis import UnivariateBasis, bspline_basis, gram_matrix, trapezoid_weights
from .datamodel import CovariateTable, DataError, MvCurve, MvLongDataset
from .lmm import CovSpec, LevelSpec, RemlOptions
from .longitudinal import LongitudinalBasis, polynomial_system, spline_system
from .model import fit_scores
from .mvfpca import fit_mvfpca, project_scores

logger = logging.getLogger(__name__)

MODELS = ("polynomial", "naive", "spline", "mlfpca")
METRIC_COLUMNS = [
    "scenario", "replicate", "model", "ise_beta0", "ise_beta1", "ise_beta2",
    "mean_ispe", "fpca_s", "fit_s", "singular_count", "K",
]


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    """Parameters of the data-generating model.

    ``basis_coefs[k]`` holds the stacked (dimension-major) spline coefficients
    of generating function ``k`` in ``basis``; rows of ``beta0``, ``Q_diag`` and
    ``R_diag`` are indexed by ``k`` and columns by the longitudinal basis
    function ``d``.
    """

    grid: np.ndarray
    mean: np.ndarray
    basis: UnivariateBasis
    basis_coefs: np.ndarray
    beta0: np.ndarray
    betaA: np.ndarray
    Q_diag: np.ndarray
    R_diag: np.ndarray
    s: np.ndarray
    dim_names: tuple = ("hip", "knee", "ankle")
    covariate_law: dict = field(default_factory=lambda: {"binomial": {"p": 0.5}, "gaussian": {"mean": 0.0, "sd": 1.0}})
    noise: dict = field(default_factory=lambda: {"l": 0.25, "sigma": 0.9})
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("Q_diag", "R_diag", "s"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"{name} must be non-negative")
        W = np.kron(np.eye(len(self.dim_names)), gram_matrix(self.basis))
        C = np.asarray(self.basis_coefs)
        if np.max(np.abs(C @ W @ C.T - np.eye(C.shape[0]))) > 1e-6:
            raise ValueError("generating basis functions are not orthonormal")

    @property
    def n_basis(self) -> int:
        return self.basis_coefs.shape[0]

    @property
    def n_dims(self) -> int:
        return len(self.dim_names)

    def psi(self, t=None) -> np.ndarray:
        """Generating functions on ``t`` (default: grid), shape ``(10, P, G)``."""
        B = self.basis(self.grid if t is None else t)
        return self.basis_coefs.reshape(self.n_basis, self.n_dims, -1) @ B.T

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "mean": np.asarray(self.mean).tolist(),
            "basis": self.basis.to_dict(),
            "basis_coefs": self.basis_coefs.tolist(),
            "beta0": self.beta0.tolist(),
            "betaA": self.betaA.tolist(),
            "Q_diag": self.Q_diag.tolist(),
            "R_diag": self.R_diag.tolist(),
            "s": self.s.tolist(),
            "dim_names": list(self.dim_names),
            "covariate_law": self.covariate_law,
            "noise": self.noise,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        arr = lambda key: np.asarray(d[key], dtype=float)  # noqa: E731
        return cls(
            grid=arr("grid"),
            mean=arr("mean"),
            basis=UnivariateBasis.from_dict(d["basis"]),
            basis_coefs=arr("basis_coefs"),
            beta0=arr("beta0"),
            betaA=arr("betaA"),
            Q_diag=arr("Q_diag"),
            R_diag=arr("R_diag"),
            s=arr("s"),
            dim_names=tuple(d.get("dim_names", ("hip", "knee", "ankle"))),
            covariate_law=d.get("covariate_law", {"binomial": {"p": 0.5}, "gaussian": {"mean": 0.0, "sd": 1.0}}),
            noise=d.get("noise", {"l": 0.25, "sigma": 0.9}),
            metadata=d.get("metadata", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "GeneratorParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_params() -> GeneratorParams:
    """The generator parameter file shipped with the package."""
    text = resources.files("mvlfmm").joinpath("data/default_params.json").read_text()
    return GeneratorParams.from_dict(json.loads(text))


def build_reference_params(seed: int = 20240501, n_spline: int = 20) -> GeneratorParams:
    """Construct the shipped parameter set.

    The mean is a gait-like hip/knee/ankle pattern; the ten generating functions
    are low-frequency harmonics with random amplitudes, orthonormalised under
    the Gram inner product.  Score variances halve from one component to the
    next and are split across levels and longitudinal terms in fixed
    proportions; each longitudinal variance is set so that its contribution to
    the marginal variance equals its share.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    grid = np.linspace(0.0, 100.0, 101)
    basis = bspline_basis(n_spline, 4, (0.0, 100.0))
    B = basis(grid)
    w = 2 * np.pi * grid / 100.0
    mean = np.array([
        20 + 22 * np.cos(w) + 5 * np.sin(w) - 3 * np.cos(2 * w),
        40 - 25 * np.cos(w) - 12 * np.sin(2 * w) + 8 * np.cos(3 * w),
        5 + 8 * np.sin(w) - 10 * np.sin(2 * w) + 4 * np.cos(2 * w),
    ])
    P, K = 3, 10
    funcs = np.zeros((K, P, grid.size))
    for k in range(K):
        for p in range(P):
            for h in range(1, 4):
                a, b = rng.normal(0, 1.0 / h, 2)
                funcs[k, p] += a * np.cos(h * w) + b * np.sin(h * w)
            funcs[k, p] += rng.normal(0, 0.3)
    coefs = np.linalg.lstsq(B, funcs.reshape(K * P, -1).T, rcond=None)[0].T.reshape(K, P * n_spline)
    Wm = np.kron(np.eye(P), gram_matrix(basis))
    L = np.linalg.cholesky(Wm)
    q, r = np.linalg.qr(L.T @ coefs.T)
    q *= np.sign(np.diag(r))
    coefs = np.linalg.solve(L.T, q).T
    mean_coefs = np.linalg.lstsq(B, mean.T, rcond=None)[0]
    mean = (B @ mean_coefs).T

    xi = polynomial_system(2, 101).fixed(np.linspace(0, 1, 101))
    m2, m3 = np.mean(xi[:, 1] ** 2), np.mean(xi[:, 2] ** 2)
    v = 2.0e4 * 0.5 ** np.arange(K)
    share = {"q1": 0.40, "q2": 0.10, "q3": 0.06, "r1": 0.12, "r2": 0.06, "r3": 0.04, "s": 0.22}
    Q = np.column_stack([share["q1"] * v, share["q2"] * v / m2, share["q3"] * v / m3])
    R = np.column_stack([share["r1"] * v, share["r2"] * v / m2, share["r3"] * v / m3])
    s = share["s"] * v
    sd = np.sqrt(v)
    beta0 = np.column_stack([np.zeros(K), rng.normal(0, 0.3, K) * sd / np.sqrt(m2), rng.normal(0, 0.3, K) * sd / np.sqrt(m3)])
    betaA = np.column_stack([rng.normal(0, 0.5, K) * sd, rng.normal(0, 0.3, K) * sd])
    rnd = lambda a: np.round(a, 6)  # noqa: E731
    return GeneratorParams(
        grid=grid,
        mean=mean,
        basis=basis,
        basis_coefs=coefs,
        beta0=rnd(beta0),
        betaA=rnd(betaA),
        Q_diag=rnd(Q),
        R_diag=rnd(R),
        s=rnd(s),
        metadata={"construction": "synthetic reference parameters", "seed": seed, "variance_shares": share},
    )


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "baseline"
    n_subjects: int = 280
    n_per_side: int = 80
    missing_prop: float = 0.1
    strength: float = 1.0
    models: tuple = MODELS
    pve: float = 0.995
    replicates: int = 1
    seed: int = 0
    test_per_side: int = 10
    n_restarts: int = 3
    reml_tol: float = 1e-8
    record_timing: bool = True

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        unknown = set(self.models) - set(MODELS)
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}")
        if not self.models:
            raise ValueError("at least one model variant is required")
        if not 0 <= self.missing_prop < 1:
            raise ValueError("missing_prop must lie in [0, 1)")
        if self.n_subjects < 1 or self.n_per_side < 1:
            raise ValueError("n_subjects and n_per_side must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["models"] = list(self.models)
        return d


NAMED_SCENARIOS = {
    "baseline": {},
    "n500": {"n_subjects": 500},
    "n1000": {"n_subjects": 1000},
    "missing0.2": {"missing_prop": 0.2},
    "missing0.5": {"missing_prop": 0.5},
    "strength2": {"strength": 2.0},
    "strength3": {"strength": 3.0},
}


def named_scenario(name: str, **overrides) -> ScenarioConfig:
    return ScenarioConfig(name=name, **{**NAMED_SCENARIOS[name], **overrides})


def scale_strength(params: GeneratorParams, factor: float) -> GeneratorParams:
    """Multiply the standard deviations of the non-constant longitudinal terms by ``factor``."""
    if factor < 1:
        raise ValueError("strength factor must be at least 1")
    scale = np.array([1.0, factor**2, factor**2])
    meta = dict(params.metadata, strength=factor, strength_rule="sd of d=2,3 random terms scaled")
    return replace(params, Q_diag=params.Q_diag * scale, R_diag=params.R_diag * scale, metadata=meta)


# -- generation -------------------------------------------------------------------------------
def _stream(seed: int, replicate: int) -> np.random.Generator:
    """Counter-based stream: Philox keyed by (seed, replicate)."""
    return np.random.Generator(np.random.Philox(key=(int(seed) % 2**64) << 64 | (int(replicate) % 2**64)))


def noise_cholesky(grid, l: float = 0.25, sigma: float = 0.9, ridge: float = 1e-10) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    C = sigma**2 * stats.norm.pdf(l * np.abs(grid[:, None] - grid[None, :]))
    try:
        return np.linalg.cholesky(C + ridge * np.eye(grid.size))
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("smooth-noise kernel is not positive definite after the ridge") from None


def draw_smooth_noise(rng, shape, grid, l: float = 0.25, sigma: float = 0.9) -> np.ndarray:
    """Independent smooth-noise curves of shape ``shape + (G,)``."""
    L = noise_cholesky(grid, l, sigma)
    z = rng.standard_normal(tuple(shape) + (len(grid),))
    return z @ L.T


def _draw_covariates(rng, law: dict, n: int) -> np.ndarray:
    x1 = rng.binomial(1, float(law["binomial"]["p"]), n).astype(float)
    x2 = rng.normal(float(law["gaussian"]["mean"]), float(law["gaussian"]["sd"]), n)
    return np.column_stack([x1, x2])


@dataclass(frozen=True, eq=False)
class SimTruth:
    intercept: np.ndarray  # (P, G, nT) on the 101-point T grid, mean included
    effects: np.ndarray  # (A, P, G)
    scores: np.ndarray  # noiseless score for every generated stride (N_all, 10)


def generate_dataset(params: GeneratorParams, scenario: ScenarioConfig, replicate_seed: int) -> tuple:
    """Generate one replicate.

    Returns
    -------
    (train, test, truth)
        ``train`` holds the retained strides, ``test`` up to ``test_per_side``
        removed strides per subject-side and ``truth`` the true fixed-effect
        functions.
    """
    rng = _stream(scenario.seed, replicate_seed)
    N, n, K = scenario.n_subjects, scenario.n_per_side, params.n_basis
    xi_sys = polynomial_system(2, 101)
    T = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    xi = xi_sys.fixed(T)  # (n, 3)
    x = _draw_covariates(rng, params.covariate_law, N)
    u = rng.standard_normal((N, K, 3)) * np.sqrt(params.Q_diag)
    v = rng.standard_normal((N, 2, K, 3)) * np.sqrt(params.R_diag)
    eps = rng.standard_normal((N, 2, n, K)) * np.sqrt(params.s)
    fixed = xi @ params.beta0.T  # (n, K)
    cov_part = x @ params.betaA.T  # (N, K)
    scores = (
        fixed[None, None]
        + cov_part[:, None, None, :]
        + np.einsum("nd,ikd->ink", xi, u)[:, None]
        + np.einsum("nd,ijkd->ijnk", xi, v)
        + eps
    )  # (N, 2, n, K)
    psi = params.psi()
    noise = draw_smooth_noise(rng, (N, 2, n, params.n_dims), params.grid, params.noise["l"], params.noise["sigma"])
    values = params.mean + np.einsum("ijnk,kpg->ijnpg", scores, psi) + noise
    n_drop = int(round(scenario.missing_prop * n))
    keep = np.ones((N, 2, n), dtype=bool)
    test = np.zeros((N, 2, n), dtype=bool)
    for i in range(N):
        for j in range(2):
            if n_drop:
                drop = rng.choice(n, size=n_drop, replace=False)
                keep[i, j, drop] = False
                test[i, j, drop[: min(scenario.test_per_side, n_drop)]] = True
    sids = np.array([f"s{i + 1:04d}" for i in range(N)], dtype=object)
    sid_a = np.broadcast_to(sids[:, None, None], (N, 2, n))
    side_a = np.broadcast_to(np.array(["left", "right"], dtype=object)[None, :, None], (N, 2, n))
    stride_a = np.broadcast_to(np.arange(1, n + 1)[None, None], (N, 2, n))
    T_a = np.broadcast_to(T[None, None], (N, 2, n))
    table = CovariateTable(("x1", "x2"), {(sids[i], side): x[i] for i in range(N) for side in ("left", "right")})

    def subset(mask):
        return MvLongDataset(
            values[mask], params.grid, sid_a[mask], side_a[mask], stride_a[mask], T_a[mask], table, params.dim_names
        )

    truth = SimTruth(
        intercept=true_intercept(params, xi_sys),
        effects=np.einsum("ka,kpg->apg", params.betaA, psi),
        scores=scores.reshape(-1, K),
    )
    return subset(keep), subset(test), truth


def true_intercept(params: GeneratorParams, xi_sys: LongitudinalBasis | None = None) -> np.ndarray:
    xi_sys = xi_sys or polynomial_system(2, 101)
    xi = xi_sys.fixed(np.linspace(0, 1, 101))
    return params.mean[:, :, None] + np.einsum("kd,Td,kpg->pgT", params.beta0, xi, params.psi())


# -- metrics ----------------------------------------------------------------------------------------
def _check_grid(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"grid mismatch: {np.shape(a)} vs {np.shape(b)}")


def ise_fixed(estimate, truth, kind: str, t_grid=None, T_grid=None) -> float:
    """Integrated squared error scaled by 1/100, summed over dimensions.

    ``intercept_surface`` inputs have shape ``(P, G, nT)``; ``covariate_curve``
    inputs ``(P, G)``.  Trapezoid rule on ``t_grid`` (default ``0..100``) and
    ``T_grid`` (default ``0..1``).
    """
    estimate, truth = np.asarray(estimate, dtype=float), np.asarray(truth, dtype=float)
    _check_grid(estimate, truth)
    G = estimate.shape[1]
    wt = trapezoid_weights(np.linspace(0, 100, G) if t_grid is None else t_grid)
    err = (estimate - truth) ** 2
    if kind == "covariate_curve":
        return float(np.einsum("g,pg->", wt, err) / 100.0)
    if kind == "intercept_surface":
        nT = estimate.shape[2]
        wT = trapezoid_weights(np.linspace(0, 1, nT) if T_grid is None else T_grid)
        return float(np.einsum("g,T,pgT->", wt, wT, err) / 100.0)
    raise ValueError(f"unknown ISE kind {kind!r}")


def ispe(predicted, observed, grid=None) -> float:
    """Integrated squared prediction error of one (or, with a leading axis, each) curve."""
    pred = predicted.values if isinstance(predicted, MvCurve) else np.asarray(predicted, dtype=float)
    obs = observed.values if isinstance(observed, MvCurve) else np.asarray(observed, dtype=float)
    _check_grid(pred, obs)
    if grid is None:
        grid = predicted.grid if isinstance(predicted, MvCurve) else np.linspace(0, 100, pred.shape[-1])
    w = trapezoid_weights(grid)
    out = np.einsum("g,...pg->...", w, (pred - obs) ** 2) / 100.0
    return float(out) if np.ndim(out) == 0 else out


# -- model variants ----------------------------------------------------------------------------------
def variant_setup(name: str) -> tuple:
    """``(long_basis, covspec, use_mlfpca)`` for a named model variant."""
    if name == "polynomial":
        return polynomial_system(2, 101), CovSpec(LevelSpec("unstructured", (0, 1, 2)), LevelSpec("unstructured", (0, 1, 2))), False
    if name == "naive":
        return spline_system(3), CovSpec(LevelSpec("unstructured", (0,)), LevelSpec("unstructured", (0,))), False
    if name == "spline":
        return spline_system(3), CovSpec(LevelSpec("unstructured", (0, 1, 2, 3)), LevelSpec("unstructured", (0,))), False
    if name == "mlfpca":
        return spline_system(3), None, True
    raise ValueError(f"unknown model variant {name!r}")


@dataclass(eq=False)
class VariantResult:
    model: str
    fpca: object
    long_basis: LongitudinalBasis
    covspecs: tuple
    fits: tuple
    fit_seconds: float


def fit_variant(name: str, fpca, scores, covariates, opts: RemlOptions, ks=None) -> VariantResult:
    lb, cs, mlfpca = variant_setup(name)
    t0 = time.perf_counter()
    lb, covspecs, fits = fit_scores(scores, covariates, lb, cs, ("x1", "x2"), opts, mlfpca, ks=ks)
    return VariantResult(name, fpca, lb, covspecs, fits, time.perf_counter() - t0)


def _variant_metrics(res: VariantResult, test: MvLongDataset, truth: SimTruth) -> dict:
    from .model import MvLfmmFit, fixed_effect_curve, intercept_surface, predict_dataset

    fit = MvLfmmFit(res.fpca, res.long_basis, res.covspecs, res.fits, ("x1", "x2"))
    est0 = fit.fpca.mean.values[:, :, None] + intercept_surface(fit)
    out = {"ise_beta0": ise_fixed(est0, truth.intercept, "intercept_surface")}
    for a in range(2):
        out[f"ise_beta{a + 1}"] = ise_fixed(fixed_effect_curve(fit, a)[0], truth.effects[a], "covariate_curve")
    if test.n_total:
        pred, _ = predict_dataset(fit, test)
        out["mean_ispe"] = float(np.mean(ispe(pred, test.values, test.grid)))
    else:
        out["mean_ispe"] = float("nan")
    out["singular_count"] = int(sum(f.singular for f in res.fits[:10]))
    out["K"] = fit.K
    return out


def run_replicate(params: GeneratorParams, scenario: ScenarioConfig, replicate_seed: int, return_fits: bool = False):
    """Generate one dataset, fit the selected variants and compute their metrics.

    Returns a list of metric rows (dicts), plus the variant fits when
    ``return_fits`` is set.  Fit failures are recorded as rows with NaN metrics.
    """
    p = scale_strength(params, scenario.strength) if scenario.strength != 1 else params
    train, test, truth = generate_dataset(p, scenario, replicate_seed)
    t0 = time.perf_counter()
    fpca, scores = fit_mvfpca(train, p.basis, {"pve": scenario.pve})
    fpca_s = time.perf_counter() - t0
    cov = train.covariate_matrix(["x1", "x2"])
    opts = RemlOptions(tol=scenario.reml_tol, n_restarts=scenario.n_restarts, seed=replicate_seed)
    rows, fits = [], {}
    for name in scenario.models:
        row = {"scenario": scenario.name, "replicate": replicate_seed, "model": name}
        try:
            res = fit_variant(name, fpca, scores, cov, opts)
            row.update(_variant_metrics(res, test, truth))
            row["fit_s"] = res.fit_seconds
            fits[name] = res
        except (DataError, np.linalg.LinAlgError, ValueError) as exc:
            logger.warning("replicate %d, model %s failed: %s", replicate_seed, name, exc)
            row.update({c: float("nan") for c in METRIC_COLUMNS[3:]})
            row["fit_s"] = float("nan")
        row["fpca_s"] = fpca_s
        if not scenario.record_timing:
            row["fpca_s"] = row["fit_s"] = 0.0
        rows.append({c: row[c] for c in METRIC_COLUMNS})
    if return_fits:
        return rows, {"train": train, "test": test, "truth": truth, "fpca": fpca, "scores": scores, "fits": fits}
    return rows


def _replicate_job(args):
    params, scenario, r = args
    return run_replicate(params, scenario, r)


def run_scenario(params: GeneratorParams, scenario: ScenarioConfig, workers: int = 1) -> pd.DataFrame:
    """All replicates of a scenario as a metrics frame, one row per (replicate, model)."""
    jobs = [(params, scenario, r) for r in range(scenario.replicates)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_job, jobs))
    else:
        results = [_replicate_job(j) for j in jobs]
    return pd.DataFrame([row for rows in results for row in rows], columns=METRIC_COLUMNS)


# -- eigenfunction recovery ---------------------------------------------------------------------------------
def marginal_score_covariance(params: GeneratorParams, n_mc: int, seed: int, n_per_side: int = 80) -> np.ndarray:
    """Monte-Carlo covariance of the generating scores over subjects, sides, strides, T and covariates."""
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    rng = _stream(seed, 2**32 + 1)
    K = params.n_basis
    T = rng.integers(0, n_per_side, n_mc) / max(n_per_side - 1, 1)
    xi = polynomial_system(2, 101).fixed(T)
    x = _draw_covariates(rng, params.covariate_law, n_mc)
    u = rng.standard_normal((n_mc, K, 3)) * np.sqrt(params.Q_diag)
    v = rng.standard_normal((n_mc, K, 3)) * np.sqrt(params.R_diag)
    eps = rng.standard_normal((n_mc, K)) * np.sqrt(params.s)
    y = xi @ params.beta0.T + x @ params.betaA.T + np.einsum("nd,nkd->nk", xi, u + v) + eps
    return np.cov(y, rowvar=False)


def rotation_from_covariance(cov: np.ndarray) -> np.ndarray:
    """Eigenvectors (columns, by decreasing eigenvalue) with the largest-magnitude entry of each positive."""
    lam, V = np.linalg.eigh(cov)
    V = V[:, np.argsort(lam)[::-1]]
    pick = np.argmax(np.abs(V), axis=0)
    return V * np.sign(V[pick, np.arange(V.shape[1])])


def rotated_basis(coefs: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Coefficients of ``V^T Psi``."""
    return V.T @ coefs


def _align(est: np.ndarray, target: np.ndarray, W: np.ndarray) -> np.ndarray:
    ip = np.einsum("kb,bc,kc->k", est, W, target)
    return est * np.where(ip < 0, -1.0, 1.0)[:, None]


def recovery_study(
    params: GeneratorParams, mode: str, n_replicates: int, scale: ScenarioConfig, seed: int, n_mc: int = 100_000
) -> dict:
    """Average the leading ten estimated eigenfunctions over replicates and compare
    with the generating basis and its marginal-covariance rotation."""
    if n_replicates < 2:
        raise ValueError("n_replicates must be at least 2")
    if mode not in ("zero_fixed", "with_fixed"):
        raise ValueError(f"unknown mode {mode!r}")
    p = params
    if mode == "zero_fixed":
        p = replace(params, beta0=np.zeros_like(params.beta0), betaA=np.zeros_like(params.betaA))
    scen = replace(scale, seed=seed, missing_prop=0.0)
    K = p.n_basis
    W = np.kron(np.eye(p.n_dims), gram_matrix(p.basis))
    acc = np.zeros_like(p.basis_coefs)
    for r in range(n_replicates):
        train, _, _ = generate_dataset(p, scen, r)
        fpca, _ = fit_mvfpca(train, p.basis, {"k": K})
        acc += _align(fpca.eig_coefs, p.basis_coefs, W)
    mean_coefs = acc / n_replicates
    V = rotation_from_covariance(marginal_score_covariance(p, n_mc, seed, scale.n_per_side))
    rot = _align(rotated_basis(p.basis_coefs, V), mean_coefs, W)

    def l2(a, b):
        d = a - b
        return np.sqrt(np.einsum("kb,bc,kc->k", d, W, d))

    return {
        "mean_estimated_fpcs": mean_coefs,
        "generating_basis": p.basis_coefs,
        "rotated_basis": rot,
        "rotation": V,
        "l2_errors": {"raw": l2(mean_coefs, p.basis_coefs), "rotated": l2(mean_coefs, rot)},
        "basis": p.basis,
        "grid": p.grid,
        "n_dims": p.n_dims,
    }
