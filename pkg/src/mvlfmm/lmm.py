"""REML fitting of scalar linear mixed models with nested subject / subject-side random effects.

Model for one score::

    y = X beta + Z_u u + Z_v v + e,   u_i ~ N(0, Q),  v_ij ~ N(0, R),  e ~ N(0, s I)

with ``Q = s * L_u L_u^T`` and ``R = s * L_v L_v^T``.  The relative Cholesky
factors are parameterised on the log scale for their diagonals, ``beta`` and
``s`` are profiled out, and the profiled REML criterion is minimised by
Nelder-Mead.  Every criterion evaluation works on per-group cross-product
blocks that are formed once, so the cost per evaluation is linear in the
number of subjects and independent of the number of strides.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import minimize

from .datamodel import DataError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
LOG_DIAG_MIN, LOG_DIAG_MAX = -20.0, 12.0


@dataclass(frozen=True)
class LevelSpec:
    structure: str = "unstructured"
    columns: tuple = (0,)

    def __post_init__(self):
        if self.structure not in ("unstructured", "diagonal"):
            raise ValueError(f"unknown covariance structure {self.structure!r}")
        object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))
        if not self.columns:
            raise ValueError("a random-effect level needs at least one column")


@dataclass(frozen=True)
class CovSpec:
    """Covariance structure and longitudinal-basis columns per random-effect level.

    ``side=None`` drops the subject-side level entirely.
    """

    subject: LevelSpec = LevelSpec()
    side: LevelSpec | None = LevelSpec()

    def to_dict(self) -> dict:
        out = {"subject": {"structure": self.subject.structure, "columns": list(self.subject.columns)}}
        out["side"] = None if self.side is None else {"structure": self.side.structure, "columns": list(self.side.columns)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CovSpec":
        side = d.get("side")
        return cls(
            LevelSpec(d["subject"].get("structure", "unstructured"), tuple(d["subject"].get("columns", (0,)))),
            None if side is None else LevelSpec(side.get("structure", "unstructured"), tuple(side.get("columns", (0,)))),
        )


NAIVE = CovSpec(LevelSpec("unstructured", (0,)), LevelSpec("unstructured", (0,)))


@dataclass(frozen=True, eq=False)
class LongDesign:
    """Design of one score model.

    Rows are observations; ``subject_index`` and ``group_index`` map them to
    subjects and subject-side groups, and ``group_subject`` maps each group to
    its subject, so nesting holds by construction.
    """

    response: np.ndarray
    X: np.ndarray
    Z_u: np.ndarray
    Z_v: np.ndarray
    subject_index: np.ndarray
    group_index: np.ndarray
    subject_labels: list
    group_labels: list
    group_subject: np.ndarray
    long_time: np.ndarray
    x_names: tuple = ()

    @property
    def n(self) -> int:
        return self.response.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def D_u(self) -> int:
        return self.Z_u.shape[1]

    @property
    def D_v(self) -> int:
        return self.Z_v.shape[1]

    def with_response(self, y) -> "LongDesign":
        return LongDesign(
            np.asarray(y, dtype=float), self.X, self.Z_u, self.Z_v, self.subject_index, self.group_index,
            self.subject_labels, self.group_labels, self.group_subject, self.long_time, self.x_names,
        )

    def with_X(self, X) -> "LongDesign":
        return LongDesign(
            self.response, np.asarray(X, dtype=float), self.Z_u, self.Z_v, self.subject_index, self.group_index,
            self.subject_labels, self.group_labels, self.group_subject, self.long_time, self.x_names,
        )


def make_design(response, X, Z_u, Z_v, subject_ids, sides, long_time=None, x_names=()) -> LongDesign:
    """Assemble a :class:`LongDesign` from arrays and string keys, checking rank and nesting."""
    y = np.asarray(response, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    Z_u = np.asarray(Z_u, dtype=float).reshape(y.size, -1)
    Z_v = np.zeros((y.size, 0)) if Z_v is None else np.asarray(Z_v, dtype=float).reshape(y.size, -1)
    if not np.all(np.isfinite(y)):
        raise DataError("non-finite responses")
    if y.size == 0:
        raise DataError("empty design")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError("fixed-effects design is rank deficient")
    sids = np.asarray(subject_ids).astype(str)
    sds = np.asarray(sides).astype(str)
    subject_labels = list(dict.fromkeys(sids.tolist()))
    s_code = {s: i for i, s in enumerate(subject_labels)}
    group_labels = list(dict.fromkeys(zip(sids.tolist(), sds.tolist())))
    g_code = {g: i for i, g in enumerate(group_labels)}
    subject_index = np.array([s_code[s] for s in sids], dtype=np.int64)
    group_index = np.array([g_code[g] for g in zip(sids.tolist(), sds.tolist())], dtype=np.int64)
    group_subject = np.array([s_code[s] for s, _ in group_labels], dtype=np.int64)
    T = np.zeros(y.size) if long_time is None else np.asarray(long_time, dtype=float).reshape(-1)
    return LongDesign(y, X, Z_u, Z_v, subject_index, group_index, subject_labels, group_labels, group_subject, T,
                      tuple(x_names))


def build_design(response, subject_ids, sides, long_time, covariates, long_basis, covspec: CovSpec, k=None,
                 covariate_names=()) -> LongDesign:
    """Design for one score: ``X = [xi(T) | covariates]`` and random designs from the covspec columns."""
    T = np.asarray(long_time, dtype=float)
    xi = long_basis.fixed(T)
    cov = np.asarray(covariates, dtype=float).reshape(T.size, -1)
    X = np.hstack([xi, cov])
    Z_u = long_basis.random(T, "subject", covspec.subject.columns, k)
    Z_v = None if covspec.side is None else long_basis.random(T, "side", covspec.side.columns, k)
    names = [f"xi{d + 1}" for d in range(xi.shape[1])] + list(covariate_names or [f"x{a + 1}" for a in range(cov.shape[1])])
    return make_design(response, X, Z_u, Z_v, subject_ids, sides, T, names)


# -- covariance-factor parameterisation ------------------------------------------------
class _Param:
    """Maps an unconstrained vector to a relative Cholesky factor (log-diagonal)."""

    def __init__(self, dim: int, structure: str):
        self.dim = dim
        self.diagonal = structure == "diagonal" or dim == 1
        if self.diagonal:
            self.rows, self.cols = np.arange(dim), np.arange(dim)
        else:
            self.rows, self.cols = np.tril_indices(dim)
        self.is_diag = self.rows == self.cols
        self.size = self.rows.size

    def factor(self, theta: np.ndarray) -> np.ndarray:
        L = np.zeros((self.dim, self.dim))
        vals = np.array(theta, dtype=float)
        vals[self.is_diag] = np.exp(vals[self.is_diag])
        L[self.rows, self.cols] = vals
        return L

    def chain(self, dL: np.ndarray, L: np.ndarray) -> np.ndarray:
        """Gradient in ``theta`` from the gradient in ``L``."""
        g = dL[self.rows, self.cols]
        return np.where(self.is_diag, g * L[self.rows, self.cols], g)

    def theta(self, L: np.ndarray) -> np.ndarray:
        vals = L[self.rows, self.cols]
        with np.errstate(divide="ignore"):
            return np.where(self.is_diag, np.log(np.maximum(vals, 1e-300)), vals)


def psd_cholesky(G: np.ndarray, eps: float = 1e-14) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L^T = G`` for symmetric PSD ``G``, zero pivots allowed."""
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    L = np.zeros_like(G)
    scale = max(np.max(np.abs(np.diag(G))), 1.0) if n else 1.0
    for j in range(n):
        d = G[j, j] - L[j, :j] @ L[j, :j]
        if d <= eps * scale:
            continue
        L[j, j] = np.sqrt(d)
        L[j + 1 :, j] = (G[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass(eq=False)
class ScoreLmmFit:
    """REML fit of one score model."""

    beta: np.ndarray
    beta_cov: np.ndarray
    Q_star: np.ndarray
    R_star: np.ndarray
    s: float
    blups_u: np.ndarray
    blups_v: np.ndarray
    reml_deviance: float
    singular: bool
    subject_labels: list
    group_labels: list
    lambda_u: np.ndarray
    lambda_v: np.ndarray
    x_names: tuple = ()
    converged: bool = True
    n_evals: int = 0
    start_deviances: list = field(default_factory=list)

    @property
    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.beta_cov), 0.0))

    def blup_u(self, subject_id):
        try:
            return self.blups_u[self.subject_labels.index(subject_id)]
        except ValueError:
            return None

    def blup_v(self, subject_id, side):
        try:
            return self.blups_v[self.group_labels.index((subject_id, side))]
        except ValueError:
            return None

    def summary(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "beta_se": self.beta_se.tolist(),
            "beta_cov": self.beta_cov.tolist(),
            "x_names": list(self.x_names),
            "Q_star": self.Q_star.tolist(),
            "R_star": self.R_star.tolist(),
            "s": self.s,
            "deviance": self.reml_deviance,
            "singular": bool(self.singular),
            "converged": bool(self.converged),
            "n_evals": int(self.n_evals),
        }

    def to_dict(self) -> dict:
        out = self.summary()
        out.update(
            lambda_u=self.lambda_u.tolist(),
            lambda_v=self.lambda_v.tolist(),
            subjects=list(self.subject_labels),
            groups=[list(g) for g in self.group_labels],
            blups_u=self.blups_u.tolist(),
            blups_v=self.blups_v.tolist(),
        )
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreLmmFit":
        Du = len(d["Q_star"])
        Dv = len(d["R_star"])
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            beta_cov=np.asarray(d["beta_cov"], dtype=float),
            Q_star=np.asarray(d["Q_star"], dtype=float).reshape(Du, Du),
            R_star=np.asarray(d["R_star"], dtype=float).reshape(Dv, Dv),
            s=float(d["s"]),
            blups_u=np.asarray(d["blups_u"], dtype=float).reshape(len(d["subjects"]), Du),
            blups_v=np.asarray(d["blups_v"], dtype=float).reshape(len(d["groups"]), Dv),
            reml_deviance=float(d["deviance"]),
            singular=bool(d["singular"]),
            subject_labels=list(d["subjects"]),
            group_labels=[tuple(g) for g in d["groups"]],
            lambda_u=np.asarray(d["lambda_u"], dtype=float).reshape(Du, Du),
            lambda_v=np.asarray(d["lambda_v"], dtype=float).reshape(Dv, Dv),
            x_names=tuple(d.get("x_names", ())),
            converged=bool(d.get("converged", True)),
            n_evals=int(d.get("n_evals", 0)),
        )


# -- profiled REML criterion --------------------------------------------------------------
class _Blocks:
    """Per-subject, per-side cross products of ``W = [Z_u | X | y]`` and ``Z_v``."""

    def __init__(self, design: LongDesign):
        Du, Dv, p = design.D_u, design.D_v, design.p
        n_sub = len(design.subject_labels)
        slot = np.zeros(len(design.group_labels), dtype=np.int64)
        seen = {}
        for g, s in enumerate(design.group_subject):
            slot[g] = seen.get(s, 0)
            seen[s] = slot[g] + 1
        J = max(seen.values())
        W = np.hstack([design.Z_u, design.X, design.response[:, None]])
        q = W.shape[1]
        sub = design.subject_index
        sl = slot[design.group_index]
        flat = sub * J + sl
        self.S = np.zeros((n_sub * J, q, q))
        np.add.at(self.S, flat, W[:, :, None] * W[:, None, :])
        self.S = self.S.reshape(n_sub, J, q, q)
        Zv = design.Z_v
        self.ZtZ = np.zeros((n_sub * J, Dv, Dv))
        self.T = np.zeros((n_sub * J, Dv, q))
        if Dv:
            np.add.at(self.ZtZ, flat, Zv[:, :, None] * Zv[:, None, :])
            np.add.at(self.T, flat, Zv[:, :, None] * W[:, None, :])
        self.ZtZ = self.ZtZ.reshape(n_sub, J, Dv, Dv)
        self.T = self.T.reshape(n_sub, J, Dv, q)
        self.slot = slot
        self.Sf = self.S.reshape(n_sub * J, q, q)
        self.Tf = self.T.reshape(n_sub * J, Dv, q)
        self.ZtZf = self.ZtZ.reshape(n_sub * J, Dv, Dv)
        self.J, self.q, self.Du, self.Dv, self.p = J, q, Du, Dv, p
        self.n = design.n

    def side_reduce(self, Lv: np.ndarray) -> tuple:
        """``W^T A^-1 W`` per subject, ``log|A|`` total, plus the pieces for side BLUPs."""
        if self.Dv == 0:
            return self.S.sum(axis=1), 0.0, None
        LT = Lv.T @ self.Tf
        Cv = Lv.T @ self.ZtZf @ Lv + np.eye(self.Dv)
        logdet, sol = _chol_solve(Cv, LT)
        WAW = (self.Sf - np.swapaxes(LT, 1, 2) @ sol).reshape(self.S.shape).sum(axis=1)
        return WAW, logdet, (Cv, LT)

    def criterion(self, Lu: np.ndarray, Lv: np.ndarray, full: bool = False):
        Du, p = self.Du, self.p
        WAW, logdet_v, side = self.side_reduce(Lv)
        ZAZ = WAW[:, :Du, :Du]
        ZAM = WAW[:, :Du, Du:]
        MAM = WAW[:, Du:, Du:]
        LZ = Lu.T @ ZAM
        Cu = Lu.T @ ZAZ @ Lu + np.eye(Du)
        logdet_u, solu = _chol_solve(Cu, LZ)
        MHM = MAM.sum(axis=0) - np.einsum("saq,sar->qr", LZ, solu)
        XHX = MHM[:p, :p]
        XHy = MHM[:p, p]
        cx = np.linalg.cholesky(XHX)
        beta = np.linalg.solve(XHX, XHy)
        rss = MHM[p, p] - XHy @ beta
        dof = self.n - p
        s = max(rss, 1e-300) / dof
        dev = logdet_v + logdet_u + 2.0 * np.log(np.diag(cx)).sum() + dof * (1.0 + LOG_2PI + np.log(s))
        if not full:
            return dev
        return dev, beta, s, XHX, (WAW, Cu, LZ, side)


    def gradient(self, Lu: np.ndarray, Lv: np.ndarray) -> tuple:
        """Criterion and its derivatives with respect to the factors ``Lu`` and ``Lv``.

        With ``P`` the REML projection and ``s`` the profiled residual variance,
        the derivative with respect to a level covariance ``G`` is
        ``sum_g Z_g' P Z_g - s^-1 sum_g (Z_g' P y)(Z_g' P y)'``; the chain rule
        through ``G = L L'`` multiplies by ``2 L``.
        """
        Du, Dv, p, q = self.Du, self.Dv, self.p, self.q
        n_sub, J = self.S.shape[:2]
        if Dv:
            LT = Lv.T @ self.Tf
            Cv = Lv.T @ self.ZtZf @ Lv + np.eye(Dv)
            logdet_v, sol = _chol_solve(Cv, LT)
            WAW = (self.Sf - np.swapaxes(LT, 1, 2) @ sol).reshape(self.S.shape).sum(axis=1)
            ZLv = self.ZtZf @ Lv
            ZvAW = self.Tf - ZLv @ sol
            _, solz = _chol_solve(Cv, np.swapaxes(ZLv, 1, 2))
            ZvAZv = self.ZtZf - ZLv @ solz
        else:
            logdet_v = 0.0
            WAW = self.S.sum(axis=1)
        LW = Lu.T @ WAW[:, :Du, :]
        Cu = Lu.T @ WAW[:, :Du, :Du] @ Lu + np.eye(Du)
        logdet_u, solW = _chol_solve(Cu, LW)
        WHW = WAW - np.swapaxes(LW, 1, 2) @ solW
        MHM = WHW[:, Du:, Du:].sum(axis=0)
        XHX = MHM[:p, :p]
        XHy = MHM[:p, p]
        cx = np.linalg.cholesky(XHX)
        beta = np.linalg.solve(XHX, XHy)
        rss = MHM[p, p] - XHy @ beta
        dof = self.n - p
        s = max(rss, 1e-300) / dof
        dev = logdet_v + logdet_u + 2.0 * np.log(np.diag(cx)).sum() + dof * (1.0 + LOG_2PI + np.log(s))
        XHX_inv = np.linalg.inv(XHX)
        coef = np.concatenate([-beta, [1.0]])

        def gbar(ZHW, ZHZ):
            ZHX = ZHW[:, :, Du : Du + p]
            ZPZ = ZHZ - ZHX @ XHX_inv @ np.swapaxes(ZHX, 1, 2)
            a = ZHW[:, :, Du:] @ coef
            return ZPZ.sum(axis=0) - (a.T @ a) / s

        G_u = gbar(WHW[:, :Du, :], WHW[:, :Du, :Du])
        dLu = 2.0 * (0.5 * (G_u + G_u.T)) @ Lu
        dLv = np.zeros((Dv, Dv))
        if Dv:
            ZvAZu = ZvAW[:, :, :Du]
            B = (ZvAZu @ Lu).reshape(n_sub, J, Dv, Du)
            solW_j = np.broadcast_to(solW[:, None], (n_sub, J, Du, q))
            ZvHW = ZvAW - (B @ solW_j).reshape(n_sub * J, Dv, q)
            Cu_inv = np.linalg.inv(Cu)[:, None]
            ZvHZv = ZvAZv - (B @ Cu_inv @ np.swapaxes(B, 2, 3)).reshape(n_sub * J, Dv, Dv)
            G_v = gbar(ZvHW, ZvHZv)
            dLv = 2.0 * (0.5 * (G_v + G_v.T)) @ Lv
        return dev, dLu, dLv


def _chol_solve(C: np.ndarray, B: np.ndarray) -> tuple:
    """Total log-determinant of a stack of SPD matrices and ``C^-1 B``."""
    if C.shape[-1] == 1:
        c = C[:, 0, 0]
        if np.any(c <= 0):
            raise np.linalg.LinAlgError("matrix not positive definite")
        return float(np.log(c).sum()), B / c[:, None, None]
    chol = np.linalg.cholesky(C)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum()
    return float(logdet), np.linalg.solve(C, B)


def _factor_from_cov(G: np.ndarray, s: float) -> np.ndarray:
    if G.size == 0:
        return np.zeros((0, 0))
    return psd_cholesky(np.asarray(G, dtype=float) / s)


def compute_blups(fit: ScoreLmmFit, design: LongDesign) -> tuple:
    """Conditional modes ``(u_hat, v_hat)`` at the fitted variance parameters and fixed effects."""
    blocks = _Blocks(design)
    Lu = _factor_from_cov(fit.Q_star, fit.s)
    Lv = _factor_from_cov(fit.R_star, fit.s) if design.D_v else np.zeros((0, 0))
    return _blups(blocks, Lu, Lv, fit.beta, design)


def _blups(blocks: _Blocks, Lu, Lv, beta, design: LongDesign) -> tuple:
    Du, Dv, p = blocks.Du, blocks.Dv, blocks.p
    WAW, _, side = blocks.side_reduce(Lv)
    coef = np.concatenate([-beta, [1.0]])
    ZAr = WAW[:, :Du, Du:] @ coef
    ZAZ = WAW[:, :Du, :Du]
    Cu = np.einsum("ab,sbc,cd->sad", Lu.T, ZAZ, Lu) + np.eye(Du)
    u = np.einsum("ab,sb->sa", Lu, np.linalg.solve(Cu, np.einsum("ab,sb->sa", Lu.T, ZAr)[..., None])[..., 0])
    n_groups = len(design.group_labels)
    v = np.zeros((n_groups, Dv))
    if Dv:
        Cv, LT = side
        n_sub, J = blocks.S.shape[:2]
        Cv = Cv.reshape(n_sub, J, Dv, Dv)
        LT = LT.reshape(n_sub, J, Dv, -1)
        full = np.concatenate([-u, np.broadcast_to(coef, (u.shape[0], p + 1))], axis=1)
        Lte = np.einsum("sjaq,sq->sja", LT, full)
        vs = np.einsum("ab,sjb->sja", Lv, np.linalg.solve(Cv, Lte[..., None])[..., 0])
        v = vs[design.group_subject, blocks.slot]
    return u, v


def _singular(Lu: np.ndarray, Lv: np.ndarray, tol: float) -> bool:
    diags = np.concatenate([np.diag(Lu), np.diag(Lv)])
    return bool(np.any(diags < tol))


def detect_singular(fit: ScoreLmmFit, tol: float = 1e-4) -> bool:
    """True iff a diagonal entry of a relative Cholesky factor is below ``tol``."""
    Lu = _factor_from_cov(fit.Q_star, fit.s)
    Lv = _factor_from_cov(fit.R_star, fit.s)
    return _singular(Lu, Lv, tol)


@dataclass(frozen=True)
class RemlOptions:
    tol: float = 1e-8
    max_iter: int = 10_000
    n_restarts: int = 3
    seed: int = 0
    singular_tol: float = 1e-4


def fit_reml(design: LongDesign, covspec: CovSpec, opts: RemlOptions | None = None) -> ScoreLmmFit:
    """Profiled REML fit from a default start plus ``n_restarts`` random starts; the best optimum is kept."""
    opts = opts or RemlOptions()
    if design.n <= design.p + 1:
        raise DataError("too few observations for the fixed effects")
    blocks = _Blocks(design)
    pu = _Param(design.D_u, covspec.subject.structure)
    pv = _Param(design.D_v, "diagonal" if covspec.side is None else covspec.side.structure)

    def unpack(x):
        return pu.factor(x[: pu.size]), pv.factor(x[pu.size :])

    def objective(x):
        Lu, Lv = unpack(x)
        try:
            val = blocks.criterion(Lu, Lv)
        except np.linalg.LinAlgError:
            return np.inf
        return val if np.isfinite(val) else np.inf

    def objective_grad(x):
        Lu, Lv = unpack(x)
        try:
            val, dLu, dLv = blocks.gradient(Lu, Lv)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(x)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(x)
        return val, np.concatenate([pu.chain(dLu, Lu), pv.chain(dLv, Lv)])

    rng = np.random.Generator(np.random.Philox(opts.seed))
    dim = pu.size + pv.size
    diag_mask = np.concatenate([pu.is_diag, pv.is_diag])
    starts = [np.zeros(dim)]
    for _ in range(opts.n_restarts):
        x0 = rng.normal(0.0, 1.0, dim)
        starts.append(x0)
    best_x, best_f, n_evals, converged = None, np.inf, 0, True
    start_devs = []
    for x0 in starts:
        start_devs.append(float(objective(x0)))
        x, f, nfev, ok = _optimise(objective, objective_grad, x0, opts, diag_mask)
        n_evals += nfev
        if f < best_f:
            best_x, best_f, converged = x, f, ok
    best_x, best_f = _newton_polish(objective_grad, best_x, best_f, diag_mask)
    Lu, Lv = unpack(best_x)
    Lu, Lv, best_f = _snap_boundary(blocks, Lu, Lv, best_f, pu, pv)
    dev, beta, s, XHX, _ = blocks.criterion(Lu, Lv, full=True)
    u, v = _blups(blocks, Lu, Lv, beta, design)
    if not converged:
        logger.warning("REML optimiser hit the evaluation limit")
    return ScoreLmmFit(
        beta=beta,
        beta_cov=s * np.linalg.inv(XHX),
        Q_star=s * Lu @ Lu.T,
        R_star=s * Lv @ Lv.T,
        s=float(s),
        blups_u=u,
        blups_v=v,
        reml_deviance=float(dev),
        singular=_singular(Lu, Lv, opts.singular_tol),
        subject_labels=list(design.subject_labels),
        group_labels=list(design.group_labels),
        lambda_u=Lu,
        lambda_v=Lv,
        x_names=design.x_names,
        converged=converged,
        n_evals=n_evals,
        start_deviances=start_devs,
    )


def _optimise(fun, fun_grad, x0, opts: RemlOptions, diag_mask: np.ndarray) -> tuple:
    """L-BFGS-B with the analytic gradient; Nelder-Mead takes over if it stops abnormally.

    Log-diagonals are bounded below so vanishing variance components stay
    finite; such components end far below the singularity threshold and are
    snapped to zero afterwards.
    """
    bounds = [(LOG_DIAG_MIN, LOG_DIAG_MAX) if d else (None, None) for d in diag_mask]
    x0 = np.clip(x0, LOG_DIAG_MIN, np.where(diag_mask, LOG_DIAG_MAX, np.inf))
    f0 = fun(x0)
    res = minimize(fun_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxfun": opts.max_iter, "maxiter": opts.max_iter, "ftol": 1e-14, "gtol": opts.tol})
    total = int(res.nfev)
    x, f = (res.x, float(res.fun)) if np.isfinite(res.fun) and res.fun <= f0 else (x0, float(f0))
    ok = bool(res.success) or (np.isfinite(res.fun) and "ABNORMAL" in str(res.message))
    if not res.success and total < opts.max_iter:
        nm = minimize(fun, x, method="Nelder-Mead",
                      options={"xatol": opts.tol, "fatol": opts.tol, "maxfev": opts.max_iter - total,
                               "adaptive": x.size > 4})
        total += int(nm.nfev)
        if nm.fun <= f:
            x, f = nm.x, float(nm.fun)
        ok = ok or bool(nm.success)
    return x, f, total, ok and total < opts.max_iter


def _newton_polish(fun_grad, x, f, diag_mask, steps: int = 6, h: float = 1e-5) -> tuple:
    """A few Newton steps with a finite-difference Hessian of the analytic gradient.

    Quasi-Newton runs stop where the criterion is flat to machine precision but
    the parameters are only accurate to about 1e-7; this sharpens interior
    optima.  Coordinates pinned at the log-diagonal lower bound are held fixed.
    """
    free = ~(diag_mask & (x <= LOG_DIAG_MIN + 1.0))
    if not free.any():
        return x, f
    idx = np.flatnonzero(free)
    for _ in range(steps):
        _, g = fun_grad(x)
        H = np.empty((idx.size, idx.size))
        for c, i in enumerate(idx):
            e = np.zeros_like(x)
            e[i] = h
            H[:, c] = (fun_grad(x + e)[1][idx] - fun_grad(x - e)[1][idx]) / (2 * h)
        H = 0.5 * (H + H.T)
        try:
            if np.linalg.eigvalsh(H)[0] <= 0:
                break
            step = np.linalg.solve(H, g[idx])
        except np.linalg.LinAlgError:
            break
        trial = x.copy()
        trial[idx] -= step
        trial = np.clip(trial, np.where(diag_mask, LOG_DIAG_MIN, -np.inf), np.where(diag_mask, LOG_DIAG_MAX, np.inf))
        f_new = fun_grad(trial)[0]
        if not np.isfinite(f_new) or f_new > f + 1e-10 * max(1.0, abs(f)):
            break
        x, f = trial, min(f, f_new)
        if np.max(np.abs(step)) < 1e-10:
            break
    return x, f


def _snap_boundary(blocks, Lu, Lv, dev, pu, pv):
    """Set vanishing Cholesky diagonals to exactly zero when that does not worsen the criterion."""
    for L in (Lu, Lv):
        for i in range(L.shape[0]):
            if 0 < L[i, i] < 1e-3:
                trial = L.copy()
                trial[i, i] = 0.0
                Lu_t, Lv_t = (trial, Lv) if L is Lu else (Lu, trial)
                try:
                    d = blocks.criterion(Lu_t, Lv_t)
                except np.linalg.LinAlgError:
                    continue
                if d <= dev + 1e-6:
                    L[i, i] = 0.0
                    dev = min(dev, d)
    return Lu, Lv, dev


# -- diagnostics ------------------------------------------------------------------------------
def conditional_residuals(fit: ScoreLmmFit, design: LongDesign) -> np.ndarray:
    u = fit.blups_u[design.subject_index]
    v = fit.blups_v[design.group_index] if design.D_v else 0.0
    r = design.response - design.X @ fit.beta - np.sum(design.Z_u * u, axis=1)
    if design.D_v:
        r = r - np.sum(design.Z_v * v, axis=1)
    return r


def residual_diagnostics(fit: ScoreLmmFit, design: LongDesign, max_lag: int) -> dict:
    """Pooled within-group residual ACF and normal Q-Q data for residuals and BLUPs.

    The ACF at lag ``h`` is the mean product of residuals ``h`` strides apart
    within a subject-side (ordered by longitudinal time) divided by the mean
    squared residual.
    """
    r = conditional_residuals(fit, design)
    order = np.lexsort((design.long_time, design.group_index))
    groups = design.group_index[order]
    r_sorted = r[order]
    bounds = np.flatnonzero(np.diff(groups)) + 1
    seqs = np.split(r_sorted, bounds)
    shortest = min(len(s) for s in seqs)
    if max_lag >= shortest:
        logger.warning("max_lag %d truncated to %d (shortest group)", max_lag, shortest - 1)
        max_lag = shortest - 1
    num = np.zeros(max_lag + 1)
    cnt = np.zeros(max_lag + 1)
    for seq in seqs:
        for h in range(max_lag + 1):
            prod = seq[h:] * seq[: seq.size - h]
            num[h] += prod.sum()
            cnt[h] += prod.size
    gamma = num / cnt
    acf = gamma / gamma[0]

    def qq(x):
        x = np.sort(np.asarray(x, dtype=float).reshape(-1))
        probs = (np.arange(1, x.size + 1) - 0.5) / x.size
        return np.column_stack([stats.norm.ppf(probs), x])

    return {
        "acf": acf,
        "n_pairs": cnt,
        "resid_quantiles": qq(r),
        "blup_quantiles": {
            "subject": [qq(fit.blups_u[:, d]) for d in range(fit.blups_u.shape[1])],
            "side": [qq(fit.blups_v[:, d]) for d in range(fit.blups_v.shape[1])],
        },
    }
