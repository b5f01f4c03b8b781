import numpy as np
import pytest

from mvlfmm.basis import bspline_basis
from mvlfmm.datamodel import CovariateTable, MvCurve, MvLongDataset
from mvlfmm.lmm import CovSpec, LevelSpec, ScoreLmmFit
from mvlfmm.longitudinal import constant_only, polynomial_system
from mvlfmm.model import MvLfmmFit
from mvlfmm.mvfpca import MvFpcaModel

GRID = np.linspace(0.0, 100.0, 101)
DIMS = ("hip", "knee", "ankle")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(values, subject_ids, sides, strides, long_time, covariates=None, grid=None, dim_names=None):
    """Dataset with zero-valued single covariate unless a table is given."""
    values = np.asarray(values, dtype=float)
    if grid is None:
        grid = np.linspace(0.0, 100.0, values.shape[2])
    if dim_names is None:
        dim_names = DIMS[: values.shape[1]] if values.shape[1] <= 3 else [f"d{p}" for p in range(values.shape[1])]
    if covariates is None:
        keys = set(zip(map(str, subject_ids), map(str, sides)))
        covariates = CovariateTable(("x1",), {k: [0.0] for k in keys})
    return MvLongDataset(values, grid, subject_ids, sides, strides, long_time, covariates, tuple(dim_names))


def balanced_keys(n_subjects, n_strides):
    sids, sides, strides, T = [], [], [], []
    for i in range(n_subjects):
        for side in ("left", "right"):
            for l in range(1, n_strides + 1):
                sids.append(f"s{i + 1:03d}")
                sides.append(side)
                strides.append(l)
                T.append((l - 1) / max(n_strides - 1, 1))
    return np.array(sids, dtype=object), np.array(sides, dtype=object), np.array(strides), np.array(T)


def random_psd(rng, d, rank=None):
    A = rng.normal(size=(d, rank or d))
    return A @ A.T


def orthonormal_fpca(rng, K, P=3, n_basis=12, grid=GRID):
    """MvFpcaModel with random eigenfunctions orthonormal in the Gram inner product."""
    from mvlfmm.basis import gram_matrix

    basis = bspline_basis(n_basis, 4, (float(grid[0]), float(grid[-1])))
    W = np.kron(np.eye(P), gram_matrix(basis))
    L = np.linalg.cholesky(W)
    Q, _ = np.linalg.qr(rng.normal(size=(P * n_basis, K)))
    coefs = np.linalg.solve(L.T, Q).T
    lam = np.sort(rng.uniform(1.0, 10.0, K))[::-1]
    mean = MvCurve(rng.normal(size=(P, grid.size)), grid)
    return MvFpcaModel(mean, coefs, lam, np.cumsum(lam) / lam.sum(), basis, DIMS[:P], lam.copy())


def synthetic_fit(rng, K, D, P=3, subjects=("a", "b"), side_level=True, fpca=None, A=2):
    """MvLfmmFit assembled from random PSD covariances and random BLUPs."""
    fpca = fpca or orthonormal_fpca(rng, K, P)
    lb = constant_only() if D == 1 else polynomial_system(D - 1)
    spec = LevelSpec("unstructured", tuple(range(D)))
    cs = CovSpec(spec, spec if side_level else None)
    groups = [(s, j) for s in subjects for j in ("left", "right")]
    fits = []
    for _ in range(K):
        Q = random_psd(rng, D)
        R = random_psd(rng, D) if side_level else np.zeros((0, 0))
        Dv = D if side_level else 0
        fits.append(
            ScoreLmmFit(
                beta=rng.normal(size=D + A),
                beta_cov=np.diag(rng.uniform(0.1, 1.0, D + A)),
                Q_star=Q,
                R_star=R,
                s=float(rng.uniform(0.5, 2.0)),
                blups_u=rng.normal(size=(len(subjects), D)),
                blups_v=rng.normal(size=(len(groups), Dv)),
                reml_deviance=0.0,
                singular=False,
                subject_labels=list(subjects),
                group_labels=groups,
                lambda_u=np.eye(D),
                lambda_v=np.eye(Dv),
            )
        )
    return MvLfmmFit(fpca, lb, (cs,) * K, tuple(fits), tuple(f"x{a + 1}" for a in range(A)))


# -- acceptance report ----------------------------------------------------------------------------
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
