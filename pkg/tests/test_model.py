from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GRID, orthonormal_fpca, synthetic_fit
from mvlfmm.basis import bspline_basis, constant_basis, trapezoid_weights
from mvlfmm.datamodel import CovariateTable, DataError, MvCurve, ObservationKey
from mvlfmm.lmm import NAIVE, RemlOptions
from mvlfmm.longitudinal import constant_only, polynomial_system, spline_system
from mvlfmm.model import (
    MvLfmmFit,
    bootstrap_fixed_effects,
    change_metrics,
    covariance_surface,
    fit_model,
    fixed_effect_curve,
    implied_covariance,
    intercept_surface,
    load_bundle,
    longitudinal_coefficient_curves,
    model_pointwise_band,
    pointwise_band,
    predict_curve,
    predict_dataset,
    save_bundle,
    simultaneous_band,
    subject_trajectory,
)
from mvlfmm.mvfpca import MvFpcaModel
from mvlfmm.sim import ScenarioConfig, default_params, generate_dataset, variant_setup

FAST = RemlOptions(n_restarts=0)


# -- covariance algebra -----------------------------------------------------------------------------
def brute_force_covariance(fit, level, t, t2, T, T2):
    """Quadruple sum over k, d, d' of Cov(u_kd, u_kd') xi_d(T) xi_d'(T') psi_k(t) psi_k(t')^T."""
    P = fit.fpca.n_dims
    out = np.zeros((P, P))
    psi1 = fit.fpca.psi(np.array([t]))[:, :, 0]
    psi2 = fit.fpca.psi(np.array([t2]))[:, :, 0]
    for k, f in enumerate(fit.fits):
        if level == "error":
            w = f.s
        else:
            G = f.Q_star if level == "subject" else f.R_star
            z1 = fit.random_design(np.array([T]), level, k)[0]
            z2 = fit.random_design(np.array([T2]), level, k)[0]
            w = 0.0
            for d in range(G.shape[0]):
                for e in range(G.shape[1]):
                    w += G[d, e] * z1[d] * z2[e]
        for p in range(P):
            for q in range(P):
                out[p, q] += w * psi1[k, p] * psi2[k, q]
    return out


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(0, 2**31),
    st.sampled_from(["subject", "side", "error"]),
)
def test_covariance_surface_brute_force(K, D, seed, level):
    rng = np.random.default_rng(seed)
    fit = synthetic_fit(rng, K, D)
    t, t2 = rng.uniform(0, 100, 2)
    T, T2 = rng.uniform(0, 1, 2)
    ref = brute_force_covariance(fit, level, t, t2, T, T2)
    got = covariance_surface(fit, level, t, t2, T, T2)
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-10 * np.abs(ref).max())


def test_error_covariance_single_entry():
    basis = constant_basis((0.0, 100.0))
    c = 0.7
    fpca = MvFpcaModel(MvCurve(np.zeros((3, 101)), GRID), np.array([[c, 0.0, 0.0]]), np.ones(1), np.ones(1), basis,
                       ("hip", "knee", "ankle"), np.ones(1))
    fit = synthetic_fit(np.random.default_rng(0), 1, 1, fpca=fpca)
    fit = replace(fit, fits=(replace(fit.fits[0], s=2.0),))
    S = covariance_surface(fit, "error", 10.0, 60.0)
    expected = np.zeros((3, 3))
    expected[0, 0] = 2 * c**2
    np.testing.assert_allclose(S, expected, atol=1e-15)


def test_covariance_symmetry(rng):
    fit = synthetic_fit(rng, 3, 3)
    for _ in range(5):
        t, t2 = rng.uniform(0, 100, 2)
        T, T2 = rng.uniform(0, 1, 2)
        for level in ("subject", "side"):
            np.testing.assert_allclose(covariance_surface(fit, level, t, t2, T, T2),
                                       covariance_surface(fit, level, t2, t, T2, T).T, atol=1e-12)


def test_implied_covariance_cases(rng):
    fit = synthetic_fit(rng, 2, 3)
    k1 = ObservationKey("a", "left", 3, 0.4)
    t, t2 = 20.0, 70.0
    assert np.all(implied_covariance(fit, k1, ObservationKey("b", "left", 3, 0.4), t, t2) == 0.0)
    total = sum(covariance_surface(fit, lv, t, t2, 0.4, 0.4) for lv in ("subject", "side", "error"))
    np.testing.assert_allclose(implied_covariance(fit, k1, k1, t, t2), total, atol=1e-12)
    other_side = ObservationKey("a", "right", 5, 0.4)
    np.testing.assert_allclose(implied_covariance(fit, k1, other_side, t, t2),
                               covariance_surface(fit, "subject", t, t2, 0.4, 0.4), atol=1e-15)
    same_side = ObservationKey("a", "left", 4, 0.6)
    np.testing.assert_allclose(
        implied_covariance(fit, k1, same_side, t, t2),
        covariance_surface(fit, "subject", t, t2, 0.4, 0.6) + covariance_surface(fit, "side", t, t2, 0.4, 0.6),
        atol=1e-12,
    )


# -- fixed effects ---------------------------------------------------------------------------------
def constant_psi_fit(beta_a, var_a=0.0):
    basis = constant_basis((0.0, 100.0))
    fpca = MvFpcaModel(MvCurve(np.zeros((3, 101)), GRID), np.array([[0.1, 0.2, 0.3]]), np.ones(1), np.ones(1), basis,
                       ("hip", "knee", "ankle"), np.ones(1))
    fit = synthetic_fit(np.random.default_rng(1), 1, 1, fpca=fpca, A=1)
    f = fit.fits[0]
    beta = f.beta.copy()
    beta[1] = beta_a
    cov = f.beta_cov.copy()
    cov[1, 1] = var_a
    return replace(fit, fits=(replace(f, beta=beta, beta_cov=cov),))


def test_fixed_effect_single_term():
    est, var = fixed_effect_curve(constant_psi_fit(2.0), 0)
    np.testing.assert_allclose(est, np.array([0.2, 0.4, 0.6])[:, None] * np.ones(101), atol=1e-14)
    np.testing.assert_array_equal(var, 0.0)
    lo, hi = model_pointwise_band(est, var)
    np.testing.assert_array_equal(lo, hi)


def test_fixed_effect_zero_coefficients():
    est, var = fixed_effect_curve(constant_psi_fit(0.0), 0)
    assert np.all(est == 0.0) and np.all(var == 0.0)


def test_fixed_effect_variance_combination():
    est, var = fixed_effect_curve(constant_psi_fit(1.0, var_a=4.0), 0)
    np.testing.assert_allclose(var[:, 0], 4.0 * np.array([0.01, 0.04, 0.09]))
    with pytest.raises(IndexError):
        fixed_effect_curve(constant_psi_fit(1.0), 3)


def test_intercept_surface_brute_force(rng):
    fit = synthetic_fit(rng, 3, 3)
    T = np.linspace(0, 1, 7)
    t = np.linspace(0, 100, 11)
    surf = intercept_surface(fit, t, T)
    psi = fit.fpca.psi(t)
    xi = fit.long_basis.fixed(T)
    ref = np.zeros_like(surf)
    for k, f in enumerate(fit.fits):
        for d in range(fit.D):
            ref += f.beta[d] * xi[None, None, :, d] * psi[k][:, :, None]
    np.testing.assert_allclose(surf, ref, rtol=1e-12, atol=1e-12)


def test_intercept_constant_basis_constant_in_T(rng):
    fit = synthetic_fit(rng, 2, 1)
    surf = intercept_surface(fit)
    np.testing.assert_allclose(surf, surf[:, :, :1] * np.ones(surf.shape[2]), atol=1e-14)


def test_intercept_only_first_coefficient(rng):
    fit = synthetic_fit(rng, 2, 3)
    fits = []
    for f in fit.fits:
        b = f.beta.copy()
        b[1:3] = 0.0
        fits.append(replace(f, beta=b))
    fit = replace(fit, fits=tuple(fits))
    surf = intercept_surface(fit)
    np.testing.assert_allclose(surf, surf[:, :, :1] * np.ones(surf.shape[2]), atol=1e-13)


def test_longitudinal_coefficients_reconstruct_surface(rng):
    fit = synthetic_fit(rng, 3, 3)
    est, var = longitudinal_coefficient_curves(fit)
    T = np.linspace(0, 1, 9)
    xi = fit.long_basis.fixed(T)
    np.testing.assert_allclose(np.einsum("dpg,Td->pgT", est, xi), intercept_surface(fit, T=T), atol=1e-12)
    assert np.all(var >= 0)


def test_longitudinal_coefficients_single_curve(rng):
    fit = synthetic_fit(rng, 2, 1)
    est, _ = longitudinal_coefficient_curves(fit)
    np.testing.assert_allclose(est[0], intercept_surface(fit, T=[0.3])[:, :, 0], atol=1e-13)


# -- bands --------------------------------------------------------------------------------------------
def test_band_collapses_without_spread():
    point = np.arange(6.0).reshape(2, 3)
    boot = np.broadcast_to(point, (20, 2, 3))
    band = simultaneous_band(point, boot)
    np.testing.assert_array_equal(band["lower"], point)
    np.testing.assert_array_equal(band["upper"], point)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(5, 60))
def test_band_nesting_and_monotonicity(seed, B):
    rng = np.random.default_rng(seed)
    point = rng.normal(size=(3, 12))
    boot = point + rng.normal(size=(B, 3, 12)) * rng.uniform(0.1, 2.0, (3, 12))
    sim95, pw95 = simultaneous_band(point, boot, 0.95), pointwise_band(point, boot, 0.95)
    sim50 = simultaneous_band(point, boot, 0.5)
    assert np.all(sim95["upper"] - sim95["lower"] >= pw95["upper"] - pw95["lower"] - 1e-12)
    assert np.all(sim95["upper"] - sim95["lower"] >= sim50["upper"] - sim50["lower"] - 1e-12)


# -- prediction ---------------------------------------------------------------------------------------
def test_unseen_subject_prediction(rng):
    fit = synthetic_fit(rng, 3, 3)
    x = np.array([1.0, -0.5])
    key = ObservationKey("zzz", "left", 1, 0.3)
    pred = predict_curve(fit, key, x).values
    beta0 = intercept_surface(fit, T=[0.3])[:, :, 0]
    effects = sum(x[a] * fixed_effect_curve(fit, a)[0] for a in range(2))
    np.testing.assert_allclose(pred, fit.fpca.mean.values + beta0 + effects, atol=1e-12)


def test_prediction_zero_covariates_zero_blups(rng):
    fit = synthetic_fit(rng, 3, 3)
    fits = tuple(replace(f, blups_u=np.zeros_like(f.blups_u), blups_v=np.zeros_like(f.blups_v)) for f in fit.fits)
    fit = replace(fit, fits=fits)
    pred = predict_curve(fit, ObservationKey("a", "right", 2, 0.8), np.zeros(2)).values
    np.testing.assert_allclose(pred, fit.fpca.mean.values + intercept_surface(fit, T=[0.8])[:, :, 0], atol=1e-12)


def test_prediction_includes_blups(rng):
    fit = synthetic_fit(rng, 2, 3)
    key = ObservationKey("a", "right", 2, 0.8)
    x = np.array([0.3, 0.1])
    pop = predict_curve(fit, ObservationKey("new", "right", 2, 0.8), x).values
    pred = predict_curve(fit, key, x).values
    traj = subject_trajectory(fit, "a", "right", [0.8])[0]
    np.testing.assert_allclose(pred, pop + traj, atol=1e-12)


def test_trajectory_brute_force(rng):
    fit = synthetic_fit(rng, 3, 3)
    T = np.linspace(0, 1, 5)
    got = subject_trajectory(fit, "b", "left", T)
    ref = np.zeros_like(got)
    for k, f in enumerate(fit.fits):
        zu = fit.random_design(T, "subject", k)
        zv = fit.random_design(T, "side", k)
        u = f.blup_u("b")
        v = f.blup_v("b", "left")
        for i in range(T.size):
            ref[i] += (sum(zu[i, d] * u[d] for d in range(3)) + sum(zv[i, d] * v[d] for d in range(3))) * fit.fpca.psi_grid[k]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_trajectory_naive_constant_and_zero(rng):
    fit = synthetic_fit(rng, 2, 1)
    traj = subject_trajectory(fit, "a", "left")
    np.testing.assert_allclose(traj, traj[:1] * np.ones((traj.shape[0], 1, 1)), atol=1e-14)
    fits = tuple(replace(f, blups_u=np.zeros_like(f.blups_u), blups_v=np.zeros_like(f.blups_v)) for f in fit.fits)
    assert np.all(subject_trajectory(replace(fit, fits=fits), "a", "left") == 0.0)
    with pytest.raises(DataError):
        subject_trajectory(fit, "nobody")


def linear_profile_fit(slope=3.0, offset=0.0):
    """K = 1, psi_1 scaled so (1/100) sum_p int psi^2 dt = 1, subject profile offset + slope * T."""
    rng = np.random.default_rng(2)
    fpca = orthonormal_fpca(rng, 1)
    norm2 = np.sum(fpca.psi_grid[0] ** 2 * trapezoid_weights(GRID)) / 100.0
    fpca = replace(fpca, eig_coefs=fpca.eig_coefs / np.sqrt(norm2))
    fit = synthetic_fit(rng, 1, 2, fpca=fpca, side_level=False, subjects=("a",))
    xi = fit.long_basis.fixed(np.array([0.0, 1.0]))
    a = np.linalg.solve(xi, [offset, offset + slope])
    return replace(fit, fits=(replace(fit.fits[0], blups_u=a[None, :]),))


def test_change_metrics_linear_profile():
    m = change_metrics(linear_profile_fit(), "a", "left")
    assert m["isd"] == pytest.approx(9.0, rel=1e-8)
    assert m["overall_change"] == pytest.approx(3.0, rel=1e-8)


def test_change_metrics_constant_profile():
    m = change_metrics(linear_profile_fit(slope=0.0, offset=2.0), "a", "left")
    assert m["isd"] == pytest.approx(0.0, abs=1e-20)
    assert m["overall_change"] == pytest.approx(0.0, abs=1e-12)


def test_change_metrics_offset_invariance():
    a = change_metrics(linear_profile_fit(slope=1.5), "a", "left")["isd"]
    b = change_metrics(linear_profile_fit(slope=1.5, offset=4.0), "a", "left")["isd"]
    assert a == pytest.approx(b, rel=1e-12)


# -- fitting on generated data -------------------------------------------------------------------
@pytest.fixture(scope="module")
def small_data():
    params = default_params()
    scen = ScenarioConfig(n_subjects=12, n_per_side=8, missing_prop=0.25, test_per_side=2, seed=9)
    return generate_dataset(params, scen, 0), params


def test_naive_fit_single_random_columns(small_data):
    (train, _, _), params = small_data
    fit = fit_model(train, ["x1", "x2"], spline_system(3), NAIVE, {"k": 3}, basis=params.basis, opts=FAST)
    assert fit.K == 3
    assert all(f.Q_star.shape == (1, 1) and f.R_star.shape == (1, 1) for f in fit.fits)
    assert fit.singular_flags == fit.metadata["singular"]


def test_mlfpca_path_diagonal(small_data):
    (train, _, _), params = small_data
    lb, cs, _ = variant_setup("mlfpca")
    fit = fit_model(train, ["x1", "x2"], lb, cs, {"k": 2}, basis=params.basis, opts=FAST, mlfpca=True, mlfpca_pve=0.9)
    assert set(fit.long_basis.per_k) == {0, 1}
    for k, spec in enumerate(fit.covspecs):
        assert spec.subject.structure == "diagonal" and spec.side.structure == "diagonal"
        Q = fit.fits[k].Q_star
        np.testing.assert_array_equal(Q, np.diag(np.diag(Q)))


def test_fit_deterministic_and_bundle_round_trip(small_data, tmp_path):
    (train, test, _), params = small_data
    lb, cs, _ = variant_setup("polynomial")
    a = fit_model(train, ["x1", "x2"], lb, cs, {"pve": 0.95}, basis=params.basis, opts=RemlOptions(n_restarts=1))
    b = fit_model(train, ["x1", "x2"], lb, cs, {"pve": 0.95}, basis=params.basis, opts=RemlOptions(n_restarts=1))
    for fa, fb in zip(a.fits, b.fits):
        np.testing.assert_array_equal(fa.beta, fb.beta)
        np.testing.assert_array_equal(fa.blups_v, fb.blups_v)
    save_bundle(a, tmp_path / "x")
    back = load_bundle(tmp_path / "x")
    va, sa = predict_dataset(a, test)
    vb, sb = predict_dataset(back, test)
    np.testing.assert_allclose(vb, va, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(sa, sb)
    assert sa.all()
    with pytest.raises(DataError):
        load_bundle(tmp_path / "missing")


def test_predict_dataset_matches_predict_curve(small_data):
    (train, test, _), params = small_data
    lb, cs, _ = variant_setup("spline")
    fit = fit_model(train, ["x1", "x2"], lb, cs, {"k": 3}, basis=params.basis, opts=FAST)
    values, _ = predict_dataset(fit, test)
    for i in range(0, test.n_total, 7):
        key = test.keys[i]
        x = test.covariates.row(key.subject_id, key.side)
        np.testing.assert_allclose(values[i], predict_curve(fit, key, x).values, atol=1e-10)


def _one_subject(train):
    sub = train.take(train.subject_ids == train.subjects[0])
    sid = sub.subjects[0]
    table = CovariateTable(("x1",), {(sid, "left"): [0.0], (sid, "right"): [1.0]})
    return replace(sub, covariates=table)


def test_bootstrap_single_subject_has_no_spread(small_data):
    (train, _, _), params = small_data
    one = _one_subject(train)
    fit = fit_model(one, ["x1"], constant_only(), NAIVE, {"k": 2}, basis=params.basis, opts=FAST)
    boot = bootstrap_fixed_effects(one, fit, 4, seed=1, opts=FAST)
    curves = boot["curves"]
    assert curves.shape[:2] == (1, 4)
    np.testing.assert_allclose(curves.std(axis=1), 0.0, atol=1e-9)


def test_bootstrap_deterministic(small_data):
    (train, _, _), params = small_data
    fit = fit_model(train, ["x1", "x2"], constant_only(), NAIVE, {"k": 2}, basis=params.basis, opts=FAST)
    a = bootstrap_fixed_effects(train, fit, 2, seed=5, opts=FAST)
    b = bootstrap_fixed_effects(train, fit, 2, seed=5, opts=FAST, workers=2)
    np.testing.assert_array_equal(a["curves"], b["curves"])
    assert a["failures"] == 0
    assert not np.array_equal(a["curves"][:, 0], a["curves"][:, 1])


def test_bootstrap_band_coverage():
    # desk-scale Monte Carlo coverage of the simultaneous band for the Gaussian covariate effect
    params = default_params()
    covered = []
    for rep in range(8):
        scen = ScenarioConfig(n_subjects=40, n_per_side=6, missing_prop=0.0, seed=100 + rep)
        train, _, truth = generate_dataset(params, scen, 0)
        fit = fit_model(train, ["x1", "x2"], constant_only(), NAIVE, {"k": 10}, basis=params.basis, opts=FAST)
        boot = bootstrap_fixed_effects(train, fit, 40, seed=rep, opts=FAST)
        est, _ = fixed_effect_curve(fit, 1)
        band = simultaneous_band(est, boot["curves"][1], 0.95)
        covered.append(bool(np.all((truth.effects[1] >= band["lower"]) & (truth.effects[1] <= band["upper"]))))
    assert np.mean(covered) >= 0.75
