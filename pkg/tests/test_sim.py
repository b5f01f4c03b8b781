from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mvlfmm.basis import gram_matrix
from mvlfmm.longitudinal import polynomial_system
from mvlfmm.sim import (
    METRIC_COLUMNS,
    GeneratorParams,
    ScenarioConfig,
    default_params,
    draw_smooth_noise,
    generate_dataset,
    ise_fixed,
    ispe,
    marginal_score_covariance,
    named_scenario,
    rotated_basis,
    rotation_from_covariance,
    run_replicate,
    scale_strength,
)


@pytest.fixture(scope="module")
def params():
    return default_params()


def quiet(params):
    """No random effects, no residual score noise and (numerically) no smooth noise."""
    z = np.zeros_like(params.Q_diag)
    return replace(params, Q_diag=z, R_diag=z, s=np.zeros_like(params.s), noise={"l": 0.25, "sigma": 0.0})


def test_default_params_shapes_and_orthonormality(params):
    assert params.basis_coefs.shape[0] == 10
    assert params.beta0.shape == (10, 3) and params.betaA.shape == (10, 2)
    assert params.Q_diag.shape == (10, 3) and params.R_diag.shape == (10, 3)
    W = np.kron(np.eye(3), gram_matrix(params.basis))
    C = params.basis_coefs
    np.testing.assert_allclose(C @ W @ C.T, np.eye(10), atol=1e-6)
    assert params.noise == {"l": 0.25, "sigma": 0.9}


def test_params_reject_non_orthonormal(params):
    with pytest.raises(ValueError):
        replace(params, basis_coefs=params.basis_coefs * 2)
    with pytest.raises(ValueError):
        replace(params, s=-params.s)


def test_params_round_trip(params, tmp_path):
    params.save(tmp_path / "p.json")
    back = GeneratorParams.load(tmp_path / "p.json")
    for name in ("grid", "mean", "basis_coefs", "beta0", "betaA", "Q_diag", "R_diag", "s"):
        np.testing.assert_array_equal(getattr(back, name), getattr(params, name))
    np.testing.assert_array_equal(back.psi(), params.psi())


def test_tiny_dataset_counts(params):
    train, test, truth = generate_dataset(params, ScenarioConfig(n_subjects=2, n_per_side=4, missing_prop=0.0), 0)
    assert train.n_total == 16
    assert test.n_total == 0
    assert train.values.shape == (16, 3, 101)
    assert truth.scores.shape == (16, 10)


def test_missing_and_test_split(params):
    scen = ScenarioConfig(n_subjects=5, n_per_side=20, missing_prop=0.5, test_per_side=4)
    train, test, _ = generate_dataset(params, scen, 3)
    assert train.n_total == 5 * 2 * 10
    assert test.n_total == 5 * 2 * 4
    kt = set(zip(train.subject_ids, train.sides, train.strides))
    assert not kt & set(zip(test.subject_ids, test.sides, test.strides))


def test_generation_deterministic(params):
    scen = ScenarioConfig(n_subjects=3, n_per_side=5, seed=11)
    a = generate_dataset(params, scen, 2)[0]
    b = generate_dataset(params, scen, 2)[0]
    c = generate_dataset(params, scen, 3)[0]
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_smooth_noise_variance():
    # sigma^2 times the standard normal density at zero
    grid = np.linspace(0, 100, 101)
    noise = draw_smooth_noise(np.random.default_rng(0), (10_000,), grid)
    expected = 0.9**2 * stats.norm.pdf(0.0)
    assert expected == pytest.approx(0.323143, abs=1e-6)
    assert noise.var(axis=0).mean() == pytest.approx(expected, rel=0.05)
    lag = 4
    emp = np.mean(noise[:, :-lag] * noise[:, lag:])
    assert emp == pytest.approx(0.81 * stats.norm.pdf(0.25 * lag), rel=0.05)


def test_noiseless_curves_equal_truth(params):
    p = quiet(params)
    scen = ScenarioConfig(n_subjects=3, n_per_side=101, missing_prop=0.0)
    train, _, truth = generate_dataset(p, scen, 0)
    x = train.covariate_matrix(["x1", "x2"])
    idx = np.round(train.long_time * 100).astype(int)
    expected = truth.intercept[:, :, idx].transpose(2, 0, 1) + np.einsum("na,apg->npg", x, truth.effects)
    np.testing.assert_allclose(train.values, expected, atol=1e-6 * np.abs(expected).max())


def test_linear_in_covariates_without_effects(params):
    # with betaA = 0 the generated curves no longer depend on the covariates at all
    p = replace(quiet(params), betaA=np.zeros_like(params.betaA))
    train, _, truth = generate_dataset(p, ScenarioConfig(n_subjects=4, n_per_side=3, missing_prop=0.0), 1)
    assert np.all(truth.effects == 0)
    first = train.values[train.subject_ids == "s0001"]
    for sid in train.subjects[1:]:
        # sigma = 0 leaves only the 1e-10 jitter of the noise kernel
        np.testing.assert_allclose(train.values[train.subject_ids == sid], first, rtol=0, atol=1e-3)


def test_true_intercept_uses_closed_form_basis(params):
    T = np.linspace(0, 1, 101)
    xi = polynomial_system(2, 101).fixed(T)
    np.testing.assert_allclose(xi[:, 1], (T - 0.5) / np.sqrt(8.585), atol=1e-3)
    np.testing.assert_allclose(xi[:, 2], ((T - 0.5) ** 2 - 8.585 / 101) / np.sqrt(0.5836083), atol=1e-3)


def test_scale_strength(params):
    p = replace(params, Q_diag=np.tile([9.0, 4.0, 1.0], (10, 1)))
    out = scale_strength(p, 2.0)
    np.testing.assert_array_equal(out.Q_diag[0], [9.0, 16.0, 4.0])
    np.testing.assert_array_equal(out.R_diag[:, 0], params.R_diag[:, 0])
    same = scale_strength(params, 1.0)
    np.testing.assert_array_equal(same.Q_diag, params.Q_diag)
    np.testing.assert_array_equal(same.R_diag, params.R_diag)
    with pytest.raises(ValueError):
        scale_strength(params, 0.5)


def test_ise_constant_offset():
    truth = np.zeros((3, 101))
    assert ise_fixed(truth + 1.0, truth, "covariate_curve") == pytest.approx(3.0)
    surf = np.zeros((3, 101, 11))
    assert ise_fixed(surf + 1.0, surf, "intercept_surface") == pytest.approx(3.0)
    assert ise_fixed(truth, truth, "covariate_curve") == 0.0
    with pytest.raises(ValueError):
        ise_fixed(truth, np.zeros((3, 51)), "covariate_curve")
    with pytest.raises(ValueError):
        ise_fixed(truth, truth, "other")


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 2**31))
def test_error_metrics_scale_quadratically(c, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 101))
    base = ise_fixed(a, b, "covariate_curve")
    assert ise_fixed(c * a, c * b, "covariate_curve") == pytest.approx(c**2 * base, rel=1e-10, abs=1e-12)
    assert ispe(c * a, c * b) == pytest.approx(c**2 * ispe(a, b), rel=1e-10, abs=1e-12)
    assert ispe(a, b) == pytest.approx(base, rel=1e-12)


def test_ispe_vectorised():
    a = np.ones((4, 3, 101))
    out = ispe(a, np.zeros_like(a))
    np.testing.assert_allclose(out, 3.0)


def test_marginal_covariance_structure(params):
    zero = replace(params, beta0=np.zeros_like(params.beta0), betaA=np.zeros_like(params.betaA))
    C = marginal_score_covariance(zero, 100_000, seed=0)
    d = np.sqrt(np.diag(C))
    R = C / np.outer(d, d)
    assert np.abs(R[~np.eye(10, dtype=bool)]).max() < 0.02
    C2 = marginal_score_covariance(params, 100_000, seed=0)
    d2 = np.sqrt(np.diag(C2))
    assert np.abs((C2 / np.outer(d2, d2))[~np.eye(10, dtype=bool)]).max() > 0.05
    with pytest.raises(ValueError):
        marginal_score_covariance(params, 10, seed=0)


def test_rotation_identity_for_diagonal_covariance(params):
    V = rotation_from_covariance(np.diag(np.arange(10, 0, -1.0)))
    np.testing.assert_array_equal(V, np.eye(10))
    np.testing.assert_array_equal(rotated_basis(params.basis_coefs, V), params.basis_coefs)


def test_rotation_sign_and_order(rng):
    A = rng.normal(size=(5, 5))
    V = rotation_from_covariance(A @ A.T)
    lam = np.einsum("ik,ij,jk->k", V, A @ A.T, V)
    assert np.all(np.diff(lam) <= 1e-10)
    pick = np.argmax(np.abs(V), axis=0)
    assert np.all(V[pick, range(5)] > 0)


def test_run_replicate_rows(params):
    scen = ScenarioConfig(n_subjects=10, n_per_side=6, models=("naive", "polynomial"), pve=0.95,
                          n_restarts=0, record_timing=False)
    rows = run_replicate(params, scen, 0)
    assert [r["model"] for r in rows] == ["naive", "polynomial"]
    for r in rows:
        assert list(r) == METRIC_COLUMNS
        assert r["fit_s"] == 0.0 and r["fpca_s"] == 0.0
        assert np.isfinite(r["mean_ispe"]) and r["ise_beta0"] >= 0
    assert rows == run_replicate(params, scen, 0)


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(models=("bogus",))
    with pytest.raises(ValueError):
        ScenarioConfig(missing_prop=1.0)
    with pytest.raises(ValueError):
        ScenarioConfig(n_subjects=0)


def test_named_scenarios():
    assert named_scenario("baseline") == ScenarioConfig(name="baseline")
    assert named_scenario("n500").n_subjects == 500
    s = named_scenario("strength3", n_subjects=20)
    assert (s.strength, s.n_subjects, s.missing_prop) == (3.0, 20, 0.1)
