import math
import warnings

import numpy as np
import pytest
from scipy.integrate import simpson

from mixbench import gamm, lmm
from mixbench.panel_data import design_matrices
from mixbench.synthetic import telemonitoring_like


def roughness_by_quadrature(basis, alpha):
    """int f''(t)^2 dt with Simpson's rule on each knot interval (exact for piecewise-linear f'')."""
    total = 0.0
    for a, b in zip(basis.knots[:-1], basis.knots[1:]):
        t = np.linspace(a, b, 21)
        f2 = basis.evaluate(t, deriv=2) @ alpha
        total += simpson(f2 ** 2, x=t)
    return total


@pytest.fixture(scope="module")
def basis():
    t = np.random.default_rng(3).uniform(0, 200, size=400)
    return gamm.build_basis(t, K=10)


def test_penalty_matches_quadrature(basis, rng):
    for _ in range(5):
        alpha = rng.normal(size=basis.K)
        np.testing.assert_allclose(alpha @ basis.penalty @ alpha, roughness_by_quadrature(basis, alpha),
                                   rtol=1e-9)


def test_linear_functions_unpenalized(basis):
    alpha = 2.0 - 0.3 * basis.knots
    assert abs(alpha @ basis.penalty @ alpha) < 1e-10


def test_convex_interpolant_penalized(basis):
    alpha = (basis.knots / 100.0) ** 2
    assert alpha @ basis.penalty @ alpha > 0


def test_basis_interpolates_knot_values(basis, rng):
    alpha = rng.normal(size=basis.K)
    np.testing.assert_allclose(basis.evaluate(basis.knots) @ alpha, alpha, atol=1e-12)


def test_basis_reproduces_lines_and_extrapolates_linearly(basis):
    alpha = 1.0 + 0.02 * basis.knots
    t = np.array([-50.0, 0.5, 77.0, 260.0])
    np.testing.assert_allclose(basis.evaluate(t) @ alpha, 1.0 + 0.02 * t, atol=1e-10)


def test_first_derivative_matches_differences(basis, rng):
    alpha = rng.normal(size=basis.K)
    t = np.linspace(basis.knots[0] + 1, basis.knots[-1] - 1, 17)
    h = 1e-5
    num = (basis.evaluate(t + h) - basis.evaluate(t - h)) @ alpha / (2 * h)
    np.testing.assert_allclose(basis.evaluate(t, deriv=1) @ alpha, num, rtol=1e-6, atol=1e-9)


def test_centered_columns_sum_to_zero(rng):
    t = rng.uniform(0, 10, size=300)
    b = gamm.build_basis(t, K=8)
    np.testing.assert_allclose(b.centered(t).sum(axis=0), 0.0, atol=1e-9)


def test_too_few_distinct_times():
    with pytest.raises(ValueError, match="distinct"):
        gamm.build_basis(np.repeat([1.0, 2.0, 3.0], 10), K=10)


# ---------------------------------------------------------------------------
# penalised fit

@pytest.fixture(scope="module")
def panel():
    return telemonitoring_like(n_subjects=15, rows_per_subject=(25, 40), seed=4, smooth_amplitude=0.1)


@pytest.fixture(scope="module")
def design(panel):
    return gamm.gamm_design(panel, ("age",), ("intercept", "test_time"), K=8, response=np.log(panel.response))


THETA = lmm.VarianceComponents(0.1, 0.004, 1e-3, 0.2)


def dense_penalized_beta(design, lam, theta):
    X, Z, y = design.mixed.stacked()
    V = np.zeros((len(y), len(y)))
    start = 0
    for Zi in design.mixed.Z:
        n = len(Zi)
        V[start:start + n, start:start + n] = Zi @ theta.D @ Zi.T + theta.sigma_sq * np.eye(n)
        start += n
    Vi = np.linalg.inv(V)
    A = X.T @ Vi @ X
    return np.linalg.solve(A + lam * design.S_full, X.T @ Vi @ y), A


@pytest.mark.parametrize("lam", [0.0, 0.3, 50.0])
def test_inner_fit_matches_dense(design, lam):
    beta, _ = dense_penalized_beta(design, lam, THETA)
    np.testing.assert_allclose(gamm.fit_gamm(design, lam, THETA).beta, beta, rtol=1e-8, atol=1e-10)


def test_zero_lambda_equals_lmm(design):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", lmm.ConvergenceWarning)
        fit = lmm.fit(design.mixed, "reml")
    inner = gamm.fit_gamm(design, 0.0, fit.theta)
    np.testing.assert_allclose(inner.beta, fit.beta, atol=1e-8)


def test_huge_lambda_gives_affine_smooth(design):
    inner = gamm.fit_gamm(design, 1e12, THETA)
    alpha = inner.beta[design.smooth_slice]
    t = np.linspace(*design.basis.boundary, 200)
    f = design.basis.centered(t) @ alpha
    coef = np.polyfit(t, f, 1)
    assert np.max(np.abs(f - np.polyval(coef, t))) < 1e-4


def test_edf_oracle_and_limits(design):
    K = design.basis.K
    for lam in (0.0, 0.1, 10.0):
        _, A = dense_penalized_beta(design, lam, THETA)
        F = np.linalg.solve(A + lam * design.S_full, A)
        sl = design.smooth_slice
        assert gamm.edf(design, lam, THETA) == pytest.approx(1.0 + np.trace(F[sl, sl]), rel=1e-9)
    assert gamm.edf(design, 0.0, THETA) == pytest.approx(K, abs=1e-8)
    assert gamm.edf(design, 1e12, THETA) == pytest.approx(2.0, abs=1e-3)


def test_edf_decreases_in_lambda(design):
    vals = [gamm.edf(design, lam, THETA) for lam in np.geomspace(1e-4, 1e4, 9)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def r_squared(y, fitted):
    return 1 - np.sum((y - fitted) ** 2) / np.sum((y - y.mean()) ** 2)


def test_smooth_beats_linear_time_on_sinusoid(panel, design):
    y = np.log(panel.response)
    lam, fit = gamm.select_lambda(design)
    g_fit = gamm.predict_linear(fit, panel)
    des = design_matrices(panel, ["age", "test_time"], ("intercept", "test_time"), response=y)
    l_fit = lmm.predict_linear(lmm.fit(des, "reml"), panel)
    assert r_squared(y, g_fit) > r_squared(y, l_fit)
    assert fit.edf > 2.5


# ---------------------------------------------------------------------------
# lambda selection

def linear_trend_panel(seed):
    """Exactly linear population trend with random intercepts and slopes, at benchmark scale."""
    d = telemonitoring_like(n_subjects=42, seed=100 + seed)
    rng = np.random.default_rng(seed)
    t = d.col("test_time") / 100.0
    m, k = len(d.subjects), d.subject_index()
    b0, b1 = rng.normal(0, 0.38, m)[k], rng.normal(0, 0.085, m)[k]
    return d, 3.2 + 0.05 * t + b0 + b1 * t + rng.normal(0, 0.06, d.n_rows)


@pytest.mark.slow
def test_linear_truth_selects_low_edf():
    low = 0
    for seed in range(20):
        d, y = linear_trend_panel(seed)
        des = gamm.gamm_design(d, (), ("intercept", "test_time"), K=10, response=y)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", gamm.LambdaBoundaryWarning)
            warnings.simplefilter("ignore", lmm.ConvergenceWarning)
            _, fit = gamm.select_lambda(des)
        low += fit.edf <= 2.5
    assert low >= 16, f"{low}/20 seeds with edf <= 2.5"


def test_selected_lambda_is_reml_optimum(design):
    lam, fit = gamm.select_lambda(design)
    best = gamm.reml_at(design, lam)[0]
    for f in (0.5, 2.0):
        assert gamm.reml_at(design, lam * f)[0] <= best + 1e-6
    assert fit.loglik == pytest.approx(best, abs=1e-6)


def test_boundary_lambda_warns(design):
    with pytest.warns(gamm.LambdaBoundaryWarning):
        lam, fit = gamm.select_lambda(design, lam_range=(1e-6, 1e-5), n_grid=4)
    assert fit.lambda_at_boundary


# ---------------------------------------------------------------------------
# prediction and output

def test_prediction_at_training_time_equals_smooth(panel, design):
    _, fit = gamm.select_lambda(design)
    fit.beta_linear = np.zeros_like(fit.beta_linear)
    s = panel.subjects[0]
    fit.blups = dict(fit.blups)
    fit.blups[s] = np.zeros(2)
    rows = panel.take(panel.subject_ids == s)
    np.testing.assert_allclose(gamm.predict(fit, rows), fit.smooth(rows.col("test_time")), atol=1e-14)


def test_smooth_csv(tmp_path, design):
    _, fit = gamm.select_lambda(design)
    gamm.write_smooth_csv(fit, tmp_path / "s.csv")
    data = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    assert data.shape == (200, 2)
    np.testing.assert_allclose(data[:, 1], fit.smooth(data[:, 0]))
    assert "edf=" in gamm.report_text(fit)


def test_unseen_subject(panel, design):
    _, fit = gamm.select_lambda(design)
    other = telemonitoring_like(n_subjects=20, rows_per_subject=(3, 4), seed=9)
    rows = other.take(other.subject_ids == 20)
    with pytest.raises(KeyError, match="subject 20"):
        gamm.predict(fit, rows)
