import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import block_diag

from mixbench import lmm
from mixbench.numeric_core import check_gradient
from mixbench.panel_data import MixedDesign, TransformSpec, design_matrices, from_array, COLUMNS


def random_design(rng, m=3, p=2, q=2, sizes=(3, 6)):
    X, Z, y = [], [], []
    for _ in range(m):
        n = int(rng.integers(*sizes))
        t = rng.uniform(0, 2, size=n)
        Xi = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]) if p else np.zeros((n, 0))
        Zi = np.column_stack([np.ones(n), t])[:, :q]
        X.append(Xi)
        Z.append(Zi)
        y.append(rng.normal(size=n) + Xi.sum(axis=1))
    return MixedDesign(X, Z, y, list(range(1, m + 1)), [f"x{j}" for j in range(p)],
                       ["intercept", "t"][:q])


def dense_V(theta, design):
    D = theta.D
    return block_diag(*[Zi @ D @ Zi.T + theta.sigma_sq * np.eye(len(Zi)) for Zi in design.Z])


def dense_loglik(theta, design, beta):
    X, _, y = design.stacked()
    V = dense_V(theta, design)
    r = y - X @ beta
    return -0.5 * (len(y) * math.log(2 * math.pi) + np.linalg.slogdet(V)[1] + r @ np.linalg.solve(V, r))


THETAS = [lmm.VarianceComponents(0.7, 0.4), lmm.VarianceComponents(1.3, 0.2, 0.5, -0.3)]


# ---------------------------------------------------------------------------
# likelihood pieces

@pytest.mark.parametrize("theta", THETAS)
def test_gls_matches_full_matrix_oracle(rng, theta):
    design = random_design(rng, m=2, q=theta.q)
    X, _, y = design.stacked()
    Vinv = np.linalg.inv(dense_V(theta, design))
    expected = np.linalg.solve(X.T @ Vinv @ X, X.T @ Vinv @ y)
    np.testing.assert_allclose(lmm.gls_beta(theta, design), expected, rtol=0, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(THETAS))
def test_marginal_loglik_matches_dense(seed, theta):
    rng = np.random.default_rng(seed)
    design = random_design(rng, m=int(rng.integers(2, 5)), q=theta.q)
    beta = rng.normal(size=design.p)
    np.testing.assert_allclose(lmm.marginal_loglik(theta, design, beta), dense_loglik(theta, design, beta),
                               rtol=1e-10)


def test_zero_D_zero_residual_loglik():
    X = [np.ones((3, 1)), np.ones((2, 1))]
    y = [np.full(3, 2.0), np.full(2, 2.0)]
    design = MixedDesign(X, [np.ones((3, 1)), np.ones((2, 1))], y, [1, 2], ["intercept"], ["intercept"])
    ll = lmm.marginal_loglik(lmm.VarianceComponents(0.0, 1.0), design, np.array([2.0]))
    assert ll == pytest.approx(-2.5 * math.log(2 * math.pi), rel=1e-14)


def test_zero_D_gls_is_ols(rng):
    design = random_design(rng, m=4, p=3)
    X, _, y = design.stacked()
    np.testing.assert_allclose(lmm.gls_beta(lmm.VarianceComponents(0.0, 2.0, 0.0), design),
                               np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-10)


def test_reml_without_fixed_effects_is_ml_at_zero(rng):
    design = random_design(rng, m=3, p=0, q=1)
    theta = lmm.VarianceComponents(0.5, 0.8)
    assert lmm.reml_loglik(theta, design) == pytest.approx(lmm.marginal_loglik(theta, design, np.zeros(0)),
                                                           rel=1e-13)


def anova_reml(y, s_b, s2):
    """Balanced one-way layout, intercept only, by the ANOVA decomposition."""
    a, n = y.shape
    N = a * n
    ssw = float(np.sum((y - y.mean(axis=1, keepdims=True)) ** 2))
    ssb = n * float(np.sum((y.mean(axis=1) - y.mean()) ** 2))
    lam = s2 + n * s_b
    return -0.5 * ((N - 1) * math.log(2 * math.pi) + a * (n - 1) * math.log(s2) + a * math.log(lam)
                   + math.log(N / lam) + ssw / s2 + ssb / lam)


@pytest.mark.parametrize("s_b,s2", [(1.0, 1.0), (0.3, 2.0), (0.0, 0.5)])
def test_reml_matches_balanced_anova(s_b, s2):
    y = np.array([[1.2, 0.4], [3.1, 2.2]])
    design = MixedDesign([np.ones((2, 1))] * 2, [np.ones((2, 1))] * 2, list(y), [1, 2], ["intercept"],
                         ["intercept"])
    got = lmm.reml_loglik(lmm.VarianceComponents(s_b, s2), design)
    assert abs(got - anova_reml(y, s_b, s2)) < 1e-8


@pytest.mark.parametrize("criterion", ["ml", "reml"])
@pytest.mark.parametrize("q", [1, 2])
@pytest.mark.parametrize("penalized", [False, True])
def test_objective_gradient(rng, criterion, q, penalized):
    design = random_design(rng, m=5, p=3, q=q)
    stats = lmm.SufficientStats.from_design(design)
    pen = None
    if penalized:
        S = np.zeros((3, 3))
        S[1:, 1:] = [[2.0, -1.0], [-1.0, 2.0]]
        pen = lmm.Penalty(S, 0.7)
    for _ in range(5):
        L = np.tril(rng.normal(size=(q, q))) + np.eye(q)
        x = lmm.pack(L, rng.uniform(0.3, 2.0))
        f = lambda v: lmm.objective(v, stats, criterion, pen)[0]
        assert check_gradient(f, x, lmm.objective(x, stats, criterion, pen)[1], h=1e-6) < 1e-6


# ---------------------------------------------------------------------------
# fitting

def simulate(rng, m, n, s_b, s2, beta=(1.0, 0.5)):
    X, Z, y = [], [], []
    for _ in range(m):
        x = rng.normal(size=n)
        Xi = np.column_stack([np.ones(n), x])
        X.append(Xi)
        Z.append(np.ones((n, 1)))
        y.append(Xi @ np.array(beta) + rng.normal(scale=math.sqrt(s_b)) + rng.normal(scale=math.sqrt(s2), size=n))
    return MixedDesign(X, Z, y, list(range(m)), ["intercept", "x"], ["intercept"])


def observed_info_se(fit, design, h=1e-4):
    """SE of sigma_b0^2 from a central-difference Hessian of the REML surface."""
    x0 = np.array([fit.theta.sigma_b0_sq, fit.theta.sigma_sq])
    f = lambda v: lmm.reml_loglik(lmm.VarianceComponents(v[0], v[1]), design)
    H = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
            H[i, j] = (f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)) / (4 * h * h)
    return math.sqrt(np.linalg.inv(-H)[0, 0])


@pytest.mark.slow
def test_reml_interval_coverage():
    rng = np.random.default_rng(7)
    hits = 0
    for _ in range(200):
        design = simulate(rng, 200, 10, 1.0, 1.0)
        fit = lmm.fit(design, "reml")
        se = observed_info_se(fit, design)
        hits += abs(fit.theta.sigma_b0_sq - 1.0) <= 1.96 * se
    assert hits >= 180, f"coverage {hits}/200"


def test_ml_and_reml_recover_truth(rng):
    design = simulate(rng, 100, 8, 2.0, 0.5, beta=(3.0, -1.0))
    for crit in ("ml", "reml"):
        fit = lmm.fit(design, crit)
        assert fit.converged and fit.grad_norm < 1e-4
        np.testing.assert_allclose(fit.beta, [3.0, -1.0], atol=0.35)
        assert 1.2 < fit.theta.sigma_b0_sq < 3.0
        assert 0.4 < fit.theta.sigma_sq < 0.6


def test_reml_variance_exceeds_ml(rng):
    design = simulate(rng, 15, 4, 1.0, 1.0)
    assert lmm.fit(design, "reml").theta.sigma_sq >= lmm.fit(design, "ml").theta.sigma_sq * 0.999


def test_degenerate_truth_hits_boundary(rng):
    design = simulate(rng, 30, 6, 0.0, 1.0)
    fit = lmm.fit(design, "reml")
    assert fit.boundary
    assert fit.theta.sigma_b0_sq < 1e-3


def test_fit_matches_dense_optimum(rng):
    design = simulate(rng, 6, 5, 1.0, 0.5)
    fit = lmm.fit(design, "ml")
    for d in ([0.05, 0.0], [0.0, 0.05], [-0.05, 0.0], [0.0, -0.05]):
        th = lmm.VarianceComponents(fit.theta.sigma_b0_sq + d[0], fit.theta.sigma_sq + d[1])
        assert dense_loglik(th, design, lmm.gls_beta(th, design)) <= fit.loglik + 1e-9
    assert fit.aic == pytest.approx(-2 * fit.loglik + 2 * (2 + 1 + 1))


def test_random_slope_fit(rng):
    design = random_design(rng, m=40, p=2, q=2, sizes=(6, 10))
    fit = lmm.fit(design, "reml")
    assert fit.converged
    assert fit.n_params == 2 + 3 + 1


# ---------------------------------------------------------------------------
# BLUP and prediction

def test_blup_zero_D(rng):
    design = random_design(rng, m=3, q=1)
    b = lmm.blup(lmm.VarianceComponents(0.0, 1.0), np.zeros(2), design)
    for v in b.values():
        np.testing.assert_array_equal(v, 0.0)


def test_blup_small_sigma_limit(rng):
    design = random_design(rng, m=4, q=1)
    beta = np.array([0.3, -0.2])
    b = lmm.blup(lmm.VarianceComponents(1.0, 1e-8), beta, design)
    for s, Xi, yi in zip(design.subjects, design.X, design.y):
        np.testing.assert_allclose(b[s][0], np.mean(yi - Xi @ beta), rtol=1e-6)


def test_blup_matches_dense_formula(rng):
    theta = THETAS[1]
    design = random_design(rng, m=3, q=2)
    beta = lmm.gls_beta(theta, design)
    b = lmm.blup(theta, beta, design)
    for s, Xi, Zi, yi in zip(design.subjects, design.X, design.Z, design.y):
        Vi = Zi @ theta.D @ Zi.T + theta.sigma_sq * np.eye(len(yi))
        np.testing.assert_allclose(b[s], theta.D @ Zi.T @ np.linalg.solve(Vi, yi - Xi @ beta), atol=1e-10)


def _rows(times, subject=1, **cols):
    r = np.zeros((len(times), len(COLUMNS)))
    r[:, 0] = subject
    r[:, 3] = times
    r[:, 5] = 1.0
    for k, v in cols.items():
        r[:, COLUMNS.index(k)] = v
    return from_array(r)


def handmade_fit(beta, names, blups, random_names=("intercept",)):
    return lmm.LmmFit(np.array(beta), list(names), list(random_names), lmm.VarianceComponents(1.0, 0.01),
                      blups, 0.0, "reml", 0.0, 1, 3)


def test_predict_log_response_zero_covariates():
    fit = handmade_fit([2.0, 0.5], ["intercept", "age"], {1: np.zeros(1)})
    got = lmm.predict(fit, _rows([0.0], age=0.0), TransformSpec(log_response=True))
    np.testing.assert_allclose(got, [math.exp(2.0)])


def test_predict_identity_by_hand():
    fit = handmade_fit([1.0, 2.0, -1.0], ["intercept", "age", "test_time:hnr"], {1: np.array([0.5, 0.1])},
                       random_names=("intercept", "test_time"))
    got = lmm.predict(fit, _rows([3.0], age=2.0, hnr=4.0))
    assert got[0] == pytest.approx(1.0 + 4.0 - 12.0 + 0.5 + 0.3)


def test_predict_unknown_subject():
    fit = handmade_fit([1.0], ["intercept"], {1: np.zeros(1)})
    with pytest.raises(KeyError, match="subject 9"):
        lmm.predict(fit, _rows([0.0], subject=9))


def test_keyvalue_roundtrip(tmp_path, small_panel):
    fit = lmm.fit(design_matrices(small_panel, ["age"], ("intercept", "test_time")), "ml")
    kv = lmm.to_keyvalue(fit)
    lmm.write_keyvalue(kv, tmp_path / "fit.txt")
    back = lmm.read_keyvalue(tmp_path / "fit.txt")
    assert back == kv
    assert float(back["loglik"]) == fit.loglik
    assert "random effects" in lmm.report_text(fit)
