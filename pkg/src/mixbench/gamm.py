"""Additive mixed model: linear terms + penalised cubic spline in time + random effects.

The smooth uses a natural cubic regression spline parametrised by its values
at ``K`` knots placed at quantiles of the unique training times.  The
roughness penalty ``int f''(t)^2 dt`` is exact for this family.  The spline
block enters the mixed model as penalised fixed effects, so estimation reuses
:func:`mixbench.lmm.evaluate` with a ``lam * S`` term in the normal equations.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lmm
from .panel_data import MixedDesign, PanelDataset, TransformSpec, term_matrix

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class LambdaBoundaryWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# basis

@dataclass(frozen=True)
class SplineBasis:
    knots: np.ndarray
    penalty: np.ndarray  # K x K, acts on values at the knots
    center: np.ndarray  # mean basis row over the training times
    null_basis: np.ndarray  # K x (K-1), sum-to-zero reparametrisation

    @property
    def K(self) -> int:
        return self.knots.size

    @property
    def boundary(self):
        return float(self.knots[0]), float(self.knots[-1])

    @property
    def _h(self):
        return np.diff(self.knots)

    def second_derivative_map(self) -> np.ndarray:
        """K x K map from knot values to second derivatives (zero at the ends)."""
        D, B = _penalty_parts(self.knots)
        F = np.zeros((self.K, self.K))
        F[1:-1] = np.linalg.solve(B, D)
        return F

    def evaluate(self, t, deriv: int = 0) -> np.ndarray:
        """Basis matrix ``(len(t), K)``; linear continuation outside the knots."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x, h, K = self.knots, self._h, self.K
        F = self.second_derivative_map()
        out = np.zeros((t.size, K))
        j = np.clip(np.searchsorted(x, t, side="right") - 1, 0, K - 2)
        lo, hi = x[j], x[j + 1]
        hj = h[j]
        inside = (t >= x[0]) & (t <= x[-1])
        # clamp to the knot range; the linear tail is added below
        tc = np.clip(t, x[0], x[-1])
        am, ap = (hi - tc) / hj, (tc - lo) / hj
        if deriv == 0:
            cm = ((hi - tc) ** 3 / hj - hj * (hi - tc)) / 6.0
            cp = ((tc - lo) ** 3 / hj - hj * (tc - lo)) / 6.0
        elif deriv == 1:
            am, ap = -1.0 / hj, 1.0 / hj
            cm = (-3 * (hi - tc) ** 2 / hj + hj) / 6.0
            cp = (3 * (tc - lo) ** 2 / hj - hj) / 6.0
        elif deriv == 2:
            am, ap = np.zeros_like(tc), np.zeros_like(tc)
            cm, cp = (hi - tc) / hj, (tc - lo) / hj
        else:
            raise ValueError("deriv must be 0, 1 or 2")
        rows = np.arange(t.size)
        out[rows, j] += am
        out[rows, j + 1] += ap
        out += cm[:, None] * F[j] + cp[:, None] * F[j + 1]
        if deriv < 2 and not np.all(inside):
            slope_lo = self._end_slope(left=True)
            slope_hi = self._end_slope(left=False)
            below, above = t < x[0], t > x[-1]
            if deriv == 0:
                out[below] += (t[below] - x[0])[:, None] * slope_lo
                out[above] += (t[above] - x[-1])[:, None] * slope_hi
            else:
                out[below] = slope_lo
                out[above] = slope_hi
        elif deriv == 2:
            out[~inside] = 0.0
        return out

    def _end_slope(self, left: bool) -> np.ndarray:
        x, h, K = self.knots, self._h, self.K
        F = self.second_derivative_map()
        g = np.zeros(K)
        if left:
            g[0], g[1] = -1.0 / h[0], 1.0 / h[0]
            return g - h[0] / 3.0 * F[0] - h[0] / 6.0 * F[1]
        g[-2], g[-1] = -1.0 / h[-1], 1.0 / h[-1]
        return g + h[-1] / 6.0 * F[-2] + h[-1] / 3.0 * F[-1]

    def centered(self, t) -> np.ndarray:
        """Constrained basis ``(len(t), K-1)`` summing to zero over training times."""
        return (self.evaluate(t) - self.center) @ self.null_basis

    @property
    def centered_penalty(self) -> np.ndarray:
        S = self.null_basis.T @ self.penalty @ self.null_basis
        return 0.5 * (S + S.T)


def _penalty_parts(knots):
    h = np.diff(knots)
    K = knots.size
    D = np.zeros((K - 2, K))
    B = np.zeros((K - 2, K - 2))
    for i in range(K - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        B[i, i] = (h[i] + h[i + 1]) / 3.0
        if i + 1 < K - 2:
            B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
    return D, B


def build_basis(times, K: int = 10) -> SplineBasis:
    """Cubic regression spline with knots at quantiles of the distinct times."""
    if K < 4:
        raise ValueError("K must be at least 4")
    times = np.asarray(times, dtype=float)
    uniq = np.unique(times)
    if uniq.size < K:
        raise ValueError(f"need at least {K} distinct time values, got {uniq.size}")
    knots = np.quantile(uniq, np.linspace(0.0, 1.0, K))
    if np.any(np.diff(knots) <= 0):
        raise ValueError("quantile knots are not distinct")
    D, B = _penalty_parts(knots)
    S = D.T @ np.linalg.solve(B, D)
    S = 0.5 * (S + S.T)
    proto = SplineBasis(knots, S, np.zeros(K), np.eye(K)[:, 1:])
    center = proto.evaluate(times).mean(axis=0)
    Q, _ = np.linalg.qr(center.reshape(-1, 1), mode="complete")
    return SplineBasis(knots, S, center, Q[:, 1:])


# ---------------------------------------------------------------------------
# design

@dataclass
class GammDesign:
    mixed: MixedDesign
    n_linear: int
    basis: SplineBasis
    time_term: str = "test_time"
    penalty_scale: float = 1.0

    @property
    def S_full(self) -> np.ndarray:
        p = self.mixed.p
        S = np.zeros((p, p))
        S[self.n_linear:, self.n_linear:] = self.basis.centered_penalty * self.penalty_scale
        return S

    @property
    def smooth_slice(self) -> slice:
        return slice(self.n_linear, self.mixed.p)


def gamm_design(data: PanelDataset, linear_terms=("age", "hnr"), random_terms=("intercept", "test_time"),
                basis: Optional[SplineBasis] = None, K: int = 10, time_term: str = "test_time",
                response=None) -> GammDesign:
    """Fixed columns are ``[intercept, linear terms..., centred spline block]``."""
    t = data.col(time_term)
    basis = basis or build_basis(t, K)
    Xl, lin_names = term_matrix(data, linear_terms, intercept=True)
    Xs = basis.centered(t)
    rand = [r for r in random_terms if r not in ("intercept", "1")]
    Z, rnames = term_matrix(data, rand, intercept=len(rand) < len(random_terms))
    X = np.column_stack([Xl, Xs])
    y = data.response if response is None else np.asarray(response, dtype=float)
    sl = data.group_slices()
    names = lin_names + [f"s({time_term}).{k + 1}" for k in range(Xs.shape[1])]
    mixed = MixedDesign([X[s] for s in sl], [Z[s] for s in sl], [y[s] for s in sl],
                        data.subjects, names, rnames)
    # scale the penalty so lam = 1 weighs roughness comparably to the data
    scale = float(np.trace(Xs.T @ Xs) / np.trace(basis.centered_penalty))
    return GammDesign(mixed, Xl.shape[1], basis, time_term, scale)


# ---------------------------------------------------------------------------
# fitting

@dataclass
class InnerFit:
    beta: np.ndarray
    blups: dict
    penalized_loglik: float
    evaluation: lmm.Evaluation


def fit_gamm(design: GammDesign, lam: float, theta: lmm.VarianceComponents) -> InnerFit:
    """Penalised GLS for ``(beta, alpha)`` and BLUPs at fixed ``lam`` and ``theta``.

    ``penalized_loglik`` is ``loglik(beta, alpha) - lam/2 * alpha' S alpha``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    stats = lmm.SufficientStats.from_design(design.mixed)
    L = theta.cholesky_factor
    pen = lmm.Penalty(design.S_full, float(lam))
    try:
        ev = lmm.evaluate(stats, L, theta.sigma_sq, "ml", pen, gradient=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"penalised normal equations are singular: {exc}") from None
    ll = lmm.evaluate(stats, L, theta.sigma_sq, "ml", beta=ev.beta, gradient=False).value
    ll -= 0.5 * lam * float(ev.beta @ design.S_full @ ev.beta)
    D = L @ L.T
    blups = {s: D @ ev.u[i] for i, s in enumerate(design.mixed.subjects)}
    return InnerFit(ev.beta, blups, ll, ev)


def edf_parts(design: GammDesign, lam: float, theta: lmm.VarianceComponents) -> np.ndarray:
    """Per-coefficient diagonal of ``(X'V^-1 X + lam S)^-1 X'V^-1 X``."""
    stats = lmm.SufficientStats.from_design(design.mixed)
    A = lmm.evaluate(stats, theta.cholesky_factor, theta.sigma_sq, "ml", gradient=False).H
    # with A = R'R and R^-T S R^-1 = U diag(s) U', the influence matrix is
    # R^-1 U diag(1/(1 + lam s)) U' R; exact null-space eigenvalues keep large lam stable
    R = np.linalg.cholesky(A).T
    Rinv = np.linalg.inv(R)
    M = Rinv.T @ design.S_full @ Rinv
    s, U = np.linalg.eigh(0.5 * (M + M.T))
    s[s < 1e-10 * max(s.max(), 0.0)] = 0.0
    left, right = Rinv @ U, U.T @ R
    return np.einsum("ik,k,ki->i", left, 1.0 / (1.0 + lam * s), right)


def edf(design: GammDesign, lam: float, theta: lmm.VarianceComponents) -> float:
    """Effective degrees of freedom of the smooth, counting its constant.

    The constant is absorbed by the model intercept through the sum-to-zero
    constraint and is never penalised, so it contributes exactly one: the
    value runs from ``K`` at ``lam = 0`` down to 2 (the linear null space).
    """
    return 1.0 + float(np.sum(edf_parts(design, lam, theta)[design.smooth_slice]))


@dataclass
class GammFit:
    beta_linear: np.ndarray
    linear_names: list
    alpha: np.ndarray  # centred spline coefficients
    lam: float
    theta: lmm.VarianceComponents
    edf: float
    loglik: float  # REML at the selected lambda
    aic: float  # ML-based, comparable with an ML LMM fit
    ml_loglik: float
    blups: dict
    basis: SplineBasis
    random_names: list
    time_term: str = "test_time"
    converged: bool = True
    lambda_at_boundary: bool = False
    search: list = field(default_factory=list)

    @property
    def alpha_knots(self) -> np.ndarray:
        """Spline coefficients as values at the knots (before centring)."""
        return self.basis.null_basis @ self.alpha

    def smooth(self, t) -> np.ndarray:
        return self.basis.centered(t) @ self.alpha


def _profile(stats, lam, design, criterion, start=None):
    pen = lmm.Penalty(design.S_full, float(lam))
    return lmm.optimize_theta(stats, criterion, pen, start=start)


def _assemble(design, stats, lam, opt, search, at_boundary) -> GammFit:
    theta = lmm.VarianceComponents.from_cholesky(opt.L, opt.sigma_sq)
    inner = fit_gamm(design, lam, theta)
    e = edf(design, lam, theta)
    # ML refit of the variance components at the chosen lambda, for AIC
    ml = _profile(stats, lam, design, "ml", start=opt.x)
    ml_ll = lmm.evaluate(stats, ml.L, ml.sigma_sq, "ml", beta=ml.evaluation.beta, gradient=False).value
    ml_theta = lmm.VarianceComponents.from_cholesky(ml.L, ml.sigma_sq)
    edf_ml = edf(design, lam, ml_theta)
    k_theta = stats.q * (stats.q + 1) // 2 + 1
    # the intercept column already carries the smooth's constant
    aic = -2.0 * ml_ll + 2.0 * (design.n_linear + (edf_ml - 1.0) + k_theta)
    nl = design.n_linear
    return GammFit(beta_linear=inner.beta[:nl], linear_names=design.mixed.fixed_names[:nl],
                   alpha=inner.beta[nl:], lam=float(lam), theta=theta, edf=e, loglik=opt.evaluation.value,
                   aic=aic, ml_loglik=ml_ll, blups=inner.blups, basis=design.basis,
                   random_names=list(design.mixed.random_names), time_term=design.time_term,
                   converged=opt.converged, lambda_at_boundary=at_boundary, search=search)


def reml_at(design: GammDesign, lam: float, stats=None, start=None):
    stats = stats or lmm.SufficientStats.from_design(design.mixed)
    opt = _profile(stats, lam, design, "reml", start)
    return opt.evaluation.value, opt


def select_lambda(design: GammDesign, lam_range=(1e-6, 1e6), n_grid: int = 20, tol: float = 1e-3):
    """REML choice of lambda: log-grid scan, then golden-section on log lambda.

    Variance components are re-estimated at every candidate.  Returns
    ``(lam, GammFit)``; a boundary optimum is returned with a warning.
    """
    stats = lmm.SufficientStats.from_design(design.mixed)
    grid = np.geomspace(lam_range[0], lam_range[1], n_grid)
    values, opts, search = [], [], []
    start = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", lmm.ConvergenceWarning)
        for lam in grid:
            v, opt = reml_at(design, lam, stats, start)
            start = opt.x
            values.append(v)
            opts.append(opt)
            search.append((float(lam), v))
    values = np.array(values)
    best = int(np.nanargmax(values))
    if best in (0, n_grid - 1):
        warnings.warn(f"REML optimum for lambda lies at the search boundary ({grid[best]:.3g})",
                      LambdaBoundaryWarning, stacklevel=2)
        opt = _profile(stats, grid[best], design, "reml", opts[best].x)
        return float(grid[best]), _assemble(design, stats, grid[best], opt, search, True)

    a, b = math.log(grid[best - 1]), math.log(grid[best + 1])
    cache = {}

    def f(z):
        if z not in cache:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", lmm.ConvergenceWarning)
                v, opt = reml_at(design, math.exp(z), stats, opts[best].x)
            cache[z] = (v, opt)
            search.append((math.exp(z), v))
        return cache[z][0]

    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    while b - a > tol:
        if f(c) >= f(d):
            b, d = d, c
            c = b - GOLDEN * (b - a)
        else:
            a, c = c, d
            d = a + GOLDEN * (b - a)
    z = max(cache, key=lambda k: cache[k][0])
    if cache[z][0] < values[best]:
        z = math.log(grid[best])
        f(z)
    lam = math.exp(z)
    opt = _profile(stats, lam, design, "reml", cache[z][1].x)
    return lam, _assemble(design, stats, lam, opt, search, False)


def fit(data: PanelDataset, linear_terms=("age", "hnr"), random_terms=("intercept", "test_time"),
        K: int = 10, time_term: str = "test_time"):
    design = gamm_design(data, linear_terms, random_terms, K=K, time_term=time_term)
    return select_lambda(design)[1]


# ---------------------------------------------------------------------------
# prediction and output

def predict_linear(fit_: GammFit, rows: PanelDataset) -> np.ndarray:
    names = fit_.linear_names
    X, _ = term_matrix(rows, names[1:], intercept=True)
    rand = [r for r in fit_.random_names if r != "intercept"]
    Z, _ = term_matrix(rows, rand, intercept="intercept" in fit_.random_names)
    b = np.zeros_like(Z)
    for k, s in enumerate(rows.subject_ids):
        try:
            b[k] = fit_.blups[int(s)]
        except KeyError:
            raise KeyError(f"subject {int(s)} was not seen in training") from None
    return X @ fit_.beta_linear + fit_.smooth(rows.col(fit_.time_term)) + np.sum(Z * b, axis=1)


def predict(fit_: GammFit, rows: PanelDataset, transform: Optional[TransformSpec] = None) -> np.ndarray:
    mu = predict_linear(fit_, rows)
    if transform is None:
        return mu
    return transform.inverse_response(mu, fit_.theta.sigma_sq)


def smooth_grid(fit_: GammFit, n: int = 200):
    lo, hi = fit_.basis.boundary
    t = np.linspace(lo, hi, n)
    return t, fit_.smooth(t)


def write_smooth_csv(fit_: GammFit, path, n: int = 200) -> None:
    t, f = smooth_grid(fit_, n)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,f_hat\n")
        for a, b in zip(t, f):
            fh.write(f"{float(a)!r},{float(b)!r}\n")


def report_text(fit_: GammFit) -> str:
    lines = [f"{'term':<24}{'estimate':>14}"]
    lines += [f"{n:<24}{b:>14.6g}" for n, b in zip(fit_.linear_names, fit_.beta_linear)]
    t = fit_.theta
    lines += ["", f"s({fit_.time_term}): edf={fit_.edf:.4f} lambda={fit_.lam:.6g} K={fit_.basis.K}",
              "", "random effects (SD):", f"  intercept   {math.sqrt(t.sigma_b0_sq):.6g}"]
    if t.sigma_b1_sq is not None:
        lines += [f"  slope       {math.sqrt(t.sigma_b1_sq):.6g}", f"  correlation {t.rho:.6g}"]
    lines += [f"  residual    {math.sqrt(t.sigma_sq):.6g}", "",
              f"reml loglik: {fit_.loglik:.6f}", f"ml loglik: {fit_.ml_loglik:.6f}", f"aic (ml): {fit_.aic:.6f}"]
    return "\n".join(lines) + "\n"
