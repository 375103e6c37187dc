"""Linear mixed-effects model with one grouping factor, fitted by ML or REML.

Per subject ``i``::

    y_i = X_i beta + Z_i b_i + e_i,   b_i ~ N(0, D),   e_i ~ N(0, sigma^2 I)

so that ``V_i = Z_i D Z_i' + sigma^2 I``.  Every likelihood quantity is
assembled from per-subject sufficient statistics ``Z'Z``, ``Z'Q`` and
``Q'Q`` with ``Q = [X | y]``; with ``D = L L'`` the Woodbury identity gives::

    V^-1  = (I - Z K Z') / sigma^2,   K = L (sigma^2 I + L' Z'Z L)^-1 L'
    log|V| = (n_i - q) log sigma^2 + log|sigma^2 I + L' Z'Z L|

which stays valid when ``D`` is singular.  Variance components are optimised
over the log-Cholesky parametrisation of ``D`` plus ``log sigma^2``.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import minimize

from .numeric_core import cholesky, cholesky_solve, logdet_spd
from .panel_data import MixedDesign, PanelDataset, TransformSpec, term_matrix

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
VARIANCE_FLOOR = 1e-10


class ConvergenceWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# variance components

@dataclass(frozen=True)
class VarianceComponents:
    """Random intercept (and optional slope) variances plus residual variance."""

    sigma_b0_sq: float
    sigma_sq: float
    sigma_b1_sq: Optional[float] = None
    rho: float = 0.0

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise ValueError(f"sigma_sq must be positive, got {self.sigma_sq}")
        if not self.sigma_b0_sq >= 0:
            raise ValueError(f"sigma_b0_sq must be non-negative, got {self.sigma_b0_sq}")
        if self.sigma_b1_sq is not None and not self.sigma_b1_sq >= 0:
            raise ValueError(f"sigma_b1_sq must be non-negative, got {self.sigma_b1_sq}")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")

    @property
    def q(self) -> int:
        return 1 if self.sigma_b1_sq is None else 2

    @property
    def D(self) -> np.ndarray:
        L = self.cholesky_factor
        return L @ L.T

    @property
    def cholesky_factor(self) -> np.ndarray:
        s0 = math.sqrt(self.sigma_b0_sq)
        if self.sigma_b1_sq is None:
            return np.array([[s0]])
        s1 = math.sqrt(self.sigma_b1_sq)
        return np.array([[s0, 0.0], [self.rho * s1, s1 * math.sqrt(max(0.0, 1.0 - self.rho ** 2))]])

    @classmethod
    def from_cholesky(cls, L, sigma_sq: float) -> "VarianceComponents":
        L = np.atleast_2d(np.asarray(L, dtype=float))
        D = L @ L.T
        if D.shape == (1, 1):
            return cls(float(D[0, 0]), float(sigma_sq))
        if D.shape != (2, 2):
            raise ValueError("only random intercept or intercept + slope structures are supported")
        denom = math.sqrt(D[0, 0] * D[1, 1])
        rho = float(np.clip(D[1, 0] / denom, -1.0, 1.0)) if denom > 0 else 0.0
        return cls(float(D[0, 0]), float(sigma_sq), float(D[1, 1]), rho)

    @classmethod
    def from_D(cls, D, sigma_sq: float) -> "VarianceComponents":
        D = np.atleast_2d(np.asarray(D, dtype=float))
        if D.shape == (1, 1):
            return cls(float(D[0, 0]), float(sigma_sq))
        denom = math.sqrt(D[0, 0] * D[1, 1])
        rho = float(D[1, 0] / denom) if denom > 0 else 0.0
        return cls(float(D[0, 0]), float(sigma_sq), float(D[1, 1]), rho)


# ---------------------------------------------------------------------------
# sufficient statistics

@dataclass(frozen=True)
class SufficientStats:
    n: np.ndarray  # (m,)
    ZtZ: np.ndarray  # (m, q, q)
    ZtQ: np.ndarray  # (m, q, p+1)
    QtQ: np.ndarray  # (m, p+1, p+1)
    QtQ_sum: np.ndarray  # (p+1, p+1)

    @property
    def p(self) -> int:
        return self.QtQ.shape[1] - 1

    @property
    def q(self) -> int:
        return self.ZtZ.shape[1]

    @property
    def n_obs(self) -> int:
        return int(self.n.sum())

    @classmethod
    def from_design(cls, design: MixedDesign) -> "SufficientStats":
        m = len(design.y)
        p, q = design.p, design.q
        n = np.zeros(m)
        ZtZ = np.zeros((m, q, q))
        ZtQ = np.zeros((m, q, p + 1))
        QtQ = np.zeros((m, p + 1, p + 1))
        for i, (X, Z, y) in enumerate(zip(design.X, design.Z, design.y)):
            Q = np.column_stack([np.asarray(X, dtype=float).reshape(len(y), p), y])
            Z = np.asarray(Z, dtype=float).reshape(len(y), q)
            n[i] = len(y)
            ZtZ[i] = Z.T @ Z
            ZtQ[i] = Z.T @ Q
            QtQ[i] = Q.T @ Q
        return cls(n, ZtZ, ZtQ, QtQ, QtQ.sum(axis=0))


def _stats(design) -> SufficientStats:
    return design if isinstance(design, SufficientStats) else SufficientStats.from_design(design)


class Penalty(NamedTuple):
    """Quadratic penalty ``lam * beta' S beta`` on the fixed effects."""

    S: np.ndarray
    lam: float

    @property
    def active(self) -> bool:
        return self.lam > 0

    def rank_and_logdet(self):
        w = np.linalg.eigvalsh(self.S)
        pos = w[w > w.max() * 1e-10] if w.size and w.max() > 0 else w[:0]
        return pos.size, float(np.sum(np.log(pos)))


class Evaluation(NamedTuple):
    value: float
    beta: np.ndarray
    H: np.ndarray
    grad_D: Optional[np.ndarray]  # d value / d D (symmetric)
    grad_sigma_sq: Optional[float]
    u: Optional[np.ndarray]  # (m, q) Z_i' V_i^-1 r_i


def evaluate(stats: SufficientStats, L, sigma_sq: float, criterion: str = "reml",
             penalty: Optional[Penalty] = None, beta=None, gradient: bool = True) -> Evaluation:
    """Criterion value, profiled beta and analytic gradients at ``(L, sigma^2)``.

    ``criterion`` is ``"ml"`` or ``"reml"``.  When ``beta`` is given the ML
    value is evaluated at that beta instead of the GLS solution.
    """
    if criterion not in ("ml", "reml"):
        raise ValueError(f"criterion must be 'ml' or 'reml', got {criterion!r}")
    L = np.atleast_2d(np.asarray(L, dtype=float))
    q, p = stats.q, stats.p
    if L.shape != (q, q):
        raise ValueError(f"random-effect factor must be {q}x{q}, got {L.shape}")
    s2 = float(sigma_sq)
    if not s2 > 0:
        raise ValueError("sigma_sq must be positive")

    M = s2 * np.eye(q) + np.einsum("ji,mjk,kl->mil", L, stats.ZtZ, L)
    Mc = np.linalg.cholesky(M)
    logdetV = float(np.sum((stats.n - q) * math.log(s2)) + 2.0 * np.sum(np.log(np.diagonal(Mc, axis1=1, axis2=2))))
    K = np.einsum("ij,mjk,lk->mil", L, np.linalg.inv(M), L)
    KQ = K @ stats.ZtQ
    QVQ = (stats.QtQ_sum - np.einsum("mqa,mqb->ab", stats.ZtQ, KQ)) / s2
    QVQ = 0.5 * (QVQ + QVQ.T)

    XVX, XVy = QVQ[:p, :p], QVQ[:p, p]
    H = XVX.copy()
    pen_rank, pen_logdet = 0, 0.0
    if penalty is not None and penalty.active:
        H = H + penalty.lam * penalty.S
        pen_rank, pen_logdet = penalty.rank_and_logdet()
        pen_logdet += pen_rank * math.log(penalty.lam)
    if beta is None:
        beta = cholesky_solve(H, XVy) if p else np.zeros(0)
    beta = np.asarray(beta, dtype=float)
    c = np.append(-beta, 1.0)
    quad = float(c @ QVQ @ c)
    if penalty is not None and penalty.active:
        quad += penalty.lam * float(beta @ penalty.S @ beta)

    n = stats.n_obs
    reml = criterion == "reml"
    if reml:
        logdetH = logdet_spd(H) if p else 0.0
        value = -0.5 * (logdetV + logdetH - pen_logdet + quad + (n - p + pen_rank) * LOG_2PI)
    else:
        value = -0.5 * (logdetV + quad + n * LOG_2PI)

    ZAQ = (stats.ZtQ - stats.ZtZ @ KQ) / s2
    u = ZAQ @ c
    if not gradient:
        return Evaluation(value, beta, H, None, None, u)

    ZtZK = stats.ZtZ @ K
    ZAZ = (stats.ZtZ - ZtZK @ stats.ZtZ) / s2
    G = ZAZ.sum(axis=0) - u.T @ u
    trA = float(np.sum(stats.n - np.trace(ZtZK, axis1=1, axis2=2))) / s2
    QA2Q = (stats.QtQ_sum - 2.0 * np.einsum("mqa,mqb->ab", stats.ZtQ, KQ)
            + np.einsum("mqa,mqr,mrb->ab", KQ, stats.ZtZ, KQ)) / s2 ** 2
    gs = trA - float(c @ QA2Q @ c)
    if reml and p:
        C = np.linalg.inv(H)
        ZAX = ZAQ[:, :, :p]
        G = G - np.einsum("mip,pr,mjr->ij", ZAX, C, ZAX)
        gs -= float(np.sum(C * QA2Q[:p, :p]))
    G = -0.5 * (G + G.T) / 2.0
    return Evaluation(value, beta, H, G, -0.5 * gs, u)


# ---------------------------------------------------------------------------
# unconstrained parametrisation

def _tril(q):
    return np.tril_indices(q)


def pack(L, sigma_sq: float) -> np.ndarray:
    """``[lower-triangular L row-major with log diagonal, log sigma^2]``."""
    L = np.atleast_2d(L)
    r, c = _tril(L.shape[0])
    vals = L[r, c].astype(float).copy()
    diag = r == c
    vals[diag] = np.log(np.maximum(vals[diag], 1e-300))
    return np.append(vals, math.log(sigma_sq))


def unpack(x, q: int):
    x = np.asarray(x, dtype=float)
    r, c = _tril(q)
    vals = x[:-1].copy()
    diag = r == c
    vals[diag] = np.exp(vals[diag])
    L = np.zeros((q, q))
    L[r, c] = vals
    return L, math.exp(x[-1])


def _chain(ev: Evaluation, L, sigma_sq):
    q = L.shape[0]
    dL = 2.0 * ev.grad_D @ L
    r, c = _tril(q)
    g = dL[r, c].copy()
    diag = r == c
    g[diag] *= L[r, c][diag]
    return np.append(g, ev.grad_sigma_sq * sigma_sq)


def _bounds(q):
    r, c = _tril(q)
    lo_diag = 0.5 * math.log(VARIANCE_FLOOR)
    b = [(lo_diag, None) if i == j else (None, None) for i, j in zip(r, c)]
    return b + [(math.log(VARIANCE_FLOOR), None)]


def objective(x, stats, criterion, penalty=None):
    """Criterion value and its gradient in the unconstrained parametrisation."""
    L, s2 = unpack(x, stats.q)
    ev = evaluate(stats, L, s2, criterion, penalty)
    return ev.value, _chain(ev, L, s2)


# ---------------------------------------------------------------------------
# public likelihood functions

def _factor(theta: VarianceComponents, stats: SufficientStats):
    L = theta.cholesky_factor
    if L.shape[0] != stats.q:
        raise ValueError(f"theta has {L.shape[0]} random effects, design has {stats.q}")
    return L


def marginal_loglik(theta: VarianceComponents, design, beta) -> float:
    """Gaussian log-likelihood of ``y`` at ``(beta, theta)``."""
    st = _stats(design)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (st.p,):
        raise ValueError(f"beta must have length {st.p}")
    return evaluate(st, _factor(theta, st), theta.sigma_sq, "ml", beta=beta, gradient=False).value


def gls_beta(theta: VarianceComponents, design) -> np.ndarray:
    """Generalised least squares ``(X'V^-1 X)^-1 X'V^-1 y``."""
    st = _stats(design)
    return evaluate(st, _factor(theta, st), theta.sigma_sq, "ml", gradient=False).beta


def reml_loglik(theta: VarianceComponents, design) -> float:
    """Restricted log-likelihood with beta profiled out."""
    st = _stats(design)
    return evaluate(st, _factor(theta, st), theta.sigma_sq, "reml", gradient=False).value


def blup(theta: VarianceComponents, beta, design) -> dict:
    """Conditional means ``D Z_i' V_i^-1 (y_i - X_i beta)`` keyed by subject."""
    if not isinstance(design, MixedDesign):
        raise TypeError("blup needs a MixedDesign to label subjects")
    st = _stats(design)
    L = _factor(theta, st)
    u = evaluate(st, L, theta.sigma_sq, "ml", beta=np.asarray(beta, dtype=float), gradient=False).u
    D = L @ L.T
    return {s: D @ u[i] for i, s in enumerate(design.subjects)}


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FitControl:
    em_iterations: int = 20
    max_iter: int = 200
    gtol: float = 1e-6
    newton_iterations: int = 50


@dataclass
class ThetaOptimum:
    x: np.ndarray
    L: np.ndarray
    sigma_sq: float
    evaluation: Evaluation
    grad_norm: float
    converged: bool
    boundary: bool
    n_iter: int


def _initial(stats: SufficientStats, penalty=None):
    p, q = stats.p, stats.q
    XtX = stats.QtQ_sum[:p, :p]
    if penalty is not None and penalty.active:
        XtX = XtX + penalty.lam * penalty.S
    beta = np.linalg.lstsq(XtX, stats.QtQ_sum[:p, p], rcond=None)[0] if p else np.zeros(0)
    c = np.append(-beta, 1.0)
    rss = float(c @ stats.QtQ_sum @ c)
    s2 = max(rss / max(stats.n_obs - p, 1), 1e-6)
    zscale = np.einsum("mkk->k", stats.ZtZ) / stats.n_obs
    L = np.diag(np.sqrt(0.5 * s2 / np.maximum(zscale, 1e-12)))
    return L, 0.5 * s2


def _em(stats, L, s2, iterations, penalty=None):
    """ML EM updates for (D, sigma^2); used only as a warm start."""
    m = len(stats.n)
    for _ in range(iterations):
        ev = evaluate(stats, L, s2, "ml", penalty, gradient=False)
        D = L @ L.T
        c = np.append(-ev.beta, 1.0)
        bhat = ev.u @ D  # D symmetric
        M = s2 * np.eye(stats.q) + np.einsum("ji,mjk,kl->mil", L, stats.ZtZ, L)
        # Var(b|y) = D - D Z'V^-1 Z D = s2 L M^-1 L'
        cond = s2 * np.einsum("ij,mjk,lk->mil", L, np.linalg.inv(M), L)
        D_new = (np.einsum("mi,mj->ij", bhat, bhat) + cond.sum(axis=0)) / m
        Zr = stats.ZtQ @ c
        rr = np.einsum("a,mab,b->m", c, stats.QtQ, c)
        resid = rr - 2 * np.einsum("mi,mi->m", bhat, Zr) + np.einsum("mi,mij,mj->m", bhat, stats.ZtZ, bhat)
        s2_new = float(np.sum(resid) + np.sum(stats.ZtZ * cond)) / stats.n_obs
        s2 = max(s2_new, VARIANCE_FLOOR)
        D_new = 0.5 * (D_new + D_new.T) + VARIANCE_FLOOR * np.eye(stats.q)
        try:
            L = cholesky(D_new)
        except np.linalg.LinAlgError:
            break
    return L, s2


def _projected(g, x, bounds):
    g = g.copy()
    for k, (lo, _) in enumerate(bounds):
        if lo is not None and x[k] <= lo + 1e-12 and g[k] < 0:
            g[k] = 0.0
    return g


def _fd_hessian(stats, x, criterion, penalty, h=1e-5):
    k = x.size
    Hs = np.zeros((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h * max(1.0, abs(x[j]))
        gp = objective(x + e, stats, criterion, penalty)[1]
        gm = objective(x - e, stats, criterion, penalty)[1]
        Hs[:, j] = (gp - gm) / (2 * e[j])
    return 0.5 * (Hs + Hs.T)


def optimize_theta(stats: SufficientStats, criterion: str = "reml", penalty: Optional[Penalty] = None,
                   control: Optional[FitControl] = None, start=None) -> ThetaOptimum:
    """Maximise the ML or REML criterion over the variance components."""
    control = control or FitControl()
    if start is None:
        L0, s20 = _initial(stats, penalty)
        L0, s20 = _em(stats, L0, s20, control.em_iterations, penalty)
        x0 = pack(L0, s20)
    else:
        x0 = np.asarray(start, dtype=float)
    bounds = _bounds(stats.q)
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    x0 = np.maximum(x0, lo)

    def neg(x):
        v, g = objective(x, stats, criterion, penalty)
        return -v, -g

    res = minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": control.max_iter, "gtol": 1e-10, "ftol": 1e-15})
    x = np.maximum(res.x, lo)
    n_iter = int(res.nit)
    val, g = objective(x, stats, criterion, penalty)
    gp = _projected(g, x, bounds)
    for _ in range(control.newton_iterations):
        if np.linalg.norm(gp) < control.gtol:
            break
        free = gp != 0.0
        Hs = _fd_hessian(stats, x, criterion, penalty)[np.ix_(free, free)]
        w, V = np.linalg.eigh(-Hs)
        w = np.maximum(np.abs(w), 1e-8 * max(1.0, np.abs(w).max()))
        step = np.zeros_like(x)
        step[free] = V @ ((V.T @ gp[free]) / w)
        t, improved = 1.0, False
        for _ in range(30):
            xn = np.maximum(x + t * step, lo)
            vn, gn = objective(xn, stats, criterion, penalty)
            if vn >= val - 1e-12 * max(1.0, abs(val)):
                x, val, g, improved = xn, vn, gn, True
                break
            t *= 0.5
        n_iter += 1
        gp = _projected(g, x, bounds)
        if not improved:
            break
    L, s2 = unpack(x, stats.q)
    ev = evaluate(stats, L, s2, criterion, penalty)
    gnorm = float(np.linalg.norm(gp))
    converged = gnorm < control.gtol
    variances = np.append(np.diag(L @ L.T), s2)
    boundary = bool(np.any(variances < 10 * VARIANCE_FLOOR))
    if not converged:
        warnings.warn(f"variance-component optimisation stopped with gradient norm {gnorm:.3g}",
                      ConvergenceWarning, stacklevel=2)
    return ThetaOptimum(x, L, s2, ev, gnorm, converged, boundary, n_iter)


@dataclass
class LmmFit:
    beta: np.ndarray
    fixed_names: list
    random_names: list
    theta: VarianceComponents
    blups: dict
    loglik: float
    criterion: str
    aic: float
    n_obs: int
    n_params: int
    converged: bool = True
    boundary: bool = False
    grad_norm: float = 0.0
    n_iter: int = 0
    beta_cov: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def coef(self) -> dict:
        return dict(zip(self.fixed_names, self.beta))

    def std_errors(self) -> dict:
        if self.beta_cov is None:
            return {}
        return dict(zip(self.fixed_names, np.sqrt(np.diag(self.beta_cov))))


def n_parameters(p: int, q: int) -> int:
    """Fixed effects plus distinct covariance parameters plus residual variance."""
    return p + q * (q + 1) // 2 + 1


def fit(design: MixedDesign, criterion: str = "reml", control: Optional[FitControl] = None) -> LmmFit:
    """Fit by maximising the chosen criterion; beta is GLS at the optimum."""
    if len(design.y) < 2:
        raise ValueError("at least two subjects are required")
    if any(len(y) < 1 for y in design.y):
        raise ValueError("every subject needs at least one observation")
    stats = SufficientStats.from_design(design)
    opt = optimize_theta(stats, criterion, control=control)
    theta = VarianceComponents.from_cholesky(opt.L, opt.sigma_sq)
    beta = opt.evaluation.beta
    D = opt.L @ opt.L.T
    blups = {s: D @ opt.evaluation.u[i] for i, s in enumerate(design.subjects)}
    k = n_parameters(stats.p, stats.q)
    if opt.boundary:
        log.info("variance component at the boundary: %s", theta)
    return LmmFit(beta=beta, fixed_names=list(design.fixed_names), random_names=list(design.random_names),
                  theta=theta, blups=blups, loglik=opt.evaluation.value, criterion=criterion,
                  aic=-2.0 * opt.evaluation.value + 2 * k, n_obs=stats.n_obs, n_params=k,
                  converged=opt.converged, boundary=opt.boundary, grad_norm=opt.grad_norm,
                  n_iter=opt.n_iter, beta_cov=np.linalg.inv(opt.evaluation.H) if stats.p else None)


def fit_data(data: PanelDataset, fixed_terms, random_terms=("intercept",), criterion: str = "reml",
             control: Optional[FitControl] = None) -> LmmFit:
    from .panel_data import design_matrices
    return fit(design_matrices(data, fixed_terms, random_terms), criterion, control)


def _row_matrices(fit_: LmmFit, rows: PanelDataset):
    X, _ = term_matrix(rows, fit_.fixed_names[1:], intercept=True) if fit_.fixed_names[:1] == ["intercept"] \
        else term_matrix(rows, fit_.fixed_names, intercept=False)
    rand = [t for t in fit_.random_names if t != "intercept"]
    Z, _ = term_matrix(rows, rand, intercept="intercept" in fit_.random_names)
    return X, Z


def predict_linear(fit_: LmmFit, rows: PanelDataset) -> np.ndarray:
    """Conditional mean ``x'beta + z'b_i`` on the model scale."""
    X, Z = _row_matrices(fit_, rows)
    b = np.zeros_like(Z)
    for k, s in enumerate(rows.subject_ids):
        try:
            b[k] = fit_.blups[int(s)]
        except KeyError:
            raise KeyError(f"subject {int(s)} was not seen in training") from None
    return X @ fit_.beta + np.sum(Z * b, axis=1)


def predict(fit_: LmmFit, rows: PanelDataset, response_transform: Optional[TransformSpec] = None) -> np.ndarray:
    """Subject-conditional predictions on the original response scale."""
    mu = predict_linear(fit_, rows)
    if response_transform is None:
        return mu
    return response_transform.inverse_response(mu, fit_.theta.sigma_sq)


# ---------------------------------------------------------------------------
# reports

def report_text(fit_: LmmFit) -> str:
    se = fit_.std_errors()
    lines = [f"criterion: {fit_.criterion}", f"n_obs: {fit_.n_obs}", "",
             f"{'term':<24}{'estimate':>14}{'std.error':>14}"]
    for name, b in zip(fit_.fixed_names, fit_.beta):
        lines.append(f"{name:<24}{b:>14.6g}{se.get(name, float('nan')):>14.6g}")
    t = fit_.theta
    lines += ["", "random effects (SD):", f"  intercept   {math.sqrt(t.sigma_b0_sq):.6g}"]
    if t.sigma_b1_sq is not None:
        lines += [f"  slope       {math.sqrt(t.sigma_b1_sq):.6g}", f"  correlation {t.rho:.6g}"]
    lines += [f"  residual    {math.sqrt(t.sigma_sq):.6g}", "",
              f"loglik: {fit_.loglik:.6f}", f"aic: {fit_.aic:.6f}",
              f"converged: {fit_.converged}", f"boundary: {fit_.boundary}"]
    return "\n".join(lines) + "\n"


def to_keyvalue(fit_: LmmFit) -> dict:
    t = fit_.theta
    out = {"criterion": fit_.criterion, "loglik": repr(float(fit_.loglik)), "aic": repr(float(fit_.aic)),
           "n_obs": str(fit_.n_obs), "n_params": str(fit_.n_params), "converged": str(fit_.converged),
           "boundary": str(fit_.boundary), "sigma_b0_sq": repr(float(t.sigma_b0_sq)), "sigma_sq": repr(float(t.sigma_sq)),
           "random_terms": ",".join(fit_.random_names)}
    if t.sigma_b1_sq is not None:
        out["sigma_b1_sq"] = repr(float(t.sigma_b1_sq))
        out["rho"] = repr(float(t.rho))
    for name, b in zip(fit_.fixed_names, fit_.beta):
        out[f"beta.{name}"] = repr(float(b))
    return out


def write_keyvalue(kv: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in kv.items():
            fh.write(f"{k}={v}\n")


def read_keyvalue(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k] = v
    return out
