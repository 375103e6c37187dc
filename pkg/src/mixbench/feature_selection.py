"""LASSO screening, backward AIC elimination on the mixed model, and VIF diagnostics."""

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import lmm
from .panel_data import PanelDataset, design_matrices, normalize_term

log = logging.getLogger(__name__)

# Five-term reference set used by the VIF check and the preset interaction scan.
PRESET_TERMS = ("age", "test_time", "jitter_ppq5", "nhr", "hnr")
# Fixed effects of the final refined model (log response, random slope).
FINAL_MODEL_TERMS = ("age", "test_time", "hnr", "test_time:hnr")
FINAL_RANDOM_TERMS = ("intercept", "test_time")


class CollinearityWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# LASSO

def standardize_columns(X):
    """Centre and scale columns with the n-1 standard deviation."""
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    const = np.ptp(X, axis=0) == 0
    if np.any(const):
        raise ValueError(f"constant column(s) {np.flatnonzero(const).tolist()}")
    return (X - mu) / sd, mu, sd


def _check_standardized(X, tol=1e-6):
    if X.shape[0] < 2:
        raise ValueError("need at least two rows")
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    bad = np.flatnonzero((np.abs(mu) > tol) | (np.abs(sd - 1.0) > tol))
    if bad.size:
        raise ValueError(f"columns {bad.tolist()} are not standardised (mean 0, n-1 sd 1)")


def lambda_max(X, y) -> float:
    """Smallest penalty giving the all-zero solution: ``max_j |x_j'y| / n``."""
    X = np.asarray(X, dtype=float)
    return float(np.max(np.abs(X.T @ np.asarray(y, dtype=float))) / X.shape[0])


def _cd(G, c, lam, beta, tol, max_sweeps):
    """Cyclic coordinate descent on ``beta'G beta / 2 - c'beta + lam |beta|_1``.

    Sweeps alternate between the active set and a full pass that confirms
    no inactive coordinate wants to enter, as in glmnet.
    """
    p = c.size
    Gl = G.tolist()
    cl = c.tolist()
    b = beta.tolist()
    g = (G @ beta).tolist()
    diag = [Gl[j][j] for j in range(p)]
    scale = [math.sqrt(d) for d in diag]
    every = list(range(p))
    # a zero coordinate must beat lam by a relative margin to enter, and never
    # enters while an exact duplicate of it is active: any split is optimal
    enter = lam * (1.0 + 1e-12)
    corr = np.abs(G) / np.sqrt(np.outer(diag, diag))
    twins = [[k for k in range(p) if k != j and corr[j, k] >= 1.0 - 1e-12] for j in range(p)]

    def sweep(coords):
        delta = 0.0
        for j in coords:
            old = b[j]
            z = cl[j] - (g[j] - diag[j] * old)
            if old == 0.0 and (abs(z) <= enter or any(b[k] != 0.0 for k in twins[j])):
                continue
            if z > lam:
                new = (z - lam) / diag[j]
            elif z < -lam:
                new = (z + lam) / diag[j]
            else:
                new = 0.0
            if new != old:
                d = new - old
                col = Gl[j]
                for k in range(p):
                    g[k] += col[k] * d
                b[j] = new
                if abs(d) * scale[j] > delta:
                    delta = abs(d) * scale[j]
        return delta

    def polish(active):
        # exact solution on a fixed support and sign pattern, if consistent
        if not active:
            return False
        A = np.array(active)
        sgn = np.sign([b[j] for j in active])
        GA = G[np.ix_(A, A)]
        if np.linalg.cond(GA) > 1e10:
            return False
        bA = np.linalg.solve(GA, c[A] - lam * sgn)
        if np.any(np.sign(bA) != sgn):
            return False
        full = np.zeros(p)
        full[A] = bA
        grad = c - G @ full
        inactive = np.setdiff1d(np.arange(p), A)
        if np.any(np.abs(grad[inactive]) > lam * (1 + 1e-12) + 1e-15):
            return False
        for j, v in zip(active, bA.tolist()):
            b[j] = v
        g[:] = (G @ full).tolist()
        return True

    sweeps = 0
    while sweeps < max_sweeps:
        delta = sweep(every)
        sweeps += 1
        if delta < tol:
            return np.array(b), sweeps
        active = [j for j in every if b[j] != 0.0]
        inner = 0
        while sweeps < max_sweeps:
            sweeps += 1
            inner += 1
            if sweep(active) < tol:
                break
            if inner % 10 == 0 and polish(active):
                break
    warnings.warn(f"coordinate descent did not converge in {max_sweeps} sweeps", RuntimeWarning, stacklevel=3)
    return np.array(b), max_sweeps


def lasso_fit(X, y, lam: float, tol: float = 1e-8, max_sweeps: int = 100_000, beta0=None) -> np.ndarray:
    """Minimise ``(1/2n)||y - X beta||^2 + lam ||beta||_1``.

    ``X`` must be column-standardised (mean 0, n-1 sd 1) and ``y`` centred.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_standardized(X)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n = X.shape[0]
    G = X.T @ X / n
    c = X.T @ y / n
    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    return _cd(G, c, lam, beta, tol, max_sweeps)[0]


def lasso_path(X, y, lambdas, tol: float = 1e-8) -> np.ndarray:
    """Warm-started solutions along a descending lambda sequence."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    G = X.T @ X / n
    c = X.T @ np.asarray(y, dtype=float) / n
    beta = np.zeros(X.shape[1])
    out = np.zeros((len(lambdas), X.shape[1]))
    for k, lam in enumerate(lambdas):
        beta = _cd(G, c, lam, beta, tol, 100_000)[0]
        out[k] = beta
    return out


def kkt_violation(X, y, beta, lam) -> float:
    """Largest departure from the LASSO optimality conditions."""
    n = X.shape[0]
    grad = X.T @ (y - X @ beta) / n
    active = beta != 0
    v_active = np.abs(grad[active] - lam * np.sign(beta[active]))
    v_zero = np.maximum(np.abs(grad[~active]) - lam, 0.0)
    return float(max(v_active.max(initial=0.0), v_zero.max(initial=0.0)))


@dataclass
class LassoPath:
    lambda_grid: np.ndarray
    coefficients: np.ndarray  # (grid, predictors), standardised scale
    names: list
    cv_mean: np.ndarray
    cv_se: np.ndarray
    lambda_choice_rule: str = "cv_min"
    chosen_index: int = 0

    @property
    def lambda_chosen(self) -> float:
        return float(self.lambda_grid[self.chosen_index])

    @property
    def selected(self) -> list:
        beta = self.coefficients[self.chosen_index]
        return [n for n, b in zip(self.names, beta) if b != 0.0]


def subject_folds(subject_ids, folds: int, seed: int = 0) -> np.ndarray:
    """Fold label per row; all rows of a subject share a fold."""
    subjects = np.unique(subject_ids)
    if folds < 2 or folds > subjects.size:
        raise ValueError(f"folds must be in [2, {subjects.size}]")
    perm = np.random.default_rng(seed).permutation(subjects)
    label = {s: k % folds for k, s in enumerate(perm)}
    return np.array([label[s] for s in subject_ids])


def lasso_select(data: PanelDataset, response=None, candidates: Sequence = (), folds: int = 10,
                 rule: str = "cv_min", n_lambda: int = 100, decades: float = 4.0, seed: int = 0,
                 X=None, names=None, groups=None) -> LassoPath:
    """Cross-validated LASSO with subject-grouped folds.

    Either pass ``data`` plus ``candidates`` (column ids) or raw ``X`` with
    ``names`` and ``groups``.
    """
    if rule not in ("cv_min", "cv_1se"):
        raise ValueError(f"unknown rule {rule!r}")
    if X is None:
        names = [normalize_term(c) for c in candidates]
        X = np.column_stack([data.col(c) for c in names])
        groups = data.subject_ids
        y = data.response if response is None else np.asarray(response, dtype=float)
    else:
        X = np.asarray(X, dtype=float)
        names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
        y = np.asarray(response, dtype=float)
        groups = np.arange(X.shape[0]) if groups is None else np.asarray(groups)
    Xs, _, _ = standardize_columns(X)
    yc = y - y.mean()
    lmax = lambda_max(Xs, yc)
    grid = lmax * np.logspace(0.0, -decades, n_lambda)
    coefs = lasso_path(Xs, yc, grid)

    fold = subject_folds(groups, folds, seed)
    errs = np.zeros((folds, n_lambda))
    for k in range(folds):
        tr, te = fold != k, fold == k
        ytr = y[tr]
        if np.ptp(ytr) == 0:
            raise ValueError(f"fold {k}: constant training response")
        try:
            Xk, mu, sd = standardize_columns(X[tr])
        except ValueError as exc:
            raise ValueError(f"fold {k}: {exc}") from None
        ybar = ytr.mean()
        path = lasso_path(Xk, ytr - ybar, grid)
        pred = ((X[te] - mu) / sd) @ path.T + ybar
        errs[k] = np.mean((y[te][:, None] - pred) ** 2, axis=0)
    cv_mean = errs.mean(axis=0)
    cv_se = errs.std(axis=0, ddof=1) / math.sqrt(folds)
    best = int(np.argmin(cv_mean))
    if rule == "cv_1se":
        ok = np.flatnonzero(cv_mean <= cv_mean[best] + cv_se[best])
        best = int(ok.min())
    return LassoPath(grid, coefs, names, cv_mean, cv_se, rule, best)


# ---------------------------------------------------------------------------
# backward elimination

@dataclass
class StepwiseTrace:
    steps: list = field(default_factory=list)  # (terms, aic, dropped term or None)

    @property
    def final_terms(self) -> list:
        return list(self.steps[-1][0]) if self.steps else []

    @property
    def aics(self) -> list:
        return [s[1] for s in self.steps]

    def report(self) -> str:
        lines = []
        for terms, aic, dropped in self.steps:
            lines.append(f"{aic:14.4f}  drop={dropped or '-':<16} terms={','.join(terms)}")
        return "\n".join(lines) + "\n"


def ml_aic(data: PanelDataset, terms, random_terms=("intercept",), response=None) -> float:
    des = design_matrices(data, list(terms), random_terms, response=response)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", lmm.ConvergenceWarning)
        return lmm.fit(des, "ml").aic


def _droppable(terms):
    """Main effects that appear in a retained interaction stay in the model."""
    protected = {p for t in terms if ":" in t for p in t.split(":")}
    return [t for t in terms if t not in protected]


def stepwise_backward(initial_terms, data: PanelDataset, random_terms=("intercept",),
                      response=None) -> StepwiseTrace:
    """Drop the term whose removal lowers the ML AIC most, until none does."""
    terms = [normalize_term(t) for t in initial_terms]
    try:
        current = ml_aic(data, terms, random_terms, response)
    except Exception as exc:
        raise RuntimeError(f"initial model failed to fit: {exc}") from exc
    trace = StepwiseTrace([(tuple(terms), current, None)])
    while terms:
        best_aic, best_term = math.inf, None
        for t in _droppable(terms):
            cand = [u for u in terms if u != t]
            try:
                a = ml_aic(data, cand, random_terms, response)
            except (np.linalg.LinAlgError, ValueError) as exc:
                log.warning("dropping %s failed to fit: %s", t, exc)
                continue
            if a < best_aic:
                best_aic, best_term = a, t
        if best_term is None or not best_aic < current:
            break
        terms = [u for u in terms if u != best_term]
        current = best_aic
        trace.steps.append((tuple(terms), current, best_term))
    aics = trace.aics
    assert all(b <= a for a, b in zip(aics, aics[1:])), "stepwise AIC trace must not increase"
    return trace


# ---------------------------------------------------------------------------
# collinearity

@dataclass
class VifReport:
    names: list
    values: np.ndarray

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values))

    def report(self) -> str:
        return "".join(f"{n:<16}{v:10.4f}\n" for n, v in zip(self.names, self.values))


def vif(X, names: Optional[Sequence] = None) -> VifReport:
    """``1 / (1 - R_j^2)`` from regressing each column on the rest plus an intercept."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("need at least two predictors")
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    if np.any(np.ptp(X, axis=0) == 0):
        raise ValueError("constant column in VIF input")
    n, p = X.shape
    out = np.zeros(p)
    for j in range(p):
        y = X[:, j]
        A = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        rss = float(np.sum((y - A @ coef) ** 2))
        tss = float(np.sum((y - y.mean()) ** 2))
        if rss <= 1e-12 * tss:
            warnings.warn(f"{names[j]} is exactly collinear with the other predictors", CollinearityWarning,
                          stacklevel=2)
            out[j] = math.inf
        else:
            out[j] = max(1.0, tss / rss)
    return VifReport(names, out)


def vif_data(data: PanelDataset, terms=PRESET_TERMS) -> VifReport:
    names = [normalize_term(t) for t in terms]
    return vif(np.column_stack([data.col(t) for t in names]), names)


# ---------------------------------------------------------------------------
# interactions

@dataclass
class InteractionResult:
    pair: tuple
    aic: float
    delta: float  # aic - base aic


def interaction_scan(base_terms, data: PanelDataset, random_terms=("intercept",), response=None):
    """Fit base + each pairwise interaction; rank by ML AIC (best first).

    Returns ``(ranked results, base aic, failures)``.
    """
    base = [normalize_term(t) for t in base_terms]
    base_aic = ml_aic(data, base, random_terms, response)
    mains = [t for t in base if ":" not in t]
    results, failures = [], []
    for a, b in itertools.combinations(mains, 2):
        term = f"{a}:{b}"
        try:
            aic = ml_aic(data, base + [term], random_terms, response)
        except Exception as exc:
            failures.append(((a, b), str(exc)))
            continue
        results.append(InteractionResult((a, b), aic, aic - base_aic))
    results.sort(key=lambda r: r.aic)
    return results, base_aic, failures
