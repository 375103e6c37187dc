import numpy as np


def check_gradient(f, x, analytic_grad, h: float = 1e-5) -> float:
    """Largest coordinate error between ``analytic_grad`` and central differences.

    The error of coordinate ``k`` is ``|a_k - n_k| / max(1, |n_k|)``.
    """
    x = np.asarray(x, dtype=float)
    analytic_grad = np.asarray(analytic_grad, dtype=float)
    if analytic_grad.shape != x.shape:
        raise ValueError("gradient and point have different shapes")
    worst = 0.0
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        fp, fm = f(x + e), f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"objective is not finite around coordinate {k}")
        num = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(analytic_grad.flat[k] - num) / max(1.0, abs(num)))
    return worst
