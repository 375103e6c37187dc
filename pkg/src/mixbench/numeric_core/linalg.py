"""Dense SPD kernels backed by LAPACK's Cholesky routines."""

import numpy as np
from scipy.linalg import lapack


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorisation breaks down.

    ``pivot`` is the zero-based index of the leading minor that is not
    positive definite.
    """

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (pivot {pivot})")


def _check_square_symmetric(A, tol=1e-10):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return A


def cholesky(A) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    A = _check_square_symmetric(A)
    if A.shape[0] == 0:
        return A.copy()
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return L


def cholesky_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` for SPD ``A``.

    ``B`` may be a vector or a matrix; the result has the same shape.
    """
    L = cholesky(A)
    B = np.asarray(B, dtype=float)
    if B.shape[0] != L.shape[0]:
        raise ValueError(f"shape mismatch: A is {L.shape}, B is {B.shape}")
    if L.shape[0] == 0:
        return B.copy()
    X, info = lapack.dpotrs(L, B, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs: illegal argument {-info}")
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("non-finite solution")
    return X


def logdet_spd(A) -> float:
    """log|A| as twice the summed log-diagonal of the Cholesky factor."""
    L = cholesky(A)
    return 2.0 * float(np.sum(np.log(np.diag(L))))
