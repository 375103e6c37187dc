"""Shared numerical kernels: SPD linear algebra, MLP passes, Adam, gradient checks."""

from .gradcheck import check_gradient
from .linalg import NotPositiveDefiniteError, cholesky, cholesky_solve, logdet_spd
from .mlp import (ForwardPass, MlpArchitecture, NetworkParams, empty_offsets,
                  mlp_backward, mlp_forward)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "ForwardPass", "MlpArchitecture", "NetworkParams", "NotPositiveDefiniteError",
    "adam_step", "check_gradient", "cholesky", "cholesky_solve", "empty_offsets", "logdet_spd",
    "mlp_backward", "mlp_forward",
]
