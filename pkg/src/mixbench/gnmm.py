"""Neural network mixed model: MLP fixed-effect surface plus a subject random intercept.

Gaussian case throughout: identity link, unit variance function, dispersion
``phi = sigma^2``.  The conditional mean for row ``j`` of subject ``i`` is
``mu_ij = f(x_ij; theta) + b_i`` where ``f`` is a ReLU MLP with identity
output.  Training maximises::

    (1/phi) sum_ij -(y_ij - mu_ij)^2 / 2  -  sum_i b_i^2 / (2 D)  -  lam ||theta||^2

which is the Laplace-approximated quasi-likelihood with the log-determinant
term dropped.  Setting ``random_intercept=False`` gives the plain ridge MLP
baseline.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .numeric_core import MlpArchitecture, NetworkParams, mlp_backward, mlp_forward
from .panel_data import NetData, ResponseScaling

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = "non-finite objective"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {detail}")


@dataclass(frozen=True)
class GnmmConfig:
    hidden_layer_sizes: tuple = (3,)
    input_dim: int = 17
    ridge_lambda: float = 0.001
    learning_rate: float = 0.005
    epochs: int = 500
    batch_size: int = 64
    random_intercept: bool = True
    seed: int = 0
    laplace_refresh: bool = True
    variance_floor: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.ridge_lambda < 0 or not self.learning_rate > 0:
            raise ValueError("ridge_lambda must be >= 0 and learning_rate > 0")

    @property
    def architecture(self) -> MlpArchitecture:
        return MlpArchitecture(self.input_dim, self.hidden_layer_sizes)


@dataclass
class GnmmState:
    params: NetworkParams
    b: np.ndarray
    sigma_sq: float
    sigma_b_sq: float
    subjects: list
    random_intercept: bool = True
    trace: list = field(default_factory=list)

    def subject_positions(self, subject_ids) -> np.ndarray:
        pos = {s: k for k, s in enumerate(self.subjects)}
        out = np.empty(len(subject_ids), dtype=np.int64)
        for k, s in enumerate(subject_ids):
            if int(s) not in pos:
                raise KeyError(f"subject {int(s)} was not seen in training")
            out[k] = pos[int(s)]
        return out

    def copy(self) -> "GnmmState":
        return GnmmState(self.params.copy(), self.b.copy(), self.sigma_sq, self.sigma_b_sq,
                         list(self.subjects), self.random_intercept, list(self.trace))


def init_state(config: GnmmConfig, subjects, rng: np.random.Generator) -> GnmmState:
    params = NetworkParams.xavier(config.architecture, rng)
    return GnmmState(params, np.zeros(len(subjects)), 1.0, 1.0, list(subjects), config.random_intercept)


# ---------------------------------------------------------------------------
# model terms

def _b_rows(state: GnmmState, seg) -> np.ndarray:
    if not state.random_intercept:
        return 0.0
    seg = np.asarray(seg)
    if np.any(seg < 0):
        raise KeyError("row belongs to a subject that was not seen in training")
    return state.b[seg]


def forward_mean(state: GnmmState, x, subject=None) -> np.ndarray:
    """``f(x) + b_i``; ``subject`` is a subject id or an array of ids."""
    out = mlp_forward(state.params, x).output
    if not state.random_intercept:
        return out
    if subject is None:
        raise KeyError("a subject is required when the random intercept is enabled")
    ids = np.atleast_1d(subject)
    b = state.b[state.subject_positions(ids)]
    return out + (b[0] if np.ndim(subject) == 0 else b)


def quasi_deviance(y, mu):
    """``int_y^mu (y - u) du = -(y - mu)^2 / 2`` for the Gaussian family."""
    y, mu = np.asarray(y, dtype=float), np.asarray(mu, dtype=float)
    return -0.5 * (y - mu) ** 2


def _prior(state: GnmmState) -> float:
    if not state.random_intercept:
        return 0.0
    if state.sigma_b_sq <= 0:
        if np.any(state.b != 0):
            raise ValueError("random-intercept variance is zero but some b_i are nonzero")
        return 0.0
    return -float(state.b @ state.b) / (2.0 * state.sigma_b_sq)


def training_objective(state: GnmmState, data: NetData, config: GnmmConfig) -> float:
    mu = mlp_forward(state.params, data.x).output + _b_rows(state, data.seg)
    data_term = float(np.sum(quasi_deviance(data.y, mu))) / state.sigma_sq
    return data_term + _prior(state) - config.ridge_lambda * state.params.sum_of_squares()


@dataclass
class GnmmGradients:
    params: NetworkParams
    b: np.ndarray  # full-length; zero for subjects absent from the batch


def quasi_score_gradients(state: GnmmState, batch: NetData, config: GnmmConfig,
                          include_penalty: bool = True) -> GnmmGradients:
    """Gradient of the training objective restricted to the rows of ``batch``.

    The network part is backpropagation with error signal ``(y - mu)/phi``
    plus ``-2 lam theta``; the intercept part is
    ``sum_j (y_ij - mu_ij)/phi - b_i/D`` for subjects present in the batch.
    """
    if batch.n == 0:
        raise ValueError("empty batch")
    fwd = mlp_forward(state.params, batch.x)
    r = batch.y - fwd.output - _b_rows(state, batch.seg)
    err = r / state.sigma_sq
    grads, _ = mlp_backward(state.params, fwd, err)
    if include_penalty and config.ridge_lambda:
        lam2 = 2.0 * config.ridge_lambda
        grads = NetworkParams(grads.arch, [g - lam2 * w for g, w in zip(grads.weights, state.params.weights)],
                              [g - lam2 * c for g, c in zip(grads.biases, state.params.biases)])
    gb = np.zeros_like(state.b)
    if state.random_intercept:
        gb = np.bincount(batch.seg, weights=err, minlength=state.b.size)
        if include_penalty and state.sigma_b_sq > 0:
            present = np.bincount(batch.seg, minlength=state.b.size) > 0
            gb[present] -= state.b[present] / state.sigma_b_sq
    return GnmmGradients(grads, gb)


def batch_objective(state: GnmmState, batch: NetData, config: GnmmConfig, counts) -> float:
    """One batch's share of the training objective.

    The data term covers the batch rows; the ridge is weighted by
    ``|B|/n`` and subject ``i``'s prior by ``N_iB/n_i``, so the shares of a
    partition of the training rows add up to :func:`training_objective`.
    """
    counts = np.asarray(counts, dtype=float)
    mu = mlp_forward(state.params, batch.x).output + _b_rows(state, batch.seg)
    value = float(np.sum(quasi_deviance(batch.y, mu))) / state.sigma_sq
    value -= config.ridge_lambda * state.params.sum_of_squares() * batch.n / counts.sum()
    if state.random_intercept and state.sigma_b_sq > 0:
        w = np.bincount(batch.seg, minlength=counts.size) / counts
        value -= float(w @ (state.b ** 2)) / (2.0 * state.sigma_b_sq)
    return value


def batch_gradients(state: GnmmState, batch: NetData, config: GnmmConfig, counts) -> GnmmGradients:
    """Gradient of :func:`batch_objective` in the network parameters and every ``b_i``."""
    counts = np.asarray(counts, dtype=float)
    g = quasi_score_gradients(state, batch, config, include_penalty=False)
    shrink = 2.0 * config.ridge_lambda * batch.n / counts.sum()
    params = NetworkParams(g.params.arch, [a - shrink * w for a, w in zip(g.params.weights, state.params.weights)],
                           [a - shrink * c for a, c in zip(g.params.biases, state.params.biases)])
    gb = g.b
    if state.random_intercept and state.sigma_b_sq > 0:
        gb = gb - np.bincount(batch.seg, minlength=counts.size) / counts * state.b / state.sigma_b_sq
    return GnmmGradients(params, gb)


def network_residuals(state: GnmmState, data: NetData) -> np.ndarray:
    """``y - f(x)``, the residual without the random intercept."""
    return data.y - mlp_forward(state.params, data.x).output


def laplace_mode(state: GnmmState, data: NetData) -> np.ndarray:
    """Closed-form mode ``D sum_j r_ij / (phi + n_i D)`` for every subject."""
    if not state.sigma_b_sq > 0:
        raise ValueError("random-intercept variance must be positive")
    r = network_residuals(state, data)
    m = len(state.subjects)
    s = np.bincount(data.seg, weights=r, minlength=m)
    n = np.bincount(data.seg, minlength=m)
    D = state.sigma_b_sq
    return D * s / (state.sigma_sq + n * D)


def kappa_prime(state: GnmmState, data: NetData, b) -> np.ndarray:
    """Derivative in ``b_i`` of the per-subject integrand exponent."""
    r = network_residuals(state, data)
    m = len(state.subjects)
    n = np.bincount(data.seg, minlength=m)
    s = np.bincount(data.seg, weights=r, minlength=m)
    b = np.asarray(b, dtype=float)
    return (s - n * b) / state.sigma_sq - b / state.sigma_b_sq


def laplace_loglik(state: GnmmState, data: NetData, config: GnmmConfig):
    """Laplace objective with its log-determinant term reported separately.

    Returns ``(objective without the term, the dropped term)``; the term is
    ``-1/2 sum_i log(1 + n_i D / phi)`` for the Gaussian case.
    """
    n = np.bincount(data.seg, minlength=len(state.subjects))
    dropped = -0.5 * float(np.sum(np.log1p(n * state.sigma_b_sq / state.sigma_sq))) if state.random_intercept else 0.0
    return training_objective(state, data, config), dropped


def joint_loglik(state: GnmmState, data: NetData, config: GnmmConfig) -> float:
    """Training objective plus the Gaussian normalising constants.

    ``log p(y | b) + log p(b) - lam ||theta||^2``.  Unlike the bare objective
    it is comparable across changes of ``phi`` and ``D``, which the epoch
    updates maximise, so it is the quantity tracked during training.
    """
    value = training_objective(state, data, config) - 0.5 * data.n * math.log(2 * math.pi * state.sigma_sq)
    if state.random_intercept and state.sigma_b_sq > 0:
        value -= 0.5 * len(state.subjects) * math.log(2 * math.pi * state.sigma_b_sq)
    return value


# ---------------------------------------------------------------------------
# training

def _sgd_update(params: NetworkParams, grads: NetworkParams, lr: float) -> None:
    for k in range(params.arch.n_layers):
        params.weights[k] += lr * grads.weights[k]
        params.biases[k] += lr * grads.biases[k]


def train(config: GnmmConfig, data: NetData, on_epoch=None) -> GnmmState:
    """Mini-batch gradient ascent on the training objective.

    Within an epoch each batch ``B`` takes an ascent step of size
    ``lr/|B|`` on its share of the objective: the batch data term, the ridge
    scaled by ``|B|/n`` and each present subject's prior scaled by
    ``N_iB/n_i``, so the shares of one epoch add up to the full objective.
    After the batches the intercepts are refreshed to the Laplace mode, then
    ``phi`` becomes the mean squared residual and ``D`` the n-1 sample
    variance of the intercepts.  :func:`joint_loglik` is recorded once per
    epoch after these updates.
    """
    if data.x.shape[1] != config.input_dim:
        raise ValueError(f"expected {config.input_dim} inputs, got {data.x.shape[1]}")
    if np.any(data.seg < 0):
        raise ValueError("training rows must all map to subjects")
    rng = np.random.default_rng(config.seed)
    state = init_state(config, data.subjects, rng)
    n, m = data.n, len(data.subjects)
    counts = np.bincount(data.seg, minlength=m).astype(float)
    use_b = config.random_intercept
    params = state.params
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = NetData(data.x[idx], data.y[idx], data.seg[idx], data.subjects)
            g = batch_gradients(state, batch, config, counts)
            step = config.learning_rate / idx.size
            for k in range(params.arch.n_layers):
                params.weights[k] += step * g.params.weights[k]
                params.biases[k] += step * g.params.biases[k]
            if use_b:
                state.b += step * g.b
        if use_b and config.laplace_refresh:
            state.b = laplace_mode(state, data)
        if not np.all(np.isfinite(params.flatten())):
            raise DivergenceError(epoch, "non-finite parameters")
        resid = data.y - mlp_forward(params, data.x).output - (state.b[data.seg] if use_b else 0.0)
        state.sigma_sq = max(float(np.mean(resid ** 2)), config.variance_floor)
        if use_b:
            state.sigma_b_sq = max(float(np.var(state.b, ddof=1)) if m > 1 else 0.0, config.variance_floor)
        obj = joint_loglik(state, data, config)
        if not math.isfinite(obj):
            raise DivergenceError(epoch)
        state.trace.append(obj)
        if on_epoch is not None:
            on_epoch(epoch, state)
    return state


def predict(state: GnmmState, data: NetData, scaling: Optional[ResponseScaling] = None) -> np.ndarray:
    """Original-scale predictions; every row's subject must be known."""
    mu = mlp_forward(state.params, data.x).output + _b_rows(state, data.seg)
    return mu if scaling is None else scaling.unscale(mu)


# ---------------------------------------------------------------------------
# serialization

def save_state(state: GnmmState, config: GnmmConfig, path) -> None:
    """Key-value header lines (``# key=value``) then one parameter per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# sigma_sq={float(state.sigma_sq)!r}\n# sigma_b_sq={float(state.sigma_b_sq)!r}\n")
        for k, v in asdict(config).items():
            fh.write(f"# config.{k}={v}\n")
        fh.write("# subjects=" + ",".join(str(s) for s in state.subjects) + "\n")
        fh.write("# b=" + ",".join(repr(float(v)) for v in state.b) + "\n")
        for v in state.params.flatten():
            fh.write(f"{float(v)!r}\n")


def load_state(path, config: GnmmConfig) -> GnmmState:
    header, values = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition("=")
                header[k] = v
            elif line.strip():
                values.append(float(line))
    params = NetworkParams.from_flat(config.architecture, np.array(values))
    subjects = [int(s) for s in header["subjects"].split(",") if s]
    b = np.array([float(v) for v in header["b"].split(",") if v])
    return GnmmState(params, b, float(header["sigma_sq"]), float(header["sigma_b_sq"]), subjects,
                     config.random_intercept)
