"""Neural mixed effects: shared network parameters plus regularised per-subject deviations.

Subject ``i`` evaluates the MLP with parameters ``theta_bar + eta_i`` where
``eta_i`` is nonzero only on the configured person-specific groups (for the
benchmark, the output bias).  The full loss is::

    sum_ij (1/sigma^2) (y_ij - mu_ij)^2 / 2  +  sum_i eta_i' Sigma^-1 eta_i

with diagonal ``Sigma``.  Mini-batches scale each present subject's penalty
by ``N_kB / m_k`` (its share of the batch relative to its total row count),
so one epoch's penalties add up to the full penalty.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .numeric_core import AdamState, MlpArchitecture, NetworkParams, adam_step, empty_offsets, \
    mlp_backward, mlp_forward
from .panel_data import NetData, ResponseScaling

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = "non-finite loss"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {detail}")


@dataclass(frozen=True)
class NmeConfig:
    hidden_layer_sizes: tuple = (32, 16)
    input_dim: int = 17
    person_specific_groups: tuple = ("output.bias",)
    epochs: int = 4000
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    variance_floor: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))
        object.__setattr__(self, "person_specific_groups", tuple(self.person_specific_groups))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        for g in self.person_specific_groups:
            self.architecture.locate(g)

    @property
    def architecture(self) -> MlpArchitecture:
        return MlpArchitecture(self.input_dim, self.hidden_layer_sizes)


@dataclass
class NmeState:
    theta_bar: NetworkParams
    eta: dict  # group -> (m, *group_shape)
    Sigma: dict  # group -> group_shape diagonal variances
    sigma_sq: float
    subjects: list
    trace: list = field(default_factory=list)
    penalty_identity: list = field(default_factory=list)  # per-epoch |sum of batch penalties - full penalty|

    @property
    def groups(self) -> tuple:
        return tuple(self.eta)

    def offsets(self, seg) -> Optional[NetworkParams]:
        """Per-row offsets for rows with subject positions ``seg``."""
        if not self.eta:
            return None
        off = empty_offsets(self.theta_bar.arch)
        for g, e in self.eta.items():
            off.set(g, e[seg])
        return off

    def eta_params(self, k: int) -> NetworkParams:
        """Subject ``k``'s full deviation, zero outside the person-specific groups."""
        out = NetworkParams.zeros(self.theta_bar.arch)
        for g, e in self.eta.items():
            out.set(g, e[k].copy())
        return out

    def positions(self, subject_ids) -> np.ndarray:
        pos = {s: k for k, s in enumerate(self.subjects)}
        try:
            return np.array([pos[int(s)] for s in subject_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"subject {exc.args[0]} was not seen in training") from None

    def copy(self) -> "NmeState":
        return NmeState(self.theta_bar.copy(), {g: e.copy() for g, e in self.eta.items()},
                        {g: s.copy() for g, s in self.Sigma.items()}, self.sigma_sq, list(self.subjects),
                        list(self.trace), list(self.penalty_identity))


def init_state(config: NmeConfig, subjects, rng: np.random.Generator) -> NmeState:
    theta = NetworkParams.xavier(config.architecture, rng)
    m = len(subjects)
    eta = {g: np.zeros((m, *np.shape(theta.get(g)))) for g in config.person_specific_groups}
    Sigma = {g: np.ones(np.shape(theta.get(g))) for g in config.person_specific_groups}
    return NmeState(theta, eta, Sigma, 1.0, list(subjects))


# ---------------------------------------------------------------------------
# prediction

def _forward(state: NmeState, data: NetData, population: bool = False):
    if population or not state.eta:
        return mlp_forward(state.theta_bar, data.x), None
    if np.any(data.seg < 0):
        raise KeyError("row belongs to a subject that was not seen in training")
    off = state.offsets(data.seg)
    return mlp_forward(state.theta_bar, data.x, off), off


def predict_one(state: NmeState, x, subject=None, population: bool = False) -> float:
    """Network output for one input; ``population=True`` uses ``eta = 0``."""
    if population or not state.eta:
        return float(mlp_forward(state.theta_bar, x).output)
    if subject is None:
        raise KeyError("a subject is required unless population mode is requested")
    k = int(state.positions([subject])[0])
    return float(mlp_forward(state.theta_bar + state.eta_params(k), x).output)


def predict(state: NmeState, data: NetData, scaling: Optional[ResponseScaling] = None,
            population: bool = False) -> np.ndarray:
    mu = _forward(state, data, population)[0].output
    return mu if scaling is None else scaling.unscale(mu)


# ---------------------------------------------------------------------------
# losses

@dataclass(frozen=True)
class BatchPenaltyLedger:
    counts: np.ndarray  # N_kB per subject position
    totals: np.ndarray  # m_k per subject position

    @classmethod
    def from_batch(cls, seg, totals) -> "BatchPenaltyLedger":
        totals = np.asarray(totals)
        return cls(np.bincount(seg, minlength=totals.size), totals)

    @property
    def weights(self) -> np.ndarray:
        return self.counts / np.maximum(self.totals, 1)

    def check(self, seg) -> None:
        if not np.array_equal(np.bincount(seg, minlength=self.totals.size), self.counts):
            raise ValueError("ledger counts do not match the batch")


def penalty_per_subject(state: NmeState) -> np.ndarray:
    """``eta_k' Sigma^-1 eta_k`` for every subject position."""
    out = np.zeros(len(state.subjects))
    for g, e in state.eta.items():
        out += np.sum((e * e / state.Sigma[g]).reshape(e.shape[0], -1), axis=1)
    return out


def full_loss(state: NmeState, data: NetData) -> float:
    r = data.y - _forward(state, data)[0].output
    return 0.5 * float(r @ r) / state.sigma_sq + float(np.sum(penalty_per_subject(state)))


def minibatch_penalty(state: NmeState, ledger: BatchPenaltyLedger) -> float:
    return float(ledger.weights @ penalty_per_subject(state))


def minibatch_loss(state: NmeState, batch: NetData, ledger: BatchPenaltyLedger) -> float:
    ledger.check(batch.seg)
    r = batch.y - _forward(state, batch)[0].output
    return 0.5 * float(r @ r) / (state.sigma_sq * batch.n) + minibatch_penalty(state, ledger)


def _grads(state: NmeState, data: NetData, scale: float, weights):
    fwd, off = _forward(state, data)
    err = -(data.y - fwd.output) / state.sigma_sq * scale
    m = len(state.subjects)
    g_theta, seg = mlp_backward(state.theta_bar, fwd, err, off, segments=data.seg if state.eta else None,
                                n_segments=m, segment_groups=state.groups)
    g_eta = {}
    for g, e in state.eta.items():
        w = weights.reshape((m,) + (1,) * (e.ndim - 1))
        g_eta[g] = seg[g] + 2.0 * w * e / state.Sigma[g]
    return g_theta, g_eta


def gradients(state: NmeState, batch: NetData, ledger: BatchPenaltyLedger):
    """Gradients of :func:`minibatch_loss` for ``theta_bar`` and every ``eta`` group.

    ``eta`` gradients are full-length arrays; rows of subjects absent from
    the batch are zero.
    """
    if batch.n == 0:
        raise ValueError("empty batch")
    ledger.check(batch.seg)
    return _grads(state, batch, 1.0 / batch.n, ledger.weights)


def full_gradients(state: NmeState, data: NetData):
    """Gradients of :func:`full_loss`."""
    return _grads(state, data, 1.0, np.ones(len(state.subjects)))


# ---------------------------------------------------------------------------
# training

def train(config: NmeConfig, data: NetData, on_epoch=None) -> NmeState:
    """Adam on the mini-batch loss; variances refreshed after every epoch.

    ``theta_bar`` gets dense Adam steps; each ``eta`` group gets lazy Adam
    steps on the rows of subjects present in the batch.  After the batches,
    ``sigma^2`` becomes the mean squared training residual and each ``Sigma``
    entry the n-1 sample variance of that coordinate across subjects,
    floored at ``variance_floor``.
    """
    if data.x.shape[1] != config.input_dim:
        raise ValueError(f"expected {config.input_dim} inputs, got {data.x.shape[1]}")
    rng = np.random.default_rng(config.seed)
    state = init_state(config, data.subjects, rng)
    m = len(data.subjects)
    totals = np.bincount(data.seg, minlength=m)
    hyper = dict(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    arch = config.architecture
    opt_theta = AdamState.zeros_like(state.theta_bar.blocks(), names=arch.group_names, **hyper)
    groups = state.groups
    opt_eta = AdamState.zeros_like([state.eta[g] for g in groups], names=[f"eta.{g}" for g in groups], **hyper)
    n = data.n
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        pen_start = penalty_per_subject(state)
        pen_sum = 0.0
        count_sum = np.zeros(m, dtype=np.int64)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = NetData(data.x[idx], data.y[idx], data.seg[idx], data.subjects)
            ledger = BatchPenaltyLedger.from_batch(batch.seg, totals)
            count_sum += ledger.counts
            pen_sum += float(ledger.weights @ pen_start)
            g_theta, g_eta = gradients(state, batch, ledger)
            blocks, opt_theta = adam_step(opt_theta, state.theta_bar.blocks(), g_theta.blocks())
            state.theta_bar = NetworkParams(arch, blocks[0::2], blocks[1::2])
            if groups:
                rows = np.flatnonzero(ledger.counts)
                new_eta, opt_eta = adam_step(opt_eta, [state.eta[g] for g in groups],
                                             [g_eta[g] for g in groups], rows=rows)
                state.eta = dict(zip(groups, new_eta))
        if not np.array_equal(count_sum, totals):
            raise AssertionError("batch counts do not cover every training row exactly once")
        state.penalty_identity.append(abs(pen_sum - float(np.sum(pen_start))))
        r = data.y - _forward(state, data)[0].output
        state.sigma_sq = max(float(np.mean(r * r)), config.variance_floor)
        if m > 1:
            for g in groups:
                state.Sigma[g] = np.maximum(np.var(state.eta[g], axis=0, ddof=1), config.variance_floor)
        loss = full_loss(state, data)
        if not math.isfinite(loss):
            raise DivergenceError(epoch)
        state.trace.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, state)
    return state


# ---------------------------------------------------------------------------
# serialization

def save_state(state: NmeState, config: NmeConfig, path) -> None:
    """Header ``# key=value`` lines, shared parameters, then one eta row per subject."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# sigma_sq={float(state.sigma_sq)!r}\n")
        for g, s in state.Sigma.items():
            fh.write(f"# Sigma.{g}=" + ",".join(repr(float(v)) for v in np.ravel(s)) + "\n")
        for k, v in asdict(config).items():
            fh.write(f"# config.{k}={v}\n")
        fh.write("# theta_bar=" + ",".join(repr(float(v)) for v in state.theta_bar.flatten()) + "\n")
        for k, s in enumerate(state.subjects):
            parts = [repr(float(v)) for g in state.groups for v in np.ravel(state.eta[g][k])]
            fh.write(f"{s}," + ",".join(parts) + "\n")
