"""Adam with bias correction, plus an optional lazy row-subset update."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    names: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, blocks, names=None, **hyper) -> "AdamState":
        blocks = list(blocks)
        return cls([np.zeros_like(b, dtype=float) for b in blocks],
                   [np.zeros_like(b, dtype=float) for b in blocks],
                   names=list(names) if names is not None else [f"block{i}" for i in range(len(blocks))],
                   **hyper)


def adam_step(state: AdamState, params, grads, rows=None):
    """One Adam update of a list of parameter blocks.

    Returns ``(new_params, new_state)``; inputs are not modified.  When
    ``rows`` is given, only those leading-axis rows of every block (and of
    its moment accumulators) are touched; the step counter is still global,
    as in sparse/lazy Adam.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have the same number of blocks")
    for name, p, g in zip(state.names, params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {name} {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p, m, v = np.array(p, dtype=float), m.copy(), v.copy()
        if rows is None:
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        else:
            gr = g[rows]
            m[rows] = state.beta1 * m[rows] + (1.0 - state.beta1) * gr
            v[rows] = state.beta2 * v[rows] + (1.0 - state.beta2) * gr * gr
            p[rows] = p[rows] - state.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + state.eps)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps, list(state.names))
    return new_p, new_state
