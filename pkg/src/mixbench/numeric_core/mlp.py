"""Hand-derived forward/backward passes for a ReLU multilayer perceptron.

Layers are numbered from the input: ``hidden1``, ``hidden2``, ..., ``output``.
Weight matrices have shape ``(fan_out, fan_in)``.  The flat parameter order is
layer-major, weight before bias, row-major within each matrix.

Offsets are an optional second :class:`NetworkParams` added to the shared
parameters before the layer is applied.  Any offset entry may be ``None``
(inactive), parameter-shaped (shared by all rows), or carry a leading row
axis so each input row sees its own effective parameters.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_layer_sizes: tuple = ()
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_layer_sizes):
            raise ValueError("all layer sizes must be >= 1")
        if self.hidden_activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation != "identity":
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_layer_sizes) + 1

    @property
    def layer_shapes(self) -> list:
        sizes = [self.input_dim, *self.hidden_layer_sizes, 1]
        return [(sizes[k + 1], sizes[k]) for k in range(self.n_layers)]

    def layer_name(self, k: int) -> str:
        return "output" if k == self.n_layers - 1 else f"hidden{k + 1}"

    @property
    def group_names(self) -> list:
        names = []
        for k in range(self.n_layers):
            names += [f"{self.layer_name(k)}.weight", f"{self.layer_name(k)}.bias"]
        return names

    def locate(self, group: str):
        """Map a group name such as ``"output.bias"`` to ``(layer, kind)``."""
        try:
            layer, kind = group.split(".")
            k = [self.layer_name(i) for i in range(self.n_layers)].index(layer)
        except ValueError:
            raise KeyError(f"unknown parameter group {group!r}") from None
        if kind not in ("weight", "bias"):
            raise KeyError(f"unknown parameter group {group!r}")
        return k, kind

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass
class NetworkParams:
    arch: MlpArchitecture
    weights: list
    biases: list

    @classmethod
    def zeros(cls, arch: MlpArchitecture) -> "NetworkParams":
        return cls(arch, [np.zeros(s) for s in arch.layer_shapes],
                   [np.zeros(s[0]) for s in arch.layer_shapes])

    @classmethod
    def xavier(cls, arch: MlpArchitecture, rng: np.random.Generator) -> "NetworkParams":
        """Xavier-uniform weights, zero biases."""
        weights = []
        for fan_out, fan_in in arch.layer_shapes:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        return cls(arch, weights, [np.zeros(s[0]) for s in arch.layer_shapes])

    def get(self, group: str):
        k, kind = self.arch.locate(group)
        return self.weights[k] if kind == "weight" else self.biases[k]

    def set(self, group: str, value) -> None:
        k, kind = self.arch.locate(group)
        (self.weights if kind == "weight" else self.biases)[k] = value

    def blocks(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.blocks()])

    @classmethod
    def from_flat(cls, arch: MlpArchitecture, vec) -> "NetworkParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {vec.shape}")
        weights, biases, pos = [], [], 0
        for fan_out, fan_in in arch.layer_shapes:
            weights.append(vec[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in).copy())
            pos += fan_out * fan_in
            biases.append(vec[pos:pos + fan_out].copy())
            pos += fan_out
        return cls(arch, weights, biases)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def sum_of_squares(self) -> float:
        return float(sum(np.sum(a * a) for a in self.blocks()))

    def __add__(self, other: "NetworkParams") -> "NetworkParams":
        return NetworkParams(self.arch, [a + b for a, b in zip(self.weights, other.weights)],
                             [a + b for a, b in zip(self.biases, other.biases)])

    def __neg__(self) -> "NetworkParams":
        return NetworkParams(self.arch, [-W for W in self.weights], [-b for b in self.biases])


def empty_offsets(arch: MlpArchitecture) -> NetworkParams:
    """Offsets with every group inactive."""
    return NetworkParams(arch, [None] * arch.n_layers, [None] * arch.n_layers)


class ForwardPass(NamedTuple):
    output: np.ndarray
    activations: list  # input to each layer, activations[0] is x
    preactivations: list  # pre-activation of each layer


def _check_offsets(params, offsets, n):
    if offsets is None:
        return None
    for k, (fan_out, fan_in) in enumerate(params.arch.layer_shapes):
        for off, shape in ((offsets.weights[k], (fan_out, fan_in)), (offsets.biases[k], (fan_out,))):
            if off is None:
                continue
            if off.shape != shape and off.shape != (n, *shape):
                raise ValueError(f"offset shape {off.shape} does not match {shape} for layer {k}")
    return offsets


def mlp_forward(params: NetworkParams, x, offsets: Optional[NetworkParams] = None) -> ForwardPass:
    """Evaluate the network on a single input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ValueError(f"input shape {x.shape} does not match input_dim {params.arch.input_dim}")
    n = X.shape[0]
    offsets = _check_offsets(params, offsets, n)
    activations, preacts = [X], []
    a = X
    last = params.arch.n_layers - 1
    for k in range(params.arch.n_layers):
        z = a @ params.weights[k].T + params.biases[k]
        if offsets is not None:
            Wo, bo = offsets.weights[k], offsets.biases[k]
            if Wo is not None:
                z = z + (a @ Wo.T if Wo.ndim == 2 else np.einsum("noi,ni->no", Wo, a))
            if bo is not None:
                z = z + bo
        preacts.append(z)
        a = z if k == last else np.maximum(z, 0.0)
        if k < last:
            activations.append(a)
    out = a[:, 0]
    return ForwardPass(out[0] if single else out, activations, preacts)


def mlp_backward(params: NetworkParams, fwd: ForwardPass, error_signal,
                 offsets: Optional[NetworkParams] = None,
                 segments=None, n_segments: int = 0,
                 segment_groups: Sequence = ()):
    """Backpropagate ``d loss / d output`` through a cached forward pass.

    Returns ``(grads, segment_grads)``.  ``grads`` sums over rows and has the
    shape of ``params``; by the chain rule through ``params + offsets`` it is
    also the gradient with respect to a shared offset.  When ``segments``
    (an integer label per row) is given, ``segment_grads`` maps each name in
    ``segment_groups`` to an array of shape ``(n_segments, *group_shape)``
    holding the per-segment sums, which is what per-subject offsets need.
    """
    arch = params.arch
    X = fwd.activations[0]
    n = X.shape[0]
    err = np.atleast_1d(np.asarray(error_signal, dtype=float))
    if err.shape != (n,):
        raise ValueError(f"error signal has shape {err.shape}, expected ({n},)")
    if len(fwd.preactivations) != arch.n_layers or fwd.preactivations[-1].shape != (n, 1):
        raise ValueError("forward cache does not match the network")
    offsets = _check_offsets(params, offsets, n)

    wanted = {}
    for g in segment_groups:
        k, kind = arch.locate(g)
        wanted.setdefault(k, []).append((g, kind))
    if wanted and segments is None:
        raise ValueError("segment_groups requires segments")
    if segments is not None:
        segments = np.asarray(segments)
        onehot = np.zeros((n, n_segments))
        onehot[np.arange(n), segments] = 1.0

    gW, gb = [None] * arch.n_layers, [None] * arch.n_layers
    seg_grads = {}
    delta = err[:, None]
    for k in range(arch.n_layers - 1, -1, -1):
        a = fwd.activations[k]
        gW[k] = delta.T @ a
        gb[k] = delta.sum(axis=0)
        for g, kind in wanted.get(k, ()):
            if kind == "bias":
                seg_grads[g] = onehot.T @ delta
            else:
                outer = (delta[:, :, None] * a[:, None, :]).reshape(n, -1)
                seg_grads[g] = (onehot.T @ outer).reshape(n_segments, *params.weights[k].shape)
        if k == 0:
            break
        back = delta @ params.weights[k]
        Wo = None if offsets is None else offsets.weights[k]
        if Wo is not None:
            back = back + (delta @ Wo if Wo.ndim == 2 else np.einsum("no,noi->ni", delta, Wo))
        delta = back * (fwd.preactivations[k - 1] > 0.0)
    return NetworkParams(arch, gW, gb), seg_grads
