"""Neural building blocks: the tanh MLP used for ODE dynamics and a GRU cell.

Two evaluation routes exist for the MLP. :func:`mlp_forward` composes
autodiff ops and is used wherever graph construction is cheap.
:func:`mlp_apply` / :func:`mlp_vjp` run on raw arrays and are used inside the
fused ODE-solve node, where building a graph per solver stage would be too slow.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, sigmoid, tanh

__all__ = [
    "MlpParams",
    "GruParams",
    "init_mlp",
    "init_gru",
    "init_linear",
    "mlp_forward",
    "mlp_apply",
    "mlp_vjp",
    "gru_step",
    "MlpVectorField",
    "save_arrays",
    "load_arrays",
]

_ACTIVATIONS = {"tanh", "identity"}


@dataclass
class MlpParams:
    """Weights ``(in, out)`` and biases per linear layer; tanh between layers."""

    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "tanh"
    final_activation: str = "identity"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("an MLP needs one bias per weight matrix")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("layer shapes do not chain")
        for w_prev, w_next in zip(self.weights, self.weights[1:]):
            if w_prev.shape[1] != w_next.shape[0]:
                raise ValueError("layer shapes do not chain")
        if self.activation not in _ACTIVATIONS or self.final_activation not in _ACTIVATIONS:
            raise ValueError("activation must be 'tanh' or 'identity'")

    @property
    def in_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_size(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[1] if self.depth else 0

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]


@dataclass
class GruParams:
    """Gated recurrent cell: update gate ``z``, reset gate ``r``, candidate ``n``."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_n: Tensor
    u_n: Tensor
    b_n: Tensor

    @property
    def hidden_size(self) -> int:
        return self.u_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_z.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_n, self.u_n, self.b_n]


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


def init_mlp(
    rng: np.random.Generator,
    in_size: int,
    out_size: int,
    width: int = 50,
    depth: int = 2,
    final_activation: str = "identity",
) -> MlpParams:
    sizes = [in_size] + [width] * depth + [out_size]
    layers = [init_linear(rng, a, b) for a, b in zip(sizes, sizes[1:])]
    return MlpParams(
        weights=[w for w, _ in layers],
        biases=[b for _, b in layers],
        final_activation=final_activation,
    )


def init_gru(rng: np.random.Generator, input_size: int, hidden_size: int) -> GruParams:
    bound = 1.0 / np.sqrt(hidden_size)
    parts = {}
    for gate in "zrn":
        parts[f"w_{gate}"] = Tensor(rng.uniform(-bound, bound, (input_size, hidden_size)), requires_grad=True)
        parts[f"u_{gate}"] = Tensor(rng.uniform(-bound, bound, (hidden_size, hidden_size)), requires_grad=True)
        parts[f"b_{gate}"] = Tensor(np.zeros(hidden_size), requires_grad=True)
    return GruParams(**parts)


def _check_input(params: MlpParams, size: int) -> None:
    if size != params.in_size:
        raise ValueError(f"MLP expects input width {params.in_size}, got {size}")


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    _check_input(params, x.shape[-1])
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w + b
        act = params.activation if i < n - 1 else params.final_activation
        if act == "tanh":
            x = tanh(x)
    return x


def mlp_apply(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Array-level forward pass; returns the output and the layer inputs for :func:`mlp_vjp`."""
    _check_input(params, x.shape[-1])
    n = len(params.weights)
    inputs = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(x)
        x = x @ w.data + b.data
        act = params.activation if i < n - 1 else params.final_activation
        if act == "tanh":
            x = np.tanh(x)
    inputs.append(x)
    return x, inputs


def mlp_vjp(params: MlpParams, cache: list[np.ndarray], g: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Pull ``g`` back through an :func:`mlp_apply` call.

    Returns the input gradient and parameter gradients ordered like
    :meth:`MlpParams.parameters`.
    """
    n = len(params.weights)
    grads: list[np.ndarray] = [None] * (2 * n)  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        act = params.activation if i < n - 1 else params.final_activation
        if act == "tanh":
            out = cache[i + 1]
            g = g * (1.0 - out * out)
        x = cache[i]
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        grads[2 * i] = x2.T @ g2
        grads[2 * i + 1] = g2.sum(axis=0)
        g = g @ params.weights[i].data.T
    return g, grads


def gru_step(params: GruParams, h: Tensor, x: Tensor) -> Tensor:
    """One GRU update: ``h' = z * h + (1 - z) * n``."""
    if h.shape[-1] != params.hidden_size:
        raise ValueError(f"GRU hidden size is {params.hidden_size}, got state of width {h.shape[-1]}")
    if x.shape[-1] != params.input_size:
        raise ValueError(f"GRU input size is {params.input_size}, got {x.shape[-1]}")
    z = sigmoid(x @ params.w_z + h @ params.u_z + params.b_z)
    r = sigmoid(x @ params.w_r + h @ params.u_r + params.b_r)
    n = tanh(x @ params.w_n + r * (h @ params.u_n) + params.b_n)
    return z * h + (1.0 - z) * n


@dataclass
class MlpVectorField:
    """Autonomous vector field ``dy/dt = mlp(y)`` usable by the fused ODE solve."""

    mlp: MlpParams
    evaluations: int = field(default=0, compare=False)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def __call__(self, t: float, y: np.ndarray):
        self.evaluations += 1
        return mlp_apply(self.mlp, y)

    def vjp(self, cache, g: np.ndarray):
        return mlp_vjp(self.mlp, cache, g)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_FORMAT = "latent-ecg-arrays"
_VERSION = 1


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write named float arrays as JSON (shape + row-major values).

    Floats are written with ``repr`` precision, so reading back is bit-exact.
    """
    doc = {
        "format": _FORMAT,
        "version": _VERSION,
        "metadata": metadata or {},
        "arrays": {name: {"shape": list(a.shape), "values": np.asarray(a, dtype=np.float64).ravel().tolist()} for name, a in arrays.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != _FORMAT:
        raise ValueError(f"{path} is not a parameter checkpoint")
    if doc.get("version") != _VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    arrays = {name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"]) for name, entry in doc["arrays"].items()}
    return arrays, doc["metadata"]
