# -*- coding: utf-8 -*-

"""Fully connected power allocation network.

``K`` inputs (the small-scale gains, multiplied by ``input_scale``), two
hidden ReLU layers of width ``K`` and a softmax output of width ``K``. The
output is the fraction of ``Pmax`` allocated to each user, so the power
constraint holds by construction.

Backpropagation is written out by hand; batches are the rows of a 2-D
array. All math is float64.

Parameter file format (``.npz``, version 1): scalar arrays
``format_version``, ``input_scale``, ``n_layers`` and for every layer ``i``
the weight matrix ``W{i}`` of shape ``(fan_in, fan_out)`` and the bias
vector ``b{i}`` of shape ``(fan_out,)``.
"""

import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Union

import numpy as np

from urllc_allocator.errors import InvalidInputError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
HIDDEN_LAYERS = 2


@dataclass
class MlpParams:
    """Weights and biases of the network, layer by layer.

    The same structure holds gradients, see :func:`backward`.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input_scale: float = 1.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("Need one bias vector per weight matrix")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        fan_in = self.weights[0].shape[0]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[0] != fan_in or b.shape != (w.shape[1],):
                raise InvalidInputError("Inconsistent layer shapes")
            fan_in = w.shape[1]
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise InvalidInputError("Parameters must be finite")

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.input_scale,
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vector: np.ndarray) -> "MlpParams":
        """Same structure as self with the values taken from ``vector``."""
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.size:
            raise InvalidInputError(
                f"Expected {self.size} values, got {vector.size}"
            )
        out, start = [], 0
        for a in self.arrays():
            out.append(vector[start:start + a.size].reshape(a.shape))
            start += a.size
        n = len(self.weights)
        return MlpParams(out[:n], out[n:], self.input_scale)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def l1_norm(self) -> float:
        return float(sum(np.abs(a).sum() for a in self.arrays()))

    def add_scaled(self, other: "MlpParams", factor: float) -> "MlpParams":
        """``self + factor * other``"""
        return MlpParams(
            [w + factor * dw for w, dw in zip(self.weights, other.weights)],
            [b + factor * db for b, db in zip(self.biases, other.biases)],
            self.input_scale,
        )


@dataclass
class ForwardTrace:
    """Cached values of a forward pass, consumed by :func:`backward`.

    ``activations[i]`` is the input of layer ``i``, ``pre_activations[i]``
    its affine output.
    """

    activations: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    output: np.ndarray = None


def init(
    rng: np.random.Generator,
    n_users: int,
    hidden_layers: int = HIDDEN_LAYERS,
    input_scale: float = 1.0,
) -> MlpParams:
    """Random parameters.

    Weights are zero-mean normal with standard deviation
    ``sqrt(2 / fan_in)`` in the ReLU layers and ``sqrt(1 / fan_in)`` in the
    softmax layer; biases are zero.
    """
    if n_users < 1:
        raise InvalidInputError(f"n_users must be at least 1, got {n_users}")
    weights, biases = [], []
    for i in range(hidden_layers + 1):
        std = init_scale(n_users, output_layer=i == hidden_layers)
        weights.append(rng.normal(0.0, std, size=(n_users, n_users)))
        biases.append(np.zeros(n_users))
    return MlpParams(weights, biases, input_scale)


def init_scale(fan_in: int, output_layer: bool) -> float:
    """Standard deviation of the initial weights of a layer."""
    return float(np.sqrt((1.0 if output_layer else 2.0) / fan_in))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian(z: np.ndarray) -> np.ndarray:
    """Jacobian ``dy_i / dz_j`` of the softmax of one logit vector."""
    y = softmax(np.asarray(z, dtype=float))
    return np.diag(y) - np.outer(y, y)


def forward(params: MlpParams, g_batch):
    """Power fractions of a batch of gain vectors.

    :param g_batch: Gains, shape ``(n, K)`` or ``(K,)``
    :return: ``(fractions, trace)``, fractions of shape ``(n, K)`` with rows
        summing to one
    """
    x = np.asarray(g_batch, dtype=float)
    if x.ndim == 1:
        x = x[np.newaxis, :]
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise InvalidInputError(
            f"Expected inputs of width {params.layer_sizes[0]}, "
            f"got shape {np.shape(g_batch)}"
        )
    trace = ForwardTrace()
    a = x * params.input_scale
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        trace.activations.append(a)
        z = a @ w + b
        trace.pre_activations.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
    trace.output = softmax(z)
    return trace.output, trace


def backward(
    params: MlpParams, trace: ForwardTrace, upstream, p_max: float = 1.0
) -> MlpParams:
    """Gradient of a scalar loss with respect to the parameters.

    :param upstream: Gradient of the loss with respect to the allocated
        powers ``Pmax * fractions``, shape ``(n, K)``; the batch rows are
        summed, so a batch-mean loss carries its ``1/n`` in ``upstream``
    :param p_max: Scale of the output, ``dP/dfraction``
    """
    upstream = np.asarray(upstream, dtype=float)
    if (
        trace.output is None
        or upstream.shape != trace.output.shape
        or len(trace.pre_activations) != len(params.weights)
        or trace.activations[0].shape[1] != params.layer_sizes[0]
    ):
        raise InvalidInputError("The trace does not match the parameters")
    u = p_max * upstream
    y = trace.output
    dz = y * (u - np.sum(u * y, axis=1, keepdims=True))
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = trace.activations[i].T @ dz
        grad_b[i] = dz.sum(axis=0)
        if i > 0:
            active = trace.pre_activations[i - 1] > 0
            dz = (dz @ params.weights[i].T) * active
    return MlpParams(grad_w, grad_b, params.input_scale)


def save(params: MlpParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "input_scale": np.array(params.input_scale),
        "n_layers": np.array(len(params.weights)),
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    with path.open("wb") as fo:
        np.savez(fo, **arrays)
    log.debug(f"Saved network parameters to {path}")
    return path


def load(path: Union[str, Path]) -> MlpParams:
    """Read parameters written by :func:`save`.

    :raise InvalidInputError: unreadable file, unknown version or
        inconsistent layers
    """
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != FORMAT_VERSION:
                raise InvalidInputError(
                    f"Unsupported parameter file version {version}"
                )
            n = int(data["n_layers"])
            weights = [data[f"W{i}"] for i in range(n)]
            biases = [data[f"b{i}"] for i in range(n)]
            input_scale = float(data["input_scale"])
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        if isinstance(e, InvalidInputError):
            raise
        raise InvalidInputError(f"Cannot read parameters from {path}: {e}")
    return MlpParams(weights, biases, input_scale)
