"""Small multilayer perceptron used as a pointwise external operator.

Parameters live in one flat vector ``m`` (layer-major, each layer's weight
matrix in row-major order followed by its bias).  Hidden layers use tanh,
the output layer is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteLoss, ShapeMismatch, WeightsFormatError
from .extop import ExternalOperator, OperatorImpl, register_impl
from .symbolic import Coefficient, FunctionSpace, RealSpace

WEIGHTS_MAGIC = "extform-mlp 1"


def num_params(layer_sizes: Sequence[int]) -> int:
    return sum(n_out * n_in + n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))


def unflatten(layer_sizes, m):
    """Split ``m`` into a list of ``(W, b)`` views."""
    layers = []
    pos = 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        W = m[pos:pos + n_out * n_in].reshape(n_out, n_in)
        pos += n_out * n_in
        b = m[pos:pos + n_out]
        pos += n_out
        layers.append((W, b))
    return layers


@dataclass(eq=False)
class MlpModel:
    """Network architecture plus its flat parameter vector.

    ``params`` is the symbolic coefficient in ``R^M`` standing for the
    parameter vector; ``values`` holds its numbers.
    """

    layer_sizes: tuple
    values: np.ndarray
    params: Optional[Coefficient] = field(default=None)

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or self.layer_sizes[0] != 1 or self.layer_sizes[-1] != 1:
            raise ShapeMismatch("pointwise networks map scalars to scalars")
        self.values = np.array(self.values, dtype=float)
        if self.values.shape != (self.num_params,):
            raise ShapeMismatch(f"expected {self.num_params} parameters, got {self.values.shape}")
        if self.params is None:
            self.params = Coefficient(RealSpace(self.num_params), label="m")
        elif self.params.space.value_size != self.num_params:
            raise ShapeMismatch("parameter coefficient has the wrong size")

    @property
    def num_params(self) -> int:
        return num_params(self.layer_sizes)

    def with_values(self, values) -> "MlpModel":
        """Copy sharing the symbolic parameter coefficient."""
        return MlpModel(self.layer_sizes, values, self.params)

    def bindings(self) -> dict:
        return {self.params: self.values}


def init_mlp(layer_sizes: Sequence[int], seed: int) -> MlpModel:
    """Uniform initialisation in [-1/sqrt(n_in), 1/sqrt(n_in)] for weights and biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = math.sqrt(1.0 / n_in)
        chunks.append(rng.uniform(-bound, bound, size=n_out * n_in))
        chunks.append(rng.uniform(-bound, bound, size=n_out))
    return MlpModel(tuple(layer_sizes), np.concatenate(chunks))


def _forward(layer_sizes, m, x):
    x = np.asarray(x, dtype=float)
    layers = unflatten(layer_sizes, m)
    acts = [x.reshape(-1, 1)]
    a = acts[0]
    for k, (W, b) in enumerate(layers):
        z = a @ W.T + b
        a = z if k == len(layers) - 1 else np.tanh(z)
        acts.append(a)
    return layers, acts


def forward_values(layer_sizes, m, x) -> np.ndarray:
    _, acts = _forward(layer_sizes, m, x)
    return acts[-1][:, 0]


def _backward(layers, acts, ybar):
    """Backpropagate ``ybar`` (n,); returns (xbar, per-layer (dW, db))."""
    delta = np.asarray(ybar, dtype=float).reshape(-1, 1)
    grads = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        a_prev = acts[k]
        grads.append((delta.T @ a_prev, delta.sum(axis=0)))
        delta = delta @ W
        if k > 0:
            delta = delta * (1.0 - a_prev ** 2)
    grads.reverse()
    return delta[:, 0], grads


def _flatten(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


def mlp_forward(model: MlpModel, x):
    """Network output for a scalar or an array of inputs."""
    y = forward_values(model.layer_sizes, model.values, x)
    return float(y[0]) if np.ndim(x) == 0 else y


def mlp_vjp(model: MlpModel, x, ybar):
    """Cotangents ``(xbar, mbar)`` of the input(s) and of the parameter vector.

    For array inputs ``xbar`` is per input and ``mbar`` is summed over inputs.
    """
    layers, acts = _forward(model.layer_sizes, model.values, x)
    xbar, grads = _backward(layers, acts, np.broadcast_to(ybar, acts[0].shape[:1]))
    mbar = _flatten(grads)
    if np.ndim(x) == 0:
        return float(xbar[0]), mbar
    return xbar, mbar


def param_jacobian(layer_sizes, m, x) -> np.ndarray:
    """Per-input Jacobian of the outputs w.r.t. the parameters, shape (n, M)."""
    layers, acts = _forward(layer_sizes, m, x)
    n = acts[0].shape[0]
    delta = np.ones((n, 1))
    blocks = []
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        a_prev = acts[k]
        dW = delta[:, :, None] * a_prev[:, None, :]
        blocks.append(np.concatenate([dW.reshape(n, -1), delta], axis=1))
        delta = delta @ W
        if k > 0:
            delta = delta * (1.0 - a_prev ** 2)
    blocks.reverse()
    return np.concatenate(blocks, axis=1)


class PointwiseNeuralOperator(OperatorImpl):
    """``N(c, m)(x_j) = f_m(c(x_j))`` at every degree of freedom ``x_j``.

    Operand 0 is the input field, operand 1 the flat parameter vector.
    """

    def __init__(self, layer_sizes: Sequence[int]):
        self.layer_sizes = tuple(layer_sizes)
        self.size = num_params(self.layer_sizes)

    def check(self, operands):
        if len(operands) != 2:
            raise ShapeMismatch("neural operator takes (input field, parameters)")
        if len(operands[1]) != self.size:
            raise ShapeMismatch(f"expected {self.size} parameters, got {len(operands[1])}")

    def eval(self, operands):
        return forward_values(self.layer_sizes, operands[1], operands[0])

    def _slope(self, operands):
        layers, acts = _forward(self.layer_sizes, operands[1], operands[0])
        xbar, _ = _backward(layers, acts, np.ones(len(operands[0])))
        return xbar

    def jac_operand(self, i, operands):
        if i == 0:
            return sp.diags(self._slope(operands), format="csr")
        return param_jacobian(self.layer_sizes, operands[1], operands[0])

    def jvp(self, i, operands, tangent):
        if i == 0:
            return self._slope(operands) * tangent
        return param_jacobian(self.layer_sizes, operands[1], operands[0]) @ tangent

    def vjp(self, i, operands, cotangent):
        layers, acts = _forward(self.layer_sizes, operands[1], operands[0])
        xbar, grads = _backward(layers, acts, cotangent)
        return xbar if i == 0 else _flatten(grads)


def neuralnet(model: MlpModel, function_space: Optional[FunctionSpace] = None):
    """Operator factory: ``neuralnet(model)(c)`` is the node ``N(c, m)``."""
    handle = register_impl(PointwiseNeuralOperator(model.layer_sizes))

    def build(field_input):
        return ExternalOperator(field_input, model.params, impl=handle, function_space=function_space)

    return build


# --------------------------------------------------------------------------
# Training


def range_penalty(lo: float, hi: float) -> Callable[[np.ndarray], np.ndarray]:
    """psi(c) = c - clamp(c, lo, hi): zero inside the band, linear outside."""

    def psi(c):
        c = np.asarray(c, dtype=float)
        return c - np.clip(c, lo, hi)

    return psi


@dataclass
class TrainingResult:
    model: MlpModel
    losses: list


def pretrain(model: MlpModel, target: Callable, sample_range=(0.0, 3.0), epochs: int = 20000,
             learning_rate: float = 0.05, samples: int = 256) -> TrainingResult:
    """Full-batch gradient descent on the mean squared error against ``target``.

    Works on a copy of ``model``.  The returned loss list has one entry per
    epoch plus the final loss.
    """
    x = np.linspace(sample_range[0], sample_range[1], samples)
    t = np.asarray(target(x), dtype=float)
    m = model.values.copy()
    losses = []
    for epoch in range(epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            layers, acts = _forward(model.layer_sizes, m, x)
            r = acts[-1][:, 0] - t
            loss = float(np.mean(r * r))
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}")
        losses.append(loss)
        if epoch == epochs:
            break
        _, grads = _backward(layers, acts, 2.0 * r / samples)
        m -= learning_rate * _flatten(grads)
    return TrainingResult(model.with_values(m), losses)


# --------------------------------------------------------------------------
# Weights file


def save_weights(path, model: MlpModel) -> None:
    lines = [WEIGHTS_MAGIC, "layers " + " ".join(str(n) for n in model.layer_sizes)]
    lines.extend(repr(float(v)) for v in model.values)
    Path(path).write_text("\n".join(lines) + "\n")


def load_weights(path, params: Optional[Coefficient] = None) -> MlpModel:
    """Strict reader for :func:`save_weights` files."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise WeightsFormatError(f"cannot read weights file {path}: {exc}") from None
    if not text.endswith("\n"):
        raise WeightsFormatError(f"{path}: truncated file")
    lines = text[:-1].split("\n")
    if len(lines) < 2 or lines[0] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic line")
    head = lines[1].split()
    if len(head) < 3 or head[0] != "layers":
        raise WeightsFormatError(f"{path}: bad layers line")
    try:
        sizes = tuple(int(s) for s in head[1:])
    except ValueError:
        raise WeightsFormatError(f"{path}: bad layer size") from None
    if min(sizes) < 1:
        raise WeightsFormatError(f"{path}: bad layer size")
    body = lines[2:]
    expected = num_params(sizes)
    if len(body) != expected:
        raise WeightsFormatError(f"{path}: expected {expected} parameters, found {len(body)}")
    try:
        values = np.array([float(s) for s in body])
    except ValueError as exc:
        raise WeightsFormatError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise WeightsFormatError(f"{path}: non-finite parameter")
    try:
        return MlpModel(sizes, values, params)
    except ShapeMismatch as exc:
        raise WeightsFormatError(f"{path}: {exc}") from None
