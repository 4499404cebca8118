# Copyright 2024 Anirban Basu

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
A minimal dense multilayer perceptron on float64 numpy arrays, with reverse-mode gradients of
any configured loss w.r.t. both the parameters and the input.

Loss gradients enter the backward pass at the probability layer and are chained through the
softmax Jacobian, so every loss variant shares one path. Batch reductions are left to numpy in a
fixed order, which keeps repeated runs on the same machine bit-identical.
"""

try:
    from icecream import ic
except ImportError:  # Graceful fallback if IceCream isn't installed.
    ic = lambda *a: None if not a else (a[0] if len(a) == 1 else a)  # noqa

import json
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, model_validator

from losses import LossSpec, batch_loss, batch_loss_grad_probs


class DimensionMismatchError(ValueError):
    """Raised when consecutive affine layers do not chain."""

    def __init__(self, layer_index: int, message: str | None = None):
        self.layer_index = layer_index
        super().__init__(message or f"dim mismatch at layer {layer_index}")


class ShapeMismatchError(ValueError):
    """Raised when an input or a gradient does not have the expected shape."""


class LayerSpec(BaseModel):
    """
    One layer of the perceptron.

    Fields:
        kind (str): Either 'affine' or 'relu'.
        in_dim (int | None): Input width, affine layers only.
        out_dim (int | None): Output width, affine layers only.
    """

    kind: Literal["affine", "relu"]
    in_dim: int | None = None
    out_dim: int | None = None

    @model_validator(mode="after")
    def _check_dims(self) -> "LayerSpec":
        if self.kind == "affine":
            if self.in_dim is None or self.out_dim is None:
                raise ValueError("Affine layers need both in_dim and out_dim.")
            if self.in_dim < 1 or self.out_dim < 1:
                raise ValueError("Affine layer dimensions must be positive.")
        return self

    @classmethod
    def affine(cls, in_dim: int, out_dim: int) -> "LayerSpec":
        return cls(kind="affine", in_dim=in_dim, out_dim=out_dim)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(kind="relu")


def mlp_spec(widths: Sequence[int]) -> list[LayerSpec]:
    """
    Affine layers between consecutive widths with a ReLU after every hidden one.

    Args:
        widths (Sequence[int]): Input width, hidden widths, then the number of classes.

    Returns:
        list[LayerSpec]: The layer specification.
    """
    layers: list[LayerSpec] = []
    for k in range(len(widths) - 1):
        if k > 0:
            layers.append(LayerSpec.relu())
        layers.append(LayerSpec.affine(widths[k], widths[k + 1]))
    return layers


class ParamGradients:
    """Gradients for every affine layer, aligned with `Model.weights` and `Model.biases`."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights
        self.biases = biases


class Model:
    """A multilayer perceptron classifier."""

    def __init__(
        self,
        layers: list[LayerSpec],
        weights: list[np.ndarray],
        biases: list[np.ndarray],
        n_classes: int,
        seed: int,
    ):
        self.layers = list(layers)
        self.weights = weights
        self.biases = biases
        self.n_classes = n_classes
        self.seed = seed

    @property
    def input_dim(self) -> int:
        return next(layer.in_dim for layer in self.layers if layer.kind == "affine")

    def copy(self) -> "Model":
        """A deep copy, so that the original can keep being read while the copy is trained."""
        return Model(
            self.layers,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.n_classes,
            self.seed,
        )

    def params_equal(self, other: "Model") -> bool:
        """Whether both models have bit-identical parameters."""
        return all(
            np.array_equal(a, b) for a, b in zip(self.weights, other.weights)
        ) and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))

    def to_dict(self) -> dict:
        return {
            "spec": [layer.model_dump(exclude_none=True) for layer in self.layers],
            "n_classes": self.n_classes,
            "seed": self.seed,
            "params": [
                {"weight": w.tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Model":
        layers = [LayerSpec.model_validate(layer) for layer in payload["spec"]]
        model = build_model(layers, payload["n_classes"], payload["seed"])
        if len(payload["params"]) != len(model.weights):
            raise ValueError(
                f"Expected {len(model.weights)} parameter blocks, got {len(payload['params'])}."
            )
        for k, block in enumerate(payload["params"]):
            weight = np.array(block["weight"], dtype=np.float64)
            bias = np.array(block["bias"], dtype=np.float64)
            if weight.shape != model.weights[k].shape or bias.shape != model.biases[k].shape:
                raise ShapeMismatchError(f"Parameter block {k} has the wrong shape.")
            model.weights[k] = weight
            model.biases[k] = bias
        return model


class ForwardTrace:
    """
    Intermediate values of a forward pass.

    Fields:
        pre_activations (list[np.ndarray]): The input to every layer.
        activations (list[np.ndarray]): The output of every layer.
        logits (np.ndarray): Final scores.
        probs (np.ndarray): Softmax of the logits.
    """

    def __init__(
        self,
        pre_activations: list[np.ndarray],
        activations: list[np.ndarray],
        logits: np.ndarray,
        probs: np.ndarray,
    ):
        self.pre_activations = pre_activations
        self.activations = activations
        self.logits = logits
        self.probs = probs


def build_model(layers: list[LayerSpec | dict], n_classes: int, seed: int) -> Model:
    """
    Build a perceptron with weights drawn uniformly from [-s, s], s = sqrt(6 / (in + out)),
    and zero biases.

    Args:
        layers (list[LayerSpec | dict]): The layer specification.
        n_classes (int): The number of output classes.
        seed (int): Seed of the initialisation.

    Returns:
        Model: The initialised model.

    Raises:
        DimensionMismatchError: If consecutive affine layers do not chain, or the last one does not
        produce `n_classes` outputs.
    """
    layers = [LayerSpec.model_validate(layer) for layer in layers]
    if n_classes < 2:
        raise ValueError(f"A classifier needs at least 2 classes, got {n_classes}.")
    affine_indices = [k for k, layer in enumerate(layers) if layer.kind == "affine"]
    if not affine_indices:
        raise ValueError("A model needs at least one affine layer.")

    previous_out: int | None = None
    for k in affine_indices:
        layer = layers[k]
        if previous_out is not None and layer.in_dim != previous_out:
            raise DimensionMismatchError(k)
        previous_out = layer.out_dim
    if previous_out != n_classes:
        raise DimensionMismatchError(
            affine_indices[-1],
            f"dim mismatch at layer {affine_indices[-1]}: final width {previous_out} != {n_classes} classes",
        )

    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k in affine_indices:
        fan_in, fan_out = layers[k].in_dim, layers[k].out_dim
        scale = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Model(layers, weights, biases, n_classes, seed)


def _check_inputs(model: Model, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.input_dim:
        raise ShapeMismatchError(
            f"Expected inputs of width {model.input_dim}, got shape {inputs.shape}."
        )
    if not np.all(np.isfinite(inputs)):
        raise ValueError("Inputs must be finite.")
    return inputs


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row maximum."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def forward_batch(model: Model, inputs: np.ndarray) -> ForwardTrace:
    """
    Forward pass over a batch of inputs, one per row.

    Args:
        model (Model): The model, left untouched.
        inputs (np.ndarray): A (batch, input_dim) array.

    Returns:
        ForwardTrace: Per-layer values, logits and probabilities, all with a leading batch axis.
    """
    activation = _check_inputs(model, inputs)
    pre_activations, activations = [], []
    param_index = 0
    for layer in model.layers:
        pre_activations.append(activation)
        if layer.kind == "affine":
            activation = (
                activation @ model.weights[param_index].T + model.biases[param_index]
            )
            param_index += 1
        else:
            activation = np.maximum(activation, 0.0)
        activations.append(activation)
    return ForwardTrace(pre_activations, activations, activation, softmax(activation))


def forward(model: Model, x: np.ndarray) -> ForwardTrace:
    """
    Forward pass of a single input.

    Args:
        model (Model): The model, left untouched.
        x (np.ndarray): A 1-D input of width `model.input_dim`.

    Returns:
        ForwardTrace: Values of the pass; `logits` and `probs` are 1-D.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatchError(f"Expected a 1-D input, got shape {x.shape}.")
    trace = forward_batch(model, x[None, :])
    return ForwardTrace(
        [a[0] for a in trace.pre_activations],
        [a[0] for a in trace.activations],
        trace.logits[0],
        trace.probs[0],
    )


def _backward(
    model: Model, trace: ForwardTrace, grad_logits: np.ndarray
) -> tuple[ParamGradients, np.ndarray]:
    """Propagate a (batch, n_classes) logit gradient back to the parameters and the inputs."""
    grad = grad_logits
    weight_grads: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    bias_grads: list[np.ndarray] = [None] * len(model.biases)  # type: ignore[list-item]
    param_index = len(model.weights)
    for layer_index in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[layer_index]
        layer_input = trace.pre_activations[layer_index]
        if layer.kind == "affine":
            param_index -= 1
            weight_grads[param_index] = grad.T @ layer_input
            bias_grads[param_index] = np.sum(grad, axis=0)
            grad = grad @ model.weights[param_index]
        else:
            grad = grad * (layer_input > 0.0)
    return ParamGradients(weight_grads, bias_grads), grad


def _grad_logits_from_probs(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    # Softmax Jacobian: dp_k/dz_j = p_k (delta_kj - p_j)
    return probs * (grad_probs - np.sum(grad_probs * probs, axis=1, keepdims=True))


def _as_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        inputs, labels = batch
    else:
        if len(batch) == 0:
            raise ValueError("Cannot compute gradients of an empty batch.")
        inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
        labels = np.array([label for _, label in batch])
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if inputs.shape[0] == 0:
        raise ValueError("Cannot compute gradients of an empty batch.")
    return inputs, labels


def loss_grad_params(model: Model, batch, loss_spec: LossSpec) -> ParamGradients:
    """
    Mean-over-batch gradient of the configured loss w.r.t. every parameter.

    Args:
        model (Model): The model, left untouched.
        batch: Either a list of (x, label) pairs or an (inputs, labels) tuple of arrays.
        loss_spec (LossSpec): The loss to differentiate.

    Returns:
        ParamGradients: Gradients aligned with the model's parameters.
    """
    inputs, labels = _as_batch(batch)
    trace = forward_batch(model, inputs)
    grad_probs = batch_loss_grad_probs(labels, trace.probs, loss_spec)
    grad_logits = _grad_logits_from_probs(trace.probs, grad_probs) / inputs.shape[0]
    grads, _ = _backward(model, trace, grad_logits)
    return grads


def loss_and_grad_params(
    model: Model, inputs: np.ndarray, labels: np.ndarray, loss_spec: LossSpec
) -> tuple[float, ParamGradients]:
    """Mean loss and its parameter gradient from a single forward pass."""
    inputs, labels = _as_batch((np.asarray(inputs, dtype=np.float64), labels))
    trace = forward_batch(model, inputs)
    losses = batch_loss(labels, trace.probs, loss_spec)
    grad_probs = batch_loss_grad_probs(labels, trace.probs, loss_spec)
    grad_logits = _grad_logits_from_probs(trace.probs, grad_probs) / inputs.shape[0]
    grads, _ = _backward(model, trace, grad_logits)
    return float(np.mean(losses)), grads


def loss_grad_input(
    model: Model, x: np.ndarray, label: int, loss_spec: LossSpec
) -> np.ndarray:
    """
    Gradient of the configured loss of one sample w.r.t. its input.

    Args:
        model (Model): The model, left untouched.
        x (np.ndarray): A 1-D input.
        label (int): The label the loss is computed against.
        loss_spec (LossSpec): The loss to differentiate.

    Returns:
        np.ndarray: A gradient with the same shape as `x`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatchError(f"Expected a 1-D input, got shape {x.shape}.")
    trace = forward_batch(model, x[None, :])
    grad_probs = batch_loss_grad_probs(np.array([label]), trace.probs, loss_spec)
    _, grad_inputs = _backward(
        model, trace, _grad_logits_from_probs(trace.probs, grad_probs)
    )
    return grad_inputs[0]


def logits_grad_input(model: Model, x: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the logits w.r.t. one input."""
    x = np.asarray(x, dtype=np.float64)
    trace = forward_batch(model, x[None, :])
    _, grad_inputs = _backward(
        model, trace, np.asarray(grad_logits, dtype=np.float64)[None, :]
    )
    return grad_inputs[0]


def sgd_step(model: Model, grads: ParamGradients, lr: float):
    """
    Plain gradient descent update, in place.

    Args:
        model (Model): The model to update.
        grads (ParamGradients): Gradients aligned with the model's parameters.
        lr (float): The learning rate.
    """
    if lr < 0:
        raise ValueError(f"Learning rate must not be negative, got {lr}.")
    if len(grads.weights) != len(model.weights) or len(grads.biases) != len(
        model.biases
    ):
        raise ShapeMismatchError("Gradient blocks do not match the model's layers.")
    for k in range(len(model.weights)):
        if (
            grads.weights[k].shape != model.weights[k].shape
            or grads.biases[k].shape != model.biases[k].shape
        ):
            raise ShapeMismatchError(f"Gradient block {k} has the wrong shape.")
    for k in range(len(model.weights)):
        model.weights[k] -= lr * grads.weights[k]
        model.biases[k] -= lr * grads.biases[k]


def predict(model: Model, x: np.ndarray) -> int:
    """The most probable class of one input; ties go to the lowest index."""
    return int(np.argmax(forward(model, x).probs))


def predict_batch(model: Model, inputs: np.ndarray) -> np.ndarray:
    """The most probable class of every row."""
    return np.argmax(forward_batch(model, inputs).probs, axis=1)


def save_model(model: Model, path: str | Path):
    """Write the model as a single JSON document."""
    with open(path, "w") as f:
        json.dump(model.to_dict(), f)


def load_model(path: str | Path) -> Model:
    """Read a model written by `save_model`."""
    with open(path) as f:
        return Model.from_dict(json.load(f))
