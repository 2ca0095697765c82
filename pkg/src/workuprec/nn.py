"""Dense feed-forward network core.

Small multi-label networks trained with plain SGD on mean squared error:
ReLU hidden layers, a sigmoid output layer so scores land in [0, 1], and
inverted dropout after each hidden activation. Everything is float64 numpy
with manual backpropagation, deterministic under an explicit seed, and
small enough that exact finite-difference gradient checking is practical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, TrainingError, UsageError
from .seeding import stream_rng

MODEL_FORMAT_VERSION = 1

HIDDEN_ACTIVATION = "relu"
OUTPUT_ACTIVATION = "sigmoid"


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    expz = np.exp(z[~pos])
    out[~pos] = expz / (1.0 + expz)
    return out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean of squared componentwise differences, over every element."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(
            f"prediction shape {pred.shape} does not match target shape {target.shape}"
        )
    return float(np.mean((pred - target) ** 2))


@dataclass
class DenseLayer:
    """One fully connected layer. ``weights`` is (out_dim, in_dim)."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.biases.shape[0] if self.biases.ndim == 1 else self.biases.shape}"
                f" does not match out_dim {self.weights.shape[0]}"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.biases).all()):
            raise TrainingError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class ForwardCache:
    """Intermediate state from one train-mode forward pass.

    ``inputs[i]`` is the batch fed into layer i (post-dropout), ``pre_activations[i]``
    its affine output, and ``dropout_masks[i]`` the scaled mask applied after hidden
    layer i (None when dropout was inactive). Valid only until the model is updated.
    """

    model: "Mlp"
    model_version: int
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    dropout_masks: list[np.ndarray | None]
    output: np.ndarray


@dataclass
class Gradients:
    """Per-layer weight and bias gradients, ordered like ``Mlp.layers``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters. The seed drives shuffling and dropout streams."""

    learning_rate: float = 0.001
    epochs: int = 400
    batch_size: int = 256
    dropout_p: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        # lr 0 is allowed so that "no-op training" smoke tests stay expressible.
        if self.learning_rate < 0:
            raise UsageError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise UsageError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


class Mlp:
    """Ordered dense layers with ReLU hidden and sigmoid output activations.

    Dropout applies after each hidden activation only, never after the output
    layer, using the inverted convention (kept units scaled by 1/(1-p)) so
    inference needs no rescaling. Training mutates the instance in place; a
    trained instance is immutable in practice and safe to share across
    threads for inference.
    """

    def __init__(self, layers: list[DenseLayer], dropout_p: float = 0.0):
        if not layers:
            raise UsageError("model needs at least one layer")
        if not 0.0 <= dropout_p < 1.0:
            raise UsageError(f"dropout_p must be in [0, 1), got {dropout_p}")
        for i in range(len(layers) - 1):
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise ShapeError(
                    f"layer {i} out_dim {layers[i].out_dim} does not chain into"
                    f" layer {i + 1} in_dim {layers[i + 1].in_dim}"
                )
        self.layers = layers
        self.dropout_p = float(dropout_p)
        self._version = 0

    @property
    def layer_dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, ForwardCache | None]:
        """Run the network on a batch.

        Args:
            x: (batch, in_dim) inputs.
            train: when True, apply dropout and record a cache for backward().
            rng: required in train mode when dropout_p > 0; masks are drawn
                from it in layer order.

        Returns:
            (output, cache). The cache is None in infer mode. Output entries
            are sigmoid scores in [0, 1].
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"input must be a 2-D batch, got shape {x.shape}")
        if x.shape[1] != self.layers[0].in_dim:
            raise ShapeError(
                f"input width {x.shape[1]} does not match first layer"
                f" in_dim {self.layers[0].in_dim}"
            )
        if train and self.dropout_p > 0.0 and rng is None:
            raise UsageError("train-mode forward with dropout requires an rng")

        inputs: list[np.ndarray] = []
        pre_acts: list[np.ndarray] = []
        masks: list[np.ndarray | None] = []
        a = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            inputs.append(a)
            z = a @ layer.weights.T + layer.biases
            pre_acts.append(z)
            if i == last:
                a = sigmoid(z)
            else:
                h = relu(z)
                if train and self.dropout_p > 0.0:
                    keep = 1.0 - self.dropout_p
                    mask = (rng.random(h.shape) >= self.dropout_p) / keep
                    masks.append(mask)
                    a = h * mask
                else:
                    masks.append(None)
                    a = h
        if not train:
            return a, None
        cache = ForwardCache(
            model=self,
            model_version=self._version,
            inputs=inputs,
            pre_activations=pre_acts,
            dropout_masks=masks,
            output=a,
        )
        return a, cache

    def backward(self, cache: ForwardCache | None, target: np.ndarray) -> Gradients:
        """Gradients of the MSE loss w.r.t. every weight and bias.

        The dropout masks recorded in the cache are replayed exactly, so the
        gradients correspond to the same stochastic forward pass.
        """
        if cache is None or cache.model is not self or cache.model_version != self._version:
            raise UsageError(
                "cache is stale or from a different model; rerun a train-mode forward"
            )
        target = np.asarray(target, dtype=np.float64)
        y = cache.output
        if target.shape != y.shape:
            raise ShapeError(
                f"target shape {target.shape} does not match output shape {y.shape}"
            )
        batch, width = y.shape
        # d/dz of mean((y - t)^2) through the sigmoid output.
        delta = 2.0 * (y - target) / (batch * width) * y * (1.0 - y)
        n = len(self.layers)
        w_grads: list[np.ndarray] = [np.empty(0)] * n
        b_grads: list[np.ndarray] = [np.empty(0)] * n
        for i in range(n - 1, -1, -1):
            w_grads[i] = delta.T @ cache.inputs[i]
            b_grads[i] = delta.sum(axis=0)
            if i > 0:
                upstream = delta @ self.layers[i].weights
                mask = cache.dropout_masks[i - 1]
                if mask is not None:
                    upstream = upstream * mask
                delta = upstream * (cache.pre_activations[i - 1] > 0.0)
        return Gradients(weights=w_grads, biases=b_grads)

    def sgd_step(self, grads: Gradients, lr: float) -> "Mlp":
        """Apply w <- w - lr * g in place and invalidate outstanding caches."""
        if len(grads.weights) != len(self.layers) or len(grads.biases) != len(self.layers):
            raise ShapeError(
                f"gradient layer count {len(grads.weights)} does not match"
                f" model layer count {len(self.layers)}"
            )
        for i, layer in enumerate(self.layers):
            gw, gb = grads.weights[i], grads.biases[i]
            if gw.shape != layer.weights.shape or gb.shape != layer.biases.shape:
                raise ShapeError(
                    f"gradient shapes {gw.shape}/{gb.shape} do not match layer {i}"
                    f" shapes {layer.weights.shape}/{layer.biases.shape}"
                )
            if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
                raise TrainingError(f"non-finite gradient in layer {i}")
        for i, layer in enumerate(self.layers):
            layer.weights -= lr * grads.weights[i]
            layer.biases -= lr * grads.biases[i]
            if not (np.isfinite(layer.weights).all() and np.isfinite(layer.biases).all()):
                raise TrainingError(f"non-finite parameters in layer {i} after update")
        self._version += 1
        return self

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "layer_dims": self.layer_dims,
            "hidden_activation": HIDDEN_ACTIVATION,
            "output_activation": OUTPUT_ACTIVATION,
            "dropout_p": self.dropout_p,
            "layers": [
                {"weights": layer.weights.tolist(), "biases": layer.biases.tolist()}
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        version = data.get("format_version")
        if version != MODEL_FORMAT_VERSION:
            raise FormatError(
                f"unsupported model format_version {version!r},"
                f" expected {MODEL_FORMAT_VERSION}"
            )
        for key in ("hidden_activation", "output_activation"):
            expected = HIDDEN_ACTIVATION if key == "hidden_activation" else OUTPUT_ACTIVATION
            if data.get(key) != expected:
                raise FormatError(f"unsupported {key} {data.get(key)!r}, expected {expected!r}")
        try:
            layers = [
                DenseLayer(np.array(entry["weights"]), np.array(entry["biases"]))
                for entry in data["layers"]
            ]
            dropout_p = float(data["dropout_p"])
            dims = list(data["layer_dims"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed model document: missing or bad field {exc}") from exc
        model = cls(layers, dropout_p)
        if model.layer_dims != dims:
            raise FormatError(
                f"layer_dims field {dims} does not match stored layers {model.layer_dims}"
            )
        return model


def init_mlp(layer_dims: list[int], dropout_p: float = 0.0, seed: int = 0) -> Mlp:
    """Glorot-uniform weights, zero biases, deterministic under ``seed``."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise UsageError(f"need at least two layer dims, got {dims}")
    if any(d <= 0 for d in dims):
        raise UsageError(f"layer dims must be positive, got {dims}")
    rng = stream_rng(seed, "init")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(weights, np.zeros(fan_out)))
    return Mlp(layers, dropout_p)


def train_mlp(
    model: Mlp,
    inputs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
) -> tuple[Mlp, list[float]]:
    """Mini-batch SGD on MSE. Returns the model and per-epoch mean loss.

    Shuffling and dropout are driven by sub-streams of ``config.seed``, so
    identical calls produce bit-identical loss histories. The last partial
    mini-batch is trained on rather than dropped; the batch loss is
    mean-reduced, keeping the step size robust to batch size.
    """
    x = np.asarray(inputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or t.ndim != 2:
        raise ShapeError(f"inputs and targets must be 2-D, got {x.shape} and {t.shape}")
    if x.shape[0] == 0:
        raise UsageError("training dataset is empty")
    if x.shape[0] != t.shape[0]:
        raise ShapeError(f"{x.shape[0]} inputs but {t.shape[0]} targets")
    if x.shape[1] != model.layers[0].in_dim:
        raise ShapeError(
            f"input width {x.shape[1]} does not match first layer"
            f" in_dim {model.layers[0].in_dim}"
        )
    if t.shape[1] != model.layers[-1].out_dim:
        raise ShapeError(
            f"target width {t.shape[1]} does not match output"
            f" dim {model.layers[-1].out_dim}"
        )
    shuffle_rng = stream_rng(config.seed, "shuffle")
    dropout_rng = stream_rng(config.seed, "dropout")
    n = x.shape[0]
    history: list[float] = []
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, tb = x[idx], t[idx]
            out, cache = model.forward(xb, train=True, rng=dropout_rng)
            total += mse_loss(out, tb) * idx.size
            grads = model.backward(cache, tb)
            model.sgd_step(grads, config.learning_rate)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        history.append(epoch_loss)
    return model, history


def save_mlp(model: Mlp, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)
        fh.write("\n")


def load_mlp(path: str) -> Mlp:
    with open(path, "r", encoding="utf-8") as fh:
        return Mlp.from_dict(json.load(fh))
