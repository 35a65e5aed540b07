"""Dense ReLU multilayer perceptrons: forward pass, cross-entropy, backprop, training.

The float model is the training substrate and the gradient source for the
attack. Everything is plain numpy in float64.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "none")


class TrainingError(RuntimeError):
    """Raised when a trained model misses its accuracy floor."""

    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


@dataclass
class DenseLayer:
    weights: np.ndarray  # [out, in]
    bias: Optional[np.ndarray] = None
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("layer weights must be a 2-D [out, in] matrix")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError("bias length must equal layer output width")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass
class FloatModel:
    layers: list[DenseLayer]
    input_dim: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.shape[1] != width:
                raise ValueError(
                    f"layer {i} expects {layer.shape[1]} inputs, previous width is {width}"
                )
            width = layer.shape[0]
        if self.layers[-1].activation != "none":
            raise ValueError("last layer must output raw logits (activation 'none')")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.shape[0] for layer in self.layers]

    @property
    def n_weights(self) -> int:
        return sum(layer.weights.size for layer in self.layers)

    @property
    def n_params(self) -> int:
        return self.n_weights + sum(
            layer.bias.size for layer in self.layers if layer.bias is not None
        )

    @classmethod
    def from_weights(cls, weights: Sequence[np.ndarray], **kwargs) -> "FloatModel":
        """ReLU hidden layers, linear output, no biases."""
        layers = [
            DenseLayer(w, activation="relu" if i < len(weights) - 1 else "none")
            for i, w in enumerate(weights)
        ]
        return cls(layers, input_dim=np.shape(weights[0])[1], **kwargs)

    def copy(self) -> "FloatModel":
        return FloatModel(
            [
                DenseLayer(
                    l.weights.copy(),
                    None if l.bias is None else l.bias.copy(),
                    l.activation,
                )
                for l in self.layers
            ],
            self.input_dim,
            dict(self.metadata),
        )


def _as_batch(model: FloatModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(
            f"input has {x.shape[-1]} features, model expects {model.input_dim}"
        )
    return x, single


def _forward_cache(model: FloatModel, x: np.ndarray):
    """Return per-layer (input, pre-activation) pairs and the logits."""
    cache = []
    a = x
    for layer in model.layers:
        z = a @ layer.weights.T
        if layer.bias is not None:
            z = z + layer.bias
        cache.append((a, z))
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return cache, a


def forward(model: FloatModel, x) -> np.ndarray:
    """Logits for one sample (1-D input) or a batch (2-D input)."""
    batch, single = _as_batch(model, x)
    _, logits = _forward_cache(model, batch)
    return logits[0] if single else logits


def predict(model: FloatModel, x) -> np.ndarray:
    return np.argmax(forward(model, x), axis=-1)


def accuracy(model: FloatModel, x, y) -> float:
    return float(np.mean(predict(model, x) == np.asarray(y)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, y) -> float:
    """Mean cross-entropy of a batch of logits against integer labels."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    if len(y) == 0:
        raise ValueError("empty batch")
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise ValueError("label out of range")
    return float(-np.mean(log_softmax(logits)[np.arange(len(y)), y]))


def loss(model: FloatModel, x, y) -> float:
    batch, _ = _as_batch(model, x)
    if len(batch) == 0:
        raise ValueError("empty batch")
    return cross_entropy(forward(model, batch), y)


def backward(model: FloatModel, x, y) -> list[tuple[np.ndarray, Optional[np.ndarray]]]:
    """Exact gradients of the mean cross-entropy.

    Returns one ``(dW, db)`` pair per layer; ``db`` is None for bias-free layers.
    """
    batch, _ = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y))
    if len(batch) == 0:
        raise ValueError("empty batch")
    if len(y) != len(batch):
        raise ValueError("label count does not match batch size")
    cache, logits = _forward_cache(model, batch)
    n = len(batch)
    probs = np.exp(log_softmax(logits))
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    for layer, (a_in, z) in zip(reversed(model.layers), reversed(cache)):
        if layer.activation == "relu":
            delta = delta * (z > 0)
        dw = delta.T @ a_in
        db = delta.sum(axis=0) if layer.bias is not None else None
        grads.append((dw, db))
        delta = delta @ layer.weights
    return grads[::-1]


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (10,)
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    optimizer: str = "sgd+momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay: float = 1.0  # multiplicative, applied after every epoch
    bias: bool = False
    min_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "sgd+momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def init_model(sizes: Sequence[int], rng: np.random.Generator, bias: bool = False) -> FloatModel:
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        b = np.zeros(n_out) if bias else None
        layers.append(DenseLayer(w, b, "relu" if i < len(sizes) - 2 else "none"))
    return FloatModel(layers, input_dim=sizes[0])


def train(config: TrainConfig, dataset) -> FloatModel:
    """Minibatch SGD on ``dataset`` (anything with x_train/y_train/x_test/y_test).

    The seed drives initialisation and shuffling, so reruns are bit-identical.
    Raises TrainingError when ``config.min_accuracy`` is set and the test
    accuracy falls short.
    """
    rng = np.random.default_rng(config.seed)
    x, y = np.asarray(dataset.x_train, dtype=np.float64), np.asarray(dataset.y_train)
    sizes = [x.shape[1], *config.hidden, dataset.n_classes]
    model = init_model(sizes, rng, bias=config.bias)
    momentum = config.momentum if config.optimizer == "sgd+momentum" else 0.0
    vel = [(np.zeros_like(l.weights), None if l.bias is None else np.zeros_like(l.bias))
           for l in model.layers]
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            grads = backward(model, x[idx], y[idx])
            for layer, (dw, db), v in zip(model.layers, grads, vel):
                if config.weight_decay:
                    dw = dw + config.weight_decay * layer.weights
                v[0][...] = momentum * v[0] - lr * dw
                layer.weights += v[0]
                if db is not None:
                    v[1][...] = momentum * v[1] - lr * db
                    layer.bias += v[1]
        lr *= config.lr_decay
        if log.isEnabledFor(logging.DEBUG):
            log.debug("epoch %d loss %.4f", epoch, loss(model, x, y))

    train_acc = accuracy(model, x, y)
    test_acc = accuracy(model, dataset.x_test, dataset.y_test)
    model.metadata.update(
        seed=config.seed,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
    )
    if config.min_accuracy is not None and test_acc < config.min_accuracy:
        raise TrainingError(
            f"test accuracy {test_acc:.4f} below floor {config.min_accuracy:.4f} "
            f"after {config.epochs} epochs",
            {"train_accuracy": train_acc, "test_accuracy": test_acc,
             "floor": config.min_accuracy, "epochs": config.epochs},
        )
    return model


# ---------------------------------------------------------------- serialisation

def model_to_dict(model: FloatModel) -> dict:
    return {
        "format": "bitglow-float-mlp/1",
        "input_dim": model.input_dim,
        "layers": [
            {
                "activation": l.activation,
                "shape": list(l.shape),
                "weights": l.weights.ravel().tolist(),
                "bias": None if l.bias is None else l.bias.tolist(),
            }
            for l in model.layers
        ],
        "metadata": model.metadata,
    }


def model_from_dict(doc: dict) -> FloatModel:
    if doc.get("format") != "bitglow-float-mlp/1":
        raise ValueError("not a float model document")
    layers = [
        DenseLayer(
            np.array(l["weights"], dtype=np.float64).reshape(l["shape"]),
            None if l["bias"] is None else np.array(l["bias"], dtype=np.float64),
            l["activation"],
        )
        for l in doc["layers"]
    ]
    return FloatModel(layers, doc["input_dim"], dict(doc.get("metadata", {})))


def save_model(model: FloatModel, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> FloatModel:
    return model_from_dict(json.loads(Path(path).read_text()))
