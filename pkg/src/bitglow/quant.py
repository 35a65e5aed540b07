"""8-bit symmetric power-of-two quantisation and the bit-exact integer kernel.

Every layer stores int8 weights with ``weight_dec`` fractional bits. The
kernel accumulates ``input * weight`` in wide integers, shifts right by
``out_shift`` (arithmetic, truncating toward -inf), saturates to int8 and
then applies ReLU on the 8-bit value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .nn import FloatModel, _forward_cache, cross_entropy

Q_MIN, Q_MAX = -128, 127

# (weight_id, stored byte 0..255) -> byte actually seen by the MAC
LoadHook = Callable[[int, int], int]


def dec_bits(max_abs: float) -> int:
    """Fractional bits so that ``max_abs`` fits in int8; 7 for an all-zero tensor."""
    if not np.isfinite(max_abs):
        raise ValueError("non-finite value in tensor")
    if max_abs == 0:
        return 7
    return 7 - int(math.ceil(math.log2(max_abs)))


def round_half_away(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def to_q7(v, dec: int) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(v) * 2.0 ** dec), Q_MIN, Q_MAX).astype(np.int8)


def ssat8(acc: np.ndarray) -> np.ndarray:
    return np.clip(acc, Q_MIN, Q_MAX)


def to_byte(q) -> np.ndarray:
    """Two's-complement byte view of int8 values."""
    return np.asarray(q, dtype=np.int8).view(np.uint8)


def from_byte(b) -> np.ndarray:
    return np.asarray(b, dtype=np.uint8).view(np.int8)


@dataclass(frozen=True)
class QTensor:
    values: np.ndarray
    dec: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.size and (v.min() < Q_MIN or v.max() > Q_MAX):
            raise ValueError("QTensor values outside int8 range")
        object.__setattr__(self, "values", v.astype(np.int8))

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * 2.0 ** -self.dec


@dataclass
class QLayer:
    q_weights: np.ndarray  # int8 [out, in]
    weight_dec: int
    out_shift: int
    output_dec: int
    activation: str = "relu"
    q_bias: Optional[np.ndarray] = None  # int8, ``bias_dec`` fractional bits
    bias_shift: int = 0  # left shift bringing the bias to accumulator scale

    def __post_init__(self):
        self.q_weights = np.asarray(self.q_weights, dtype=np.int8)
        if self.q_bias is not None:
            self.q_bias = np.asarray(self.q_bias, dtype=np.int8)
        if self.out_shift < 0 or self.bias_shift < 0:
            raise ValueError("shifts must be non-negative")

    def bias_acc(self) -> Optional[np.ndarray]:
        """Bias at accumulator scale, as added before the MACs."""
        if self.q_bias is None:
            return None
        return self.q_bias.astype(np.int64) << self.bias_shift

    @property
    def shape(self) -> tuple[int, int]:
        return self.q_weights.shape


@dataclass
class QuantizedModel:
    layers: list[QLayer]
    input_dec: int
    metadata: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def n_weights(self) -> int:
        return sum(l.q_weights.size for l in self.layers)

    @property
    def layer_offsets(self) -> list[int]:
        """Flat index of each layer's first weight (row-major, layer order)."""
        offs, n = [], 0
        for l in self.layers:
            offs.append(n)
            n += l.q_weights.size
        return offs

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([l.q_weights.ravel() for l in self.layers])

    def weight_index(self, weight_id: int) -> tuple[int, int, int]:
        """(layer, row, col) of a flat weight id."""
        if not 0 <= weight_id < self.n_weights:
            raise IndexError(f"weight id {weight_id} out of range")
        for li, off in reversed(list(enumerate(self.layer_offsets))):
            if weight_id >= off:
                row, col = divmod(weight_id - off, self.layers[li].shape[1])
                return li, row, col
        raise AssertionError("unreachable")

    def split_flat(self, flat: np.ndarray) -> list[np.ndarray]:
        """Cut a flat int8 vector back into per-layer matrices."""
        flat = np.asarray(flat, dtype=np.int8)
        if flat.shape != (self.n_weights,):
            raise ValueError("flat weight vector has the wrong length")
        out = []
        for l, off in zip(self.layers, self.layer_offsets):
            out.append(flat[off:off + l.q_weights.size].reshape(l.shape))
        return out

    def with_flat_weights(self, flat: np.ndarray) -> "QuantizedModel":
        layers = [
            QLayer(w.copy(), l.weight_dec, l.out_shift, l.output_dec, l.activation,
                   None if l.q_bias is None else l.q_bias.copy(), l.bias_shift)
            for l, w in zip(self.layers, self.split_flat(flat))
        ]
        return QuantizedModel(layers, self.input_dec, dict(self.metadata))

    def quantize_input(self, x) -> np.ndarray:
        return to_q7(x, self.input_dec)

    def dequantized(self) -> FloatModel:
        """Float shadow with weights q * 2**-dec (biases dropped unless present)."""
        from .nn import DenseLayer

        layers = []
        for l in self.layers:
            b = None
            if l.q_bias is not None:
                b = l.bias_acc().astype(np.float64) * 2.0 ** -(self._in_dec(l) + l.weight_dec)
            layers.append(DenseLayer(l.q_weights.astype(np.float64) * 2.0 ** -l.weight_dec,
                                     b, l.activation))
        return FloatModel(layers, self.input_dim)

    def _in_dec(self, layer: QLayer) -> int:
        i = next(i for i, l in enumerate(self.layers) if l is layer)
        return self.input_dec if i == 0 else self.layers[i - 1].output_dec

    @property
    def output_dec(self) -> int:
        return self.layers[-1].output_dec


# ----------------------------------------------------------------- quantisation

def quantize(model: FloatModel, calibration) -> QuantizedModel:
    """Quantise weights per layer and calibrate activation scales on ``calibration``.

    Activation fractional bits come from the max absolute float activation
    (post-ReLU for hidden layers, logits for the last one). When that would
    need a negative shift the output scale is lowered to make the shift 0.
    Biases get their own int8 scale, capped at the accumulator scale so the
    bias shift stays non-negative.
    """
    calib = np.asarray(calibration, dtype=np.float64)
    for l in model.layers:
        if not np.all(np.isfinite(l.weights)):
            raise ValueError("model has non-finite weights")
    cache, logits = _forward_cache(model, calib)
    in_dec = dec_bits(float(np.max(np.abs(calib))))
    input_dec = in_dec
    layers = []
    for i, layer in enumerate(model.layers):
        w_dec = dec_bits(float(np.max(np.abs(layer.weights))))
        act = cache[i + 1][0] if i + 1 < len(cache) else logits
        out_dec = dec_bits(float(np.max(np.abs(act))))
        shift = in_dec + w_dec - out_dec
        if shift < 0:
            out_dec, shift = in_dec + w_dec, 0
        q_bias, b_shift = None, 0
        if layer.bias is not None:
            b_dec = min(dec_bits(float(np.max(np.abs(layer.bias)))), in_dec + w_dec)
            q_bias, b_shift = to_q7(layer.bias, b_dec), in_dec + w_dec - b_dec
        layers.append(QLayer(to_q7(layer.weights, w_dec), w_dec, shift, out_dec,
                             layer.activation, q_bias, b_shift))
        in_dec = out_dec
    meta = dict(model.metadata)
    q_in = to_q7(calib, input_dec)
    meta["input_q_range"] = [int(q_in.min()), int(q_in.max())]
    return QuantizedModel(layers, input_dec, meta)


def quantize_input(x, dec: int) -> QTensor:
    return QTensor(to_q7(x, dec), dec)


# ----------------------------------------------------------------- inference

def _layer_step(layer: QLayer, w: np.ndarray, a: np.ndarray) -> np.ndarray:
    acc = a.astype(np.int64) @ w.astype(np.int64).T
    if layer.q_bias is not None:
        acc = acc + layer.bias_acc()
    out = ssat8(acc >> layer.out_shift)
    if layer.activation == "relu":
        out = np.maximum(out, 0)
    return out


def q_infer(qmodel: QuantizedModel, q_input, load_hook: Optional[LoadHook] = None):
    """One inference on an int8 input vector.

    Each weight byte is read exactly once, in flat-id order, through
    ``load_hook`` when given. Returns (QTensor logits, predicted label);
    ties go to the lowest label.
    """
    a = np.asarray(getattr(q_input, "values", q_input))
    if a.shape != (qmodel.input_dim,):
        raise ValueError(f"input length {a.shape} != {qmodel.input_dim}")
    a = a.astype(np.int64)
    wid = 0
    for layer in qmodel.layers:
        w = layer.q_weights
        if load_hook is not None:
            stored = to_byte(w).ravel()
            seen = np.empty_like(stored)
            for j, byte in enumerate(stored.tolist()):
                seen[j] = load_hook(wid + j, byte) & 0xFF
            w = from_byte(seen).reshape(layer.shape)
        wid += w.size
        a = _layer_step(layer, w, a)
    logits = QTensor(a, qmodel.output_dec)
    return logits, int(np.argmax(a))


def q_forward(qmodel: QuantizedModel, q_inputs, weights: Optional[Sequence[np.ndarray]] = None,
              return_hidden: bool = False):
    """Vectorised kernel over a batch of int8 inputs.

    ``weights`` optionally replaces the per-layer int8 matrices (as seen at
    load time), which is how static or masked faults are simulated in bulk.
    """
    a = np.asarray(q_inputs).astype(np.int64)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[1] != qmodel.input_dim:
        raise ValueError(f"input width {a.shape[1]} != {qmodel.input_dim}")
    ws = weights if weights is not None else [l.q_weights for l in qmodel.layers]
    hidden = [a]
    for layer, w in zip(qmodel.layers, ws):
        a = _layer_step(layer, w, a)
        hidden.append(a)
    return (a, hidden) if return_hidden else a


def q_predict(qmodel: QuantizedModel, q_inputs, weights=None) -> np.ndarray:
    return np.argmax(q_forward(qmodel, q_inputs, weights), axis=1)


def q_accuracy(qmodel: QuantizedModel, x, y, load_hook: Optional[LoadHook] = None,
               weights=None, quantized_input: bool = False) -> float:
    """Fraction of exact label matches.

    ``x`` is float unless ``quantized_input``. With a hook every sample runs
    through q_infer so the hook sees every load of every inference.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    xq = np.asarray(x) if quantized_input else qmodel.quantize_input(x)
    if load_hook is not None:
        preds = np.array([q_infer(qmodel, row, load_hook)[1] for row in xq])
    else:
        preds = q_predict(qmodel, xq, weights)
    return float(np.mean(preds == y))


def q_loss(qmodel: QuantizedModel, xq, y, weights=None) -> float:
    """Cross-entropy of the dequantised integer logits."""
    logits = q_forward(qmodel, xq, weights).astype(np.float64) * 2.0 ** -qmodel.output_dec
    return cross_entropy(logits, y)


# ----------------------------------------------------------------- serialisation

def qmodel_to_dict(q: QuantizedModel) -> dict:
    return {
        "format": "bitglow-q7-mlp/1",
        "input_dec": q.input_dec,
        "layers": [
            {
                "shape": list(l.shape),
                "q_weights": l.q_weights.ravel().astype(int).tolist(),
                "weight_dec": l.weight_dec,
                "out_shift": l.out_shift,
                "output_dec": l.output_dec,
                "activation": l.activation,
                "q_bias": None if l.q_bias is None else l.q_bias.astype(int).tolist(),
                "bias_shift": l.bias_shift,
            }
            for l in q.layers
        ],
        "metadata": q.metadata,
    }


def qmodel_from_dict(doc: dict) -> QuantizedModel:
    if doc.get("format") != "bitglow-q7-mlp/1":
        raise ValueError("not a quantized model document")
    layers = []
    for l in doc["layers"]:
        w = np.array(l["q_weights"], dtype=np.int64)
        if w.size and (w.min() < Q_MIN or w.max() > Q_MAX):
            raise ValueError("quantized weight outside int8 range")
        layers.append(QLayer(
            w.astype(np.int8).reshape(l["shape"]), l["weight_dec"], l["out_shift"],
            l["output_dec"], l["activation"],
            None if l["q_bias"] is None else np.array(l["q_bias"], dtype=np.int8),
            l.get("bias_shift", 0),
        ))
    return QuantizedModel(layers, doc["input_dec"], dict(doc.get("metadata", {})))


def save_qmodel(q: QuantizedModel, path) -> None:
    Path(path).write_text(json.dumps(qmodel_to_dict(q)))


def load_qmodel(path) -> QuantizedModel:
    return qmodel_from_dict(json.loads(Path(path).read_text()))
