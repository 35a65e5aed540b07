"""MSB recovery by differential observation of bit-set faults.

For each weight the laser sets its MSB on the single load of that weight and
the outputs over a probe set are compared with the fault-free ones. Any
difference proves the stored bit was 0; no difference is read as 1.

Two evaluation paths give identical guesses:

* ``direct``: re-run the faulted model on every probe (the reference);
* ``fast``: exploit that one faulted weight only perturbs one neuron. For
  every neuron the downstream effect of each possible 8-bit output value is
  tabulated once per probe, then each weight of that neuron is resolved by
  table lookup. Integer semantics are kept exactly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .faultsim import TriggerSet, fault_mask, masked_weights
from .flash import FlashImage, SpotConfig, bit_line
from .quant import Q_MAX, Q_MIN, QuantizedModel, from_byte, q_forward, ssat8

REFERENCE_RECOVERED_FRACTION = 0.919


def random_probes(qmodel: QuantizedModel, n: int = 500, seed: int = 0,
                  low: Optional[int] = None, high: Optional[int] = None) -> np.ndarray:
    """Uniform random int8 input vectors over the model's quantised input range."""
    lo, hi = qmodel.metadata.get("input_q_range", (Q_MIN, Q_MAX))
    lo = lo if low is None else low
    hi = hi if high is None else high
    rng = np.random.default_rng(seed)
    return rng.integers(lo, hi + 1, size=(n, qmodel.input_dim)).astype(np.int8)


def _differs(faulted: np.ndarray, nominal: np.ndarray, compare: str) -> np.ndarray:
    if compare == "logits":
        return np.any(faulted != nominal, axis=-1)
    if compare == "label":
        return np.argmax(faulted, axis=-1) != np.argmax(nominal, axis=-1)
    raise ValueError(f"unknown comparison {compare!r}")


def probe_weight(qmodel: QuantizedModel, image: FlashImage, weight_id: int, probes,
                 bit: int = 7, compare: str = "logits") -> int:
    """Guess the stored value (0 or 1) of one bit by faulting only that weight's load."""
    column = weight_id % 4
    spot = [SpotConfig(bit_line(column, bit))]
    mask = fault_mask(image, spot, TriggerSet.only([weight_id]))
    nominal = q_forward(qmodel, probes)
    faulted = q_forward(qmodel, probes, masked_weights(qmodel, image, mask))
    return 0 if np.any(_differs(faulted, nominal, compare)) else 1


@dataclass
class ExtractionReport:
    guesses: np.ndarray  # 0/1 per weight
    truth: np.ndarray
    probe_count: int
    bit: int = 7
    reference: float = REFERENCE_RECOVERED_FRACTION
    extra: dict = field(default_factory=dict)
    weight_ids: Optional[np.ndarray] = None  # None means 0..n-1

    @property
    def correct_mask(self) -> np.ndarray:
        return self.guesses == self.truth

    @property
    def guessed_zero(self) -> int:
        return int(np.sum(self.guesses == 0))

    @property
    def guessed_one(self) -> int:
        return int(np.sum(self.guesses == 1))

    @property
    def correct(self) -> int:
        return int(np.sum(self.correct_mask))

    @property
    def incorrect(self) -> int:
        return len(self.guesses) - self.correct

    @property
    def incorrect_zero_guesses(self) -> int:
        return int(np.sum((self.guesses == 0) & (self.truth == 1)))

    @property
    def recovered_fraction(self) -> float:
        return self.correct / len(self.guesses)

    def summary(self) -> dict:
        return {
            "weights": len(self.guesses),
            "bit": self.bit,
            "probe_count": self.probe_count,
            "guessed_zero": self.guessed_zero,
            "guessed_one": self.guessed_one,
            "correct": self.correct,
            "incorrect": self.incorrect,
            "incorrect_zero_guesses": self.incorrect_zero_guesses,
            "recovered_fraction": self.recovered_fraction,
            "reference": self.reference,
            **self.extra,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["weight_id", "true_msb", "guess", "correct"])
        ids = range(len(self.guesses)) if self.weight_ids is None else self.weight_ids.tolist()
        for i, t, g in zip(ids, self.truth.tolist(), self.guesses.tolist()):
            w.writerow([i, t, g, int(t == g)])
        return buf.getvalue()


def _tail(qmodel: QuantizedModel, start: int, a: np.ndarray) -> np.ndarray:
    """Run layers ``start..`` of the kernel on activations ``a`` (any leading shape)."""
    lead = a.shape[:-1]
    a = a.reshape(-1, a.shape[-1])
    for layer in qmodel.layers[start:]:
        # float64 matmul is exact here: |acc| < 2**53
        acc = (a.astype(np.float64) @ layer.q_weights.astype(np.float64).T).astype(np.int64)
        if layer.q_bias is not None:
            acc = acc + layer.bias_acc()
        a = ssat8(acc >> layer.out_shift)
        if layer.activation == "relu":
            a = np.maximum(a, 0)
    return a.reshape(*lead, a.shape[-1])


class _SingleFaultEngine:
    """Exact outcome of perturbing one neuron output, tabulated per probe."""

    def __init__(self, qmodel: QuantizedModel, probes: np.ndarray, compare: str):
        self.q = qmodel
        self.compare = compare
        self.logits, self.hidden = q_forward(qmodel, probes, return_hidden=True)
        self.accs = []
        for li, layer in enumerate(qmodel.layers):
            acc = self.hidden[li] @ layer.q_weights.astype(np.int64).T
            if layer.q_bias is not None:
                acc = acc + layer.bias_acc()
            self.accs.append(acc)

    def value_range(self, li: int) -> np.ndarray:
        lo = 0 if self.q.layers[li].activation == "relu" else Q_MIN
        return np.arange(lo, Q_MAX + 1)

    def table(self, li: int, r: int) -> np.ndarray:
        """bool [probes, values]: would the output change if neuron r of layer li read v?"""
        values = self.value_range(li)
        nominal_out = self.hidden[li + 1][:, r]
        last = li == len(self.q.layers) - 1
        if last:
            # logits: P x V x C with column r replaced
            logits = np.repeat(self.logits[:, None, :], len(values), axis=1)
            logits[:, :, r] = values[None, :]
            return _differs(logits, self.logits[:, None, :], self.compare)
        nxt = self.q.layers[li + 1]
        w_col = nxt.q_weights[:, r].astype(np.int64)
        dv = values[None, :] - nominal_out[:, None]  # P x V
        acc = self.accs[li + 1][:, None, :] + dv[:, :, None] * w_col[None, None, :]
        a = ssat8(acc >> nxt.out_shift)
        if nxt.activation == "relu":
            a = np.maximum(a, 0)
        out = _tail(self.q, li + 2, a) if li + 2 < len(self.q.layers) else a
        return _differs(out, self.logits[:, None, :], self.compare)

    def detect_layer(self, li: int, stored: np.ndarray, bit: int) -> np.ndarray:
        """Detection flag for every weight of layer li under a bit-set on ``bit``."""
        layer = self.q.layers[li]
        n_out, n_in = layer.shape
        stored = stored.reshape(n_out, n_in)
        faulted = from_byte(stored | np.uint8(1 << bit)).astype(np.int64)
        delta = faulted - from_byte(stored).astype(np.int64)  # out x in
        x = self.hidden[li]
        lo = self.value_range(li)[0]
        found = np.zeros((n_out, n_in), dtype=bool)
        for r in range(n_out):
            live = np.flatnonzero(delta[r])
            if len(live) == 0:
                continue
            acc = self.accs[li][:, r][:, None] + x[:, live] * delta[r, live][None, :]
            out = ssat8(acc >> layer.out_shift)
            if layer.activation == "relu":
                out = np.maximum(out, 0)
            moved = out != self.hidden[li + 1][:, r][:, None]
            if not moved.any():
                continue
            tab = self.table(li, r)
            hit = tab[np.arange(len(x))[:, None], out - lo] & moved
            found[r, live] = hit.any(axis=0)
        return found.ravel()


def extract_msbs(qmodel: QuantizedModel, image: FlashImage, probes, bit: int = 7,
                 compare: str = "logits", method: str = "fast",
                 weight_ids=None) -> ExtractionReport:
    """Guess the ``bit`` of every stored weight and score against the image.

    ``weight_ids`` restricts the run to a subset (the report then covers only
    those weights, in the given order).
    """
    probes = np.asarray(probes)
    if len(probes) == 0:
        raise ValueError("need at least one probe input")
    stored = image.as_array()
    truth = ((stored >> bit) & 1).astype(np.int64)
    ids = np.arange(image.n_weights) if weight_ids is None else np.asarray(weight_ids, dtype=np.int64)
    if method == "direct":
        guesses = np.array([probe_weight(qmodel, image, int(i), probes, bit, compare) for i in ids])
    elif method == "fast":
        engine = _SingleFaultEngine(qmodel, probes, compare)
        detected = np.concatenate([
            engine.detect_layer(li, stored[off:off + l.q_weights.size], bit)
            for li, (l, off) in enumerate(zip(qmodel.layers, qmodel.layer_offsets))
        ])
        guesses = np.where(detected, 0, 1)[ids]
    else:
        raise ValueError(f"unknown method {method!r}")
    return ExtractionReport(guesses.astype(np.int64), truth[ids], len(probes), bit,
                            weight_ids=None if weight_ids is None else ids)
