"""Bit-Set Constrained Attack.

A bit-flip attack restricted to what one laser spot can do: only 0 -> 1
transitions, only on the bits of a single (byte column, bit) line of the
Flash image, at most ``budget`` of them. Bits are ranked by a first-order
estimate of the loss increase, the top candidates are each set, measured on
the quantised model and restored, and the most damaging one is kept.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .faultsim import TriggerSet, fault_mask, faulted_predictions
from .flash import FlashImage, SpotConfig, bit_line
from .nn import FloatModel, backward
from .quant import QuantizedModel, from_byte, q_forward, q_loss, to_byte

log = logging.getLogger(__name__)

REFERENCE_TARGETS = {"budget": 20, "acc_after_5": 0.39, "acc_after_10": 0.25, "nominal": 0.92}


@dataclass
class BscaConfig:
    budget: int = 20
    batch_size: int = 100
    candidate_cap: int = 128
    seed: int = 0
    line: Optional[tuple[int, int]] = None  # (column, bit); None searches all 32

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.batch_size < 1 or self.candidate_cap < 1:
            raise ValueError("batch size and candidate cap must be positive")
        if self.line is not None:
            m, k = self.line
            if not (0 <= m < 4 and 0 <= k < 8):
                raise ValueError(f"invalid line {self.line}")


@dataclass(frozen=True)
class Candidate:
    weight_id: int
    score: float


@dataclass
class FlipRecord:
    weight_id: int
    layer: int
    row: int
    col: int
    offset: int
    bit: int
    byte_before: int
    byte_after: int
    loss_before: float
    loss_after: float
    accuracy_after: float
    candidates_evaluated: int
    best_alternative_loss: Optional[float]


@dataclass
class BscaResult:
    column: int
    bit: int
    model: QuantizedModel
    log: list[FlipRecord]
    baseline_accuracy: float
    baseline_loss: float
    notice: Optional[str] = None

    @property
    def bit_line(self) -> int:
        return bit_line(self.column, self.bit)

    @property
    def final_accuracy(self) -> float:
        return self.log[-1].accuracy_after if self.log else self.baseline_accuracy

    @property
    def final_loss(self) -> float:
        return self.log[-1].loss_after if self.log else self.baseline_loss

    def trace(self) -> list[float]:
        """Accuracy after 0, 1, ..., len(log) bit-sets."""
        return [self.baseline_accuracy] + [r.accuracy_after for r in self.log]

    @property
    def weight_ids(self) -> list[int]:
        return [r.weight_id for r in self.log]


def draw_batch(x, y, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed random batch of ``n`` samples used for every loss measurement."""
    x, y = np.asarray(x), np.asarray(y)
    if n >= len(y):
        return x, y
    idx = np.sort(np.random.default_rng(seed).choice(len(y), n, replace=False))
    return x[idx], y[idx]


def _weight_decs(qmodel: QuantizedModel) -> np.ndarray:
    return np.concatenate([np.full(l.q_weights.size, l.weight_dec) for l in qmodel.layers])


def bitset_delta(qmodel: QuantizedModel, bit: int) -> np.ndarray:
    """Dequantised change of each weight when ``bit`` goes 0 -> 1."""
    step = -128.0 if bit == 7 else float(1 << bit)
    return step * 2.0 ** -_weight_decs(qmodel).astype(np.float64)


def flat_gradient(shadow: FloatModel, x, y) -> np.ndarray:
    return np.concatenate([dw.ravel() for dw, _ in backward(shadow, x, y)])


def bit_gradient_rank(qmodel: QuantizedModel, float_shadow: FloatModel, x_batch, y_batch,
                      line: tuple[int, int], stored: Optional[np.ndarray] = None) -> list[Candidate]:
    """Eligible bits of ``line`` ordered by predicted loss increase (grad * delta_w).

    ``stored`` is the current byte image (defaults to the model's weights);
    bits already at 1 are excluded. Ties keep the lower weight id first.
    """
    column, bit = line
    if stored is None:
        stored = to_byte(qmodel.flat_weights())
    ids = np.arange(column, qmodel.n_weights, 4)
    ids = ids[(stored[ids] >> bit) & 1 == 0]
    if len(ids) == 0:
        return []
    grad = flat_gradient(float_shadow, x_batch, y_batch)
    scores = grad[ids] * bitset_delta(qmodel, bit)[ids]
    order = np.lexsort((ids, -scores))
    return [Candidate(int(ids[i]), float(scores[i])) for i in order]


class _State:
    """Current (attacked) weights of a quantised model plus batched evaluators."""

    def __init__(self, qmodel: QuantizedModel, stored: np.ndarray, xq_batch, y_batch, xq_eval, y_eval):
        self.qmodel = qmodel
        self.stored = stored.copy()
        self.xq_batch, self.y_batch = xq_batch, y_batch
        self.xq_eval, self.y_eval = xq_eval, y_eval

    def weights(self, stored=None):
        return self.qmodel.split_flat(from_byte(self.stored if stored is None else stored))

    def loss(self, stored=None) -> float:
        return q_loss(self.qmodel, self.xq_batch, self.y_batch, self.weights(stored))

    def accuracy(self) -> float:
        preds = np.argmax(q_forward(self.qmodel, self.xq_eval, self.weights()), axis=1)
        return float(np.mean(preds == self.y_eval))

    def shadow(self) -> FloatModel:
        return self.qmodel.with_flat_weights(from_byte(self.stored)).dequantized()


def bsca_line(qmodel: QuantizedModel, image: FlashImage, column: int, bit: int,
              config: BscaConfig, x_batch, y_batch, x_eval, y_eval) -> BscaResult:
    """Greedy budgeted bit-set attack on one (column, bit) line.

    ``x_batch``/``x_eval`` are float inputs; they are quantised with the
    model's input scale. The canonical ``image`` is never modified.
    """
    stored = image.as_array().copy()
    xq_b = qmodel.quantize_input(x_batch)
    xq_e = qmodel.quantize_input(x_eval)
    st = _State(qmodel, stored, xq_b, np.asarray(y_batch), xq_e, np.asarray(y_eval))
    # float shadow sees the same (quantised) inputs the device sees
    xf_b = xq_b.astype(np.float64) * 2.0 ** -qmodel.input_dec
    base_loss, base_acc = st.loss(), st.accuracy()
    result = BscaResult(column, bit, qmodel, [], base_acc, base_loss)
    loss_now = base_loss
    mask = np.uint8(1 << bit)
    if config.budget == 0:
        result.notice = "zero budget"
    for _ in range(config.budget):
        ranked = bit_gradient_rank(qmodel, st.shadow(), xf_b, y_batch, (column, bit), st.stored)
        if not ranked:
            result.notice = (f"line (column {column}, bit {bit}) exhausted after "
                             f"{len(result.log)} of {config.budget} bit-sets")
            log.info(result.notice)
            break
        pool = ranked[: config.candidate_cap]
        trial = st.stored.copy()
        measured = []
        for c in pool:
            trial[c.weight_id] |= mask
            measured.append((st.loss(trial), c.weight_id))
            trial[c.weight_id] = st.stored[c.weight_id]
        # highest measured loss wins, lower weight id on ties
        measured.sort(key=lambda t: (-t[0], t[1]))
        best_loss, wid = measured[0]
        before = int(st.stored[wid])
        st.stored[wid] = before | mask
        layer, row, col = qmodel.weight_index(wid)
        result.log.append(FlipRecord(
            weight_id=wid, layer=layer, row=row, col=col, offset=image.offset(wid), bit=bit,
            byte_before=before, byte_after=int(st.stored[wid]),
            loss_before=loss_now, loss_after=best_loss, accuracy_after=st.accuracy(),
            candidates_evaluated=len(measured),
            best_alternative_loss=measured[1][0] if len(measured) > 1 else None,
        ))
        loss_now = best_loss
    result.model = qmodel.with_flat_weights(from_byte(st.stored))
    return result


@dataclass
class SearchReport:
    table: list[dict]
    winner: BscaResult
    results: list[BscaResult] = field(repr=False)

    @property
    def line(self) -> tuple[int, int]:
        return self.winner.column, self.winner.bit


def all_lines() -> list[tuple[int, int]]:
    return [(m, k) for m in range(4) for k in range(8)]


def bsca_search(qmodel: QuantizedModel, image: FlashImage, config: BscaConfig,
                x_batch, y_batch, x_eval, y_eval,
                lines: Optional[Sequence[tuple[int, int]]] = None) -> SearchReport:
    """Run bsca_line on every line and keep the lowest-accuracy faulted model.

    Ties on accuracy go to the higher final batch loss, then to the first line
    in (column, bit) order.
    """
    lines = all_lines() if lines is None else list(lines)
    results = [bsca_line(qmodel, image, m, k, config, x_batch, y_batch, x_eval, y_eval)
               for m, k in lines]
    table = [
        {
            "column": r.column,
            "bit": r.bit,
            "bit_line": r.bit_line,
            "flips": len(r.log),
            "final_accuracy": r.final_accuracy,
            "final_loss": r.final_loss,
        }
        for r in results
    ]
    winner = min(results, key=lambda r: (r.final_accuracy, -r.final_loss))
    return SearchReport(table, winner, results)


def replay_on_simulator(flip_log: Sequence[FlipRecord], qmodel: QuantizedModel, image: FlashImage,
                        column: int, bit: int, x_eval, y_eval) -> list[tuple[int, float]]:
    """Accuracy after each prefix of the log, reproduced with guided laser shots.

    The spot sits on the attacked bit line for the whole run; the trigger
    fires only on the loads of the weights selected so far.
    """
    spot = [SpotConfig(bit_line(column, bit))]
    xq = qmodel.quantize_input(x_eval)
    y = np.asarray(y_eval)
    curve = []
    for n in range(len(flip_log) + 1):
        trigger = TriggerSet.only(r.weight_id for r in flip_log[:n])
        mask = fault_mask(image, spot, trigger)
        preds = faulted_predictions(qmodel, image, mask, xq)
        curve.append((n, float(np.mean(preds == y))))
    return curve


def flip_log_rows(result: BscaResult) -> list[dict]:
    return [asdict(r) for r in result.log]
