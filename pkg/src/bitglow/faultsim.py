"""Transient bit-set injection at weight-load time and laser sweep campaigns.

A bit-set forces the targeted bit of the byte being read to 1. The stored
Flash content is never touched: faults live in the load hook (or the
equivalent per-weight OR mask) for the duration of one inference.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .flash import (
    DEFAULT_GEOMETRY,
    N_BITLINES,
    FlashImage,
    Geometry,
    SpotConfig,
    spots_targets,
)
from .quant import QuantizedModel, from_byte, q_forward, q_infer


def apply_bitset(byte: int, bit: int) -> int:
    if not 0 <= bit < 8:
        raise ValueError(f"bit index {bit} outside 0..7")
    return (byte | (1 << bit)) & 0xFF


@dataclass(frozen=True)
class TriggerSet:
    """Which weight loads fire the laser: every load, or an explicit list."""

    mode: str = "all_loads"
    weight_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.mode not in ("all_loads", "weight_list"):
            raise ValueError(f"unknown trigger mode {self.mode!r}")
        if len(set(self.weight_ids)) != len(self.weight_ids):
            raise ValueError("trigger weight list has duplicates")
        if self.mode == "all_loads" and self.weight_ids:
            raise ValueError("all_loads trigger takes no weight list")

    @classmethod
    def all_loads(cls) -> "TriggerSet":
        return cls()

    @classmethod
    def only(cls, ids: Iterable[int]) -> "TriggerSet":
        return cls("weight_list", tuple(int(i) for i in ids))

    def fires(self, weight_id: int) -> bool:
        return self.mode == "all_loads" or weight_id in self.weight_ids

    def validate(self, image: FlashImage) -> None:
        bad = [i for i in self.weight_ids if not 0 <= i < image.n_weights]
        if bad:
            raise ValueError(f"trigger references unknown weights {bad[:5]}")


def fault_mask(image: FlashImage, spots: Sequence[SpotConfig], trigger: TriggerSet) -> np.ndarray:
    """Per-weight OR mask of the bits set on a triggered load."""
    trigger.validate(image)
    mask = np.zeros(image.n_weights, dtype=np.uint8)
    for wid, bit in spots_targets(image, spots):
        if trigger.fires(wid):
            mask[wid] |= 1 << bit
    return mask


def effective_bits(image: FlashImage, mask: np.ndarray) -> int:
    """Targeted bits whose stored value is 0, i.e. bit-sets that change the read."""
    flips = mask & ~image.as_array()
    return int(np.unpackbits(flips).sum())


def mask_hook(mask: np.ndarray):
    def hook(weight_id: int, byte: int) -> int:
        return byte | int(mask[weight_id])
    return hook


def masked_weights(qmodel: QuantizedModel, image: FlashImage, mask: np.ndarray) -> list[np.ndarray]:
    """Per-layer int8 matrices as read through the faulted bit lines."""
    seen = from_byte(image.as_array() | mask)
    return qmodel.split_flat(seen)


def faulted_inference(qmodel: QuantizedModel, image: FlashImage, spots: Sequence[SpotConfig],
                      trigger: TriggerSet, q_input) -> tuple[int, int]:
    """(prediction, faulted bit count) of one inference under laser shots."""
    mask = fault_mask(image, spots, trigger)
    _, label = q_infer(qmodel, q_input, mask_hook(mask))
    return label, effective_bits(image, mask)


def faulted_predictions(qmodel: QuantizedModel, image: FlashImage, mask: np.ndarray,
                        q_inputs) -> np.ndarray:
    """Batch equivalent of faulted_inference for a fixed mask."""
    return np.argmax(q_forward(qmodel, q_inputs, masked_weights(qmodel, image, mask)), axis=1)


@dataclass
class CampaignRow:
    x_um: float
    lines: tuple[int, ...]
    accuracy: float
    faulted_bits: int


@dataclass
class CampaignResult:
    rows: list[CampaignRow]
    baseline_accuracy: float
    spots: int = 1
    metadata: dict = field(default_factory=dict)

    def worst(self) -> CampaignRow:
        """Lowest-accuracy row; earliest position on ties."""
        return min(self.rows, key=lambda r: r.accuracy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x_um", "bitline", "accuracy", "faulted_bits"])
        for r in self.rows:
            lines = "|".join(map(str, r.lines)) if r.lines else "none"
            w.writerow([f"{r.x_um:g}", lines, f"{r.accuracy:.6f}", r.faulted_bits])
        return buf.getvalue()

    def summary(self) -> dict:
        worst = self.worst()
        return {
            "spots": self.spots,
            "positions": len(self.rows),
            "baseline_accuracy": self.baseline_accuracy,
            "worst_x_um": worst.x_um,
            "worst_bitline": list(worst.lines),
            "worst_accuracy": worst.accuracy,
            "worst_faulted_bits": worst.faulted_bits,
            "max_faulted_bits": max(r.faulted_bits for r in self.rows),
            **self.metadata,
        }


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("BITGLOW_THREADS", "1")))
    except ValueError:
        return 1


def _run_rows(fn, items):
    n = _workers()
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))  # map keeps position order


def _spots_at(line: Optional[int], offsets: Sequence[int], width: int) -> list[SpotConfig]:
    if line is None:
        return [SpotConfig(None, width) for _ in offsets]
    return [SpotConfig(line + o if line + o < N_BITLINES else None, width) for o in offsets]


def _campaign(qmodel, image, positions, offsets, width, trigger, x_test, y_test,
              geometry, quantized_input) -> CampaignResult:
    y = np.asarray(y_test)
    xq = np.asarray(x_test) if quantized_input else qmodel.quantize_input(x_test)
    baseline = float(np.mean(np.argmax(q_forward(qmodel, xq), axis=1) == y))

    def row(x_um):
        spots = _spots_at(geometry.x_to_bitline(x_um), offsets, width)
        mask = fault_mask(image, spots, trigger)
        preds = faulted_predictions(qmodel, image, mask, xq)
        lines = tuple(l for s in spots for l in s.lines())
        return CampaignRow(float(x_um), lines, float(np.mean(preds == y)),
                           effective_bits(image, mask))

    if positions is None:
        positions = [geometry.bitline_to_x(l) for l in range(N_BITLINES)]
    rows = _run_rows(row, list(positions))
    return CampaignResult(rows, baseline, spots=len(offsets))


def sweep(qmodel: QuantizedModel, image: FlashImage, positions: Optional[Iterable[float]],
          x_test, y_test, trigger: TriggerSet = TriggerSet(), width: int = 1,
          geometry: Geometry = DEFAULT_GEOMETRY, quantized_input: bool = False) -> CampaignResult:
    """Single-spot sweep: one row per laser X position (default: every bit line)."""
    return _campaign(qmodel, image, positions, (0,), width, trigger, x_test, y_test,
                     geometry, quantized_input)


def dual_spot_sweep(qmodel: QuantizedModel, image: FlashImage, positions: Optional[Iterable[float]],
                    x_test, y_test, trigger: TriggerSet = TriggerSet(), width: int = 1,
                    offset: int = 16, geometry: Geometry = DEFAULT_GEOMETRY,
                    quantized_input: bool = False) -> CampaignResult:
    """Two spots at bit lines (l, l + offset); the second one falls off past line 31."""
    if offset < width:
        raise ValueError(f"spots at offset {offset} with width {width} overlap")
    return _campaign(qmodel, image, positions, (0, offset), width, trigger, x_test, y_test,
                     geometry, quantized_input)


def positions_um(start: float, stop: float, step: float) -> list[float]:
    """Inclusive µm range with a fixed step."""
    if step <= 0:
        raise ValueError("step must be positive")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(max(n, 0))]
