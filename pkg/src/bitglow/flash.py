"""NOR-Flash layout of quantised weights and laser-position geometry.

Weights are packed back to back, layer after layer, row-major inside a layer.
Four int8 weights share one 32-bit word line in little-endian order, so flat
weight ``j`` lives in word ``j // 4`` at byte column ``j % 4``. Bit lines are
numbered left to right along the laser X axis: bit line 0 is the MSB of byte
column 3, bit line 31 the LSB of byte column 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .quant import QuantizedModel, from_byte, to_byte

WORD_BYTES = 4
WORD_BITS = 32
N_BITLINES = WORD_BITS


def bit_line(column: int, bit: int) -> int:
    return WORD_BITS - 1 - (8 * column + bit)


def line_to_column_bit(line: int) -> tuple[int, int]:
    if not 0 <= line < N_BITLINES:
        raise ValueError(f"bit line {line} outside 0..31")
    return divmod(WORD_BITS - 1 - line, 8)


@dataclass(frozen=True)
class BitLocation:
    weight_id: int
    word_index: int
    byte_column: int
    bit: int
    bit_line: int


@dataclass(frozen=True)
class FlashImage:
    data: bytes
    base_address: int = 0
    layer_offsets: tuple[int, ...] = (0,)
    layer_shapes: tuple[tuple[int, int], ...] = ()

    @property
    def n_weights(self) -> int:
        return len(self.data)

    @property
    def n_words(self) -> int:
        return math.ceil(len(self.data) / WORD_BYTES)

    def as_array(self) -> np.ndarray:
        """Read-only uint8 view of the stored bytes."""
        return np.frombuffer(self.data, dtype=np.uint8)

    def byte(self, weight_id: int) -> int:
        return self.data[weight_id]

    def offset(self, weight_id: int) -> int:
        if not 0 <= weight_id < len(self.data):
            raise IndexError(f"weight id {weight_id} out of range")
        return weight_id

    def address(self, weight_id: int) -> int:
        return self.base_address + self.offset(weight_id)

    def decode(self, weight_id: int) -> int:
        return int(from_byte(np.uint8(self.data[weight_id])))

    def sidecar_rows(self) -> Iterable[tuple[int, int, int, int, int]]:
        """(weight_id, layer, row, col, offset) for every stored weight."""
        for li, (off, (_, n_in)) in enumerate(zip(self.layer_offsets, self.layer_shapes)):
            n = self.layer_shapes[li][0] * n_in
            for k in range(n):
                r, c = divmod(k, n_in)
                yield off + k, li, r, c, off + k

    def dump(self, path, sidecar: Optional[str | Path] = None) -> None:
        Path(path).write_bytes(self.data)
        if sidecar is not None:
            lines = ["weight_id,layer,row,col,offset"]
            lines += [",".join(map(str, r)) for r in self.sidecar_rows()]
            Path(sidecar).write_text("\n".join(lines) + "\n")


def layout(qmodel: QuantizedModel, base_address: int = 0) -> FlashImage:
    flat = qmodel.flat_weights()
    return FlashImage(
        to_byte(flat).tobytes(),
        base_address,
        tuple(qmodel.layer_offsets),
        tuple(tuple(l.shape) for l in qmodel.layers),
    )


def locate(image: FlashImage, weight_id: int, bit: int) -> BitLocation:
    if not 0 <= weight_id < image.n_weights:
        raise IndexError(f"weight id {weight_id} out of range")
    if not 0 <= bit < 8:
        raise IndexError(f"bit index {bit} outside 0..7")
    word, col = divmod(weight_id, WORD_BYTES)
    return BitLocation(weight_id, word, col, bit, bit_line(col, bit))


def column_weights(image: FlashImage, column: int) -> np.ndarray:
    """Ids of every stored weight sitting in byte column ``column``."""
    return np.arange(column, image.n_weights, WORD_BYTES)


@dataclass(frozen=True)
class SpotConfig:
    """One laser spot over ``width`` adjacent bit lines starting at ``line``.

    ``line`` None means the spot sits outside the memory array.
    """

    line: Optional[int]
    width: int = 1

    def __post_init__(self):
        if self.width not in (1, 2):
            raise ValueError("spot width must be 1 or 2 bit lines")

    def lines(self) -> tuple[int, ...]:
        if self.line is None or not 0 <= self.line < N_BITLINES:
            return ()
        # width-2 spill goes to the next line, clipped at the array edge
        return tuple(l for l in range(self.line, self.line + self.width) if l < N_BITLINES)


def targets_of(image: FlashImage, spot: SpotConfig) -> set[tuple[int, int]]:
    """(weight_id, bit) pairs read through the bit lines covered by ``spot``."""
    out = set()
    for line in spot.lines():
        col, bit = line_to_column_bit(line)
        out.update((int(j), bit) for j in column_weights(image, col))
    return out


def spots_targets(image: FlashImage, spots: Sequence[SpotConfig]) -> set[tuple[int, int]]:
    out = set()
    for s in spots:
        out |= targets_of(image, s)
    return out


@dataclass(frozen=True)
class Geometry:
    """Linear map between laser X position (micrometres) and bit line.

    Bit line ``l`` covers [origin + pitch*l, origin + pitch*(l+1)).
    """

    origin: float = 0.0
    pitch: float = 40.0

    def bitline_to_x(self, line: int) -> float:
        return self.origin + self.pitch * line

    def x_to_bitline(self, x_um: float) -> Optional[int]:
        line = math.floor((x_um - self.origin) / self.pitch)
        return line if 0 <= line < N_BITLINES else None


DEFAULT_GEOMETRY = Geometry()


def x_to_bitline(x_um: float, geometry: Geometry = DEFAULT_GEOMETRY) -> Optional[int]:
    return geometry.x_to_bitline(x_um)


def bitline_to_x(line: int, geometry: Geometry = DEFAULT_GEOMETRY) -> float:
    return geometry.bitline_to_x(line)
