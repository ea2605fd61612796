"""Fixed-size cell framing and payload fragmentation.

Every link message is a sequence of 514-byte cells. Oversized handshake
payloads are fragmented: the head rides in the originating cell (CREATE2 keeps
an 84-byte reserved handshake region carrying total length and fragment count)
and the remainder in CREATE2_ADDATA cells. The receiver can acknowledge the
first cell immediately; completeness is detected from the advertised total, so
fragmentation never costs an extra round trip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from .errors import FormatError, IncompleteError, ParameterError

CELL_SIZE = 514
PAYLOAD_SIZE = 509
HANDSHAKE_RESERVED = 84
CREATE2_CAPACITY = PAYLOAD_SIZE - HANDSHAKE_RESERVED  # 425
ADDATA_CAPACITY = PAYLOAD_SIZE


class CellCommand(IntEnum):
    RELAY = 3
    CREATE2 = 10
    CREATED2 = 11
    EXTEND2 = 14
    EXTENDED2 = 15
    CREATE2_ADDATA = 40


_WIRE = struct.Struct(">IB")
# magic, total payload length, fragment count, padding to 84 bytes
_HANDSHAKE = struct.Struct(">4sIH74s")
_HANDSHAKE_MAGIC = b"HSK1"


@dataclass(frozen=True)
class Cell:
    """One link cell. `seq` is fragment-order bookkeeping carried by the link
    framing (like TCP ordering), not part of the 509-byte payload."""

    circuit_id: int
    command: CellCommand
    payload: bytes
    seq: int = 0

    def __post_init__(self):
        if not 0 <= self.circuit_id < 2**32:
            raise ParameterError("circuit_id must fit 32 bits")
        if len(self.payload) > PAYLOAD_SIZE:
            raise ParameterError(f"payload exceeds {PAYLOAD_SIZE} bytes")

    def to_wire(self) -> bytes:
        return (
            _WIRE.pack(self.circuit_id, int(self.command))
            + self.payload
            + bytes(PAYLOAD_SIZE - len(self.payload))
        )

    @classmethod
    def from_wire(cls, data: bytes) -> "Cell":
        if len(data) != CELL_SIZE:
            raise FormatError(f"cell must be {CELL_SIZE} bytes, got {len(data)}")
        circuit_id, command = _WIRE.unpack_from(data)
        try:
            cmd = CellCommand(command)
        except ValueError as exc:
            raise FormatError(f"unknown cell command {command}") from exc
        return cls(circuit_id=circuit_id, command=cmd, payload=data[5:])


def fragment(
    payload: bytes,
    first_cell_capacity: int,
    addata_capacity: int,
    circuit_id: int = 0,
    first_command: CellCommand = CellCommand.CREATE2,
) -> list[Cell]:
    """Chunk `payload` into one leading cell plus CREATE2_ADDATA continuation cells."""
    if first_cell_capacity <= 0 or addata_capacity <= 0:
        raise ParameterError("cell capacities must be positive")
    cells = [Cell(circuit_id, first_command, payload[:first_cell_capacity], seq=0)]
    rest = payload[first_cell_capacity:]
    for seq, off in enumerate(range(0, len(rest), addata_capacity), start=1):
        cells.append(
            Cell(circuit_id, CellCommand.CREATE2_ADDATA, rest[off : off + addata_capacity], seq=seq)
        )
    return cells


def reassemble(cells: list[Cell], expected_len: int | None = None) -> bytes:
    """Inverse of fragment. Fragment order comes from `seq`, or list order when
    cells were re-parsed from the wire (all seq zero). `expected_len` (from the
    handshake region) lets the receiver detect missing trailing fragments and
    trim wire padding."""
    if not cells:
        raise IncompleteError("no cells")
    if cells[0].command == CellCommand.CREATE2_ADDATA:
        raise IncompleteError("leading cell missing")
    for c in cells[1:]:
        if c.command != CellCommand.CREATE2_ADDATA:
            raise FormatError("continuation cells must be CREATE2_ADDATA")
    seqs = [c.seq for c in cells]
    if len(cells) > 1 and any(seqs[1:]):
        ordered = sorted(cells[1:], key=lambda c: c.seq)
        if [c.seq for c in ordered] != list(range(1, len(cells))):
            raise IncompleteError("fragment sequence has gaps")
        cells = [cells[0]] + ordered
    data = b"".join(c.payload for c in cells)
    if expected_len is not None:
        if len(data) < expected_len:
            raise IncompleteError(
                f"{len(data)} bytes assembled, {expected_len} advertised"
            )
        data = data[:expected_len]
    return data


def package_create(
    circuit_id: int,
    blob: bytes,
    first_command: CellCommand = CellCommand.CREATE2,
) -> list[Cell]:
    """Fragment a handshake blob and stamp the reserved region of the first cell
    with (total length, fragment count)."""
    cells = fragment(blob, CREATE2_CAPACITY, ADDATA_CAPACITY, circuit_id, first_command)
    head = _HANDSHAKE.pack(_HANDSHAKE_MAGIC, len(blob), len(cells), bytes(74))
    first = cells[0]
    cells[0] = Cell(circuit_id, first.command, head + first.payload, seq=0)
    return cells


def create_fragment_count(cells: list[Cell]) -> int:
    """Advertised fragment count from the first cell's handshake region."""
    first = cells[0]
    if len(first.payload) < HANDSHAKE_RESERVED:
        raise FormatError("first cell lacks the handshake region")
    magic, _total, count, _ = _HANDSHAKE.unpack_from(first.payload)
    if magic != _HANDSHAKE_MAGIC:
        raise FormatError("bad handshake region magic")
    return count


def unpack_create(cells: list[Cell]) -> bytes:
    """Inverse of package_create, verifying the advertised totals."""
    if not cells:
        raise IncompleteError("no cells")
    first = cells[0]
    if first.command == CellCommand.CREATE2_ADDATA:
        raise IncompleteError("leading cell missing")
    if len(first.payload) < HANDSHAKE_RESERVED:
        raise FormatError("first cell lacks the handshake region")
    magic, total, count, _ = _HANDSHAKE.unpack_from(first.payload)
    if magic != _HANDSHAKE_MAGIC:
        raise FormatError("bad handshake region magic")
    if len(cells) < count:
        raise IncompleteError(f"{len(cells)} cells received, {count} advertised")
    inner = [Cell(first.circuit_id, first.command, first.payload[HANDSHAKE_RESERVED:], seq=0)]
    inner.extend(cells[1:])
    return reassemble(inner, expected_len=total)
