from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from arcane_sim.errors import DescriptorInvalid, InvalidEew

ADDRESS_SPACE = 1 << 32


class Eew(IntEnum):
    """Effective element width in bits (the .w/.h/.b instruction suffixes)."""

    W = 32
    H = 16
    B = 8

    @property
    def code(self) -> int:
        return _EEW_CODES[self]

    @property
    def suffix(self) -> str:
        return self.name.lower()

    @property
    def nbytes(self) -> int:
        return self.value // 8

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(f"<i{self.nbytes}")

    @property
    def unsigned_dtype(self) -> np.dtype:
        return np.dtype(f"<u{self.nbytes}")

    @classmethod
    def from_code(cls, code: int) -> Eew:
        for eew, value in _EEW_CODES.items():
            if value == code:
                return eew
        raise InvalidEew(f"Reserved element width code {code:#04b}")

    @classmethod
    def parse(cls, text: str | int) -> Eew:
        """Accept a suffix (w/h/b) or a bit width (32/16/8)."""
        if isinstance(text, int) or str(text).strip().isdigit():
            try:
                return cls(int(text))
            except ValueError:
                raise InvalidEew(f"Unsupported element width: {text}") from None
        try:
            return cls[str(text).strip().upper()]
        except KeyError:
            raise InvalidEew(f"Unsupported element width suffix: {text!r}") from None


_EEW_CODES = {Eew.W: 0b00, Eew.H: 0b01, Eew.B: 0b10}


@dataclass(slots=True, frozen=True)
class MatrixDescriptor:
    """Memory placement and shape of a matrix, as bound by ``xmr``.

    ``stride`` counts elements between row starts.
    """

    base: int
    stride: int
    rows: int
    cols: int
    eew: Eew = Eew.W

    @property
    def elem_bytes(self) -> int:
        return self.eew.nbytes

    @property
    def row_bytes(self) -> int:
        return self.cols * self.elem_bytes

    @property
    def stride_bytes(self) -> int:
        return self.stride * self.elem_bytes

    @property
    def extent_bytes(self) -> int:
        return ((self.rows - 1) * self.stride + self.cols) * self.elem_bytes

    @property
    def end(self) -> int:
        """Inclusive address of the last byte."""
        return self.base + self.extent_bytes - 1

    def row_address(self, row: int) -> int:
        return self.base + row * self.stride_bytes

    def validate(self) -> MatrixDescriptor:
        """Raise DescriptorInvalid unless rows, cols, stride and extent are consistent."""
        if self.rows < 1 or self.cols < 1:
            raise DescriptorInvalid(f"Matrix must be at least 1x1, got {self.rows}x{self.cols}")
        if self.stride < self.cols:
            raise DescriptorInvalid(f"Stride {self.stride} is smaller than cols {self.cols}")
        if self.base < 0 or self.base + self.extent_bytes > ADDRESS_SPACE:
            raise DescriptorInvalid(f"Matrix at {self.base:#x} wraps the 32-bit address space")
        return self

    def overlaps(self, other: MatrixDescriptor) -> bool:
        return self.base <= other.end and other.base <= self.end

    @classmethod
    def from_dict(cls, data: dict) -> MatrixDescriptor:
        return cls(
            base=int(data["base"]),
            stride=int(data["stride"]),
            rows=int(data["rows"]),
            cols=int(data["cols"]),
            eew=Eew.parse(data.get("eew", 32)),
        )

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "stride": self.stride,
            "rows": self.rows,
            "cols": self.cols,
            "eew": int(self.eew),
        }


@dataclass(slots=True, frozen=True)
class DecodedOp:
    """Fields sampled from an offloaded xmnmc instruction and its register operands."""

    func5: int
    eew: Eew
    rs1_val: int = 0
    rs2_val: int = 0
    rs3_val: int = 0
    rs1_idx: int = 0
    rs2_idx: int = 0
    rs3_idx: int = 0

    @property
    def is_xmr(self) -> bool:
        return self.func5 == 31

    @property
    def rs1_hi(self) -> int:
        return self.rs1_val >> 16

    @property
    def rs1_lo(self) -> int:
        return self.rs1_val & 0xFFFF

    @property
    def rs2_hi(self) -> int:
        return self.rs2_val >> 16

    @property
    def rs2_lo(self) -> int:
        return self.rs2_val & 0xFFFF

    @property
    def rs3_hi(self) -> int:
        return self.rs3_val >> 16

    @property
    def rs3_lo(self) -> int:
        return self.rs3_val & 0xFFFF

    @property
    def halves(self) -> tuple[int, int, int, int, int, int]:
        """(hi(rs1), lo(rs1), hi(rs2), lo(rs2), hi(rs3), lo(rs3))"""
        return (self.rs1_hi, self.rs1_lo, self.rs2_hi, self.rs2_lo, self.rs3_hi, self.rs3_lo)


PHASES = ("preamble", "allocation", "compute", "writeback")


@dataclass(slots=True)
class PhaseBreakdown:
    """Cycles spent in each accounting phase of offloaded work."""

    preamble: int = 0
    allocation: int = 0
    compute: int = 0
    writeback: int = 0

    def add(self, phase: str, cycles: int) -> None:
        setattr(self, phase, getattr(self, phase) + cycles)

    @property
    def total(self) -> int:
        return self.preamble + self.allocation + self.compute + self.writeback

    def fractions(self) -> dict[str, float]:
        """Per-phase share of the phase total; all zeros when nothing ran."""
        total = self.total
        if total == 0:
            return dict.fromkeys(PHASES, 0.0)
        return {phase: getattr(self, phase) / total for phase in PHASES}

    def to_dict(self) -> dict:
        return {phase: getattr(self, phase) for phase in PHASES}


@dataclass(slots=True)
class ExecutionReport:
    """Outcome of one host program run."""

    workload: str
    config: str
    total_cycles: int = 0
    phases: PhaseBreakdown = field(default_factory=PhaseBreakdown)
    host_stall: int = 0
    ecpu_idle: int = 0
    offload_wait: int = 0
    barrier_wait: int = 0
    kernels: int = 0
    loads: list[tuple[int, int, int]] = field(default_factory=list)

    CSV_COLUMNS = (
        "workload",
        "config",
        "total_cycles",
        "preamble",
        "allocation",
        "compute",
        "writeback",
        "host_stall",
        "ecpu_idle",
    )

    @property
    def preamble(self) -> int:
        return self.phases.preamble

    @property
    def allocation(self) -> int:
        return self.phases.allocation

    @property
    def compute(self) -> int:
        return self.phases.compute

    @property
    def writeback(self) -> int:
        return self.phases.writeback

    def to_row(self) -> tuple:
        """Values in CSV_COLUMNS order."""
        return tuple(getattr(self, column) for column in self.CSV_COLUMNS)

    def to_dict(self) -> dict:
        return dict(zip(self.CSV_COLUMNS, self.to_row(), strict=True))
