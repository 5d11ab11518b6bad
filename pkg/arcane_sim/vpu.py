"""Vector processing unit model.

A VPU owns ``vregs_per_vpu`` consecutive cache lines and uses them as its
vector register file: vreg ``k`` of VPU ``i`` is the very same storage as
cache line ``i * vregs_per_vpu + k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from arcane_sim.cache import CacheController
from arcane_sim.dataclasses import Eew
from arcane_sim.errors import LineNotReserved, VlTooLarge, VpuError
from arcane_sim.logging_config import get_logger

logger = get_logger(__name__)


class MicroOpKind(StrEnum):
    VLOAD_IMM = "vload-imm"
    VADD = "vadd"
    VSUB = "vsub"
    VMUL = "vmul"
    VMACC = "vmacc"
    VMAX = "vmax"
    VSRA = "vsra"
    VSLIDE = "vslide"
    VREDMAX = "vredmax"
    VMERGE_GE0 = "vmerge-ge0"
    VCOPY = "vcopy"


@dataclass(slots=True, frozen=True)
class VectorMicroOp:
    """One vector instruction over the first ``vl`` elements.

    ``src2=None`` selects the scalar operand. For vslide a non-negative
    ``scalar`` slides down (``dst[i] = src1[scalar + i*stride]``) and a
    negative one slides up (``dst[-scalar + i] = src1[i]``).
    """

    kind: MicroOpKind
    dst: int
    src1: int | None = None
    src2: int | None = None
    scalar: int = 0
    vl: int = 0
    eew: Eew = Eew.W
    stride: int = 1


@dataclass(slots=True, frozen=True)
class MicroOpRecord:
    vpu: int
    op: VectorMicroOp
    cycles: int

    CSV_COLUMNS = ("vpu", "kind", "dst", "src1", "src2", "scalar", "vl", "eew", "stride", "cycles")

    def to_row(self) -> tuple:
        op = self.op
        src1 = "" if op.src1 is None else op.src1
        src2 = "" if op.src2 is None else op.src2
        return (self.vpu, op.kind, op.dst, src1, src2, op.scalar, op.vl, int(op.eew), op.stride, self.cycles)


def micro_op_cycles(vl: int, eew: Eew, lanes: int, issue: int = 3) -> int:
    """ISSUE + ceil(vl / (lanes x 32/eew)); each 32-bit lane packs sub-word elements."""
    return issue + math.ceil(vl / (lanes * (32 // int(eew))))


class Vpu:
    """Functional and timing model of one vector unit."""

    def __init__(self, vpu_id: int, cache: CacheController, lanes: int = 4, issue: int = 3, trace: bool = False):
        geometry = cache.geometry
        self.id = vpu_id
        self.lanes = lanes
        self.issue = issue
        self.cache = cache
        self.num_vregs = geometry.vregs_per_vpu
        self.first_line = vpu_id * geometry.vregs_per_vpu
        self.line_bytes = geometry.line_bytes
        self.vregs = cache.lines[self.first_line : self.first_line + self.num_vregs]
        self.trace_enabled = trace
        self.trace: list[MicroOpRecord] = []
        self.ops_executed = 0
        self.busy_cycles = 0

    def line(self, vreg: int) -> int:
        return self.first_line + vreg

    def view(self, vreg: int, eew: Eew) -> np.ndarray:
        """Typed, writable view over a vector register."""
        return self.vregs[vreg].view(eew.dtype)

    def elements_per_reg(self, eew: Eew) -> int:
        return self.line_bytes // eew.nbytes

    def dirty_line_count(self) -> int:
        return sum(1 for entry in self.cache.ct[self.first_line : self.first_line + self.num_vregs] if entry.dirty)

    def free_vregs(self) -> list[int]:
        """Registers not currently reserved by a kernel or resident matrix."""
        ct = self.cache.ct
        return [k for k in range(self.num_vregs) if not ct[self.first_line + k].busy_computing]

    def _check(self, op: VectorMicroOp) -> int:
        limit = self.elements_per_reg(op.eew)
        for reg in (op.dst, op.src1, op.src2):
            if reg is not None and not 0 <= reg < self.num_vregs:
                raise VpuError(f"Vector register {reg} out of range on VPU {self.id}")
        if op.vl < 0 or op.vl > limit:
            raise VlTooLarge(f"vl={op.vl} exceeds {limit} elements of {int(op.eew)} bits")
        if op.kind is MicroOpKind.VSLIDE:
            if op.scalar >= 0:
                last = op.scalar + (op.vl - 1) * op.stride if op.vl else 0
                if op.stride < 1 or last >= limit:
                    raise VlTooLarge(f"vslide reads element {last} past {limit}")
            elif -op.scalar + op.vl > limit:
                raise VlTooLarge(f"vslide writes past element {limit}")
        if not self.cache.ct[self.line(op.dst)].busy_computing:
            raise LineNotReserved(f"vreg {op.dst} of VPU {self.id} is not reserved for computing")
        return limit

    def _scalar(self, value: int, eew: Eew) -> np.ndarray:
        return np.array([value & ((1 << int(eew)) - 1)], dtype=eew.unsigned_dtype).view(eew.dtype)

    def exec_micro_op(self, op: VectorMicroOp) -> int:
        """Execute one micro-op and return its cycle cost.

        Raises:
            VlTooLarge: If vl (or a slide offset) leaves the register.
            LineNotReserved: If dst is not a kernel-reserved register.
        """
        self._check(op)
        vl, eew = op.vl, op.eew
        dst = self.view(op.dst, eew)
        a = self.view(op.src1, eew)[:vl] if op.src1 is not None else None
        b = self.view(op.src2, eew)[:vl] if op.src2 is not None else self._scalar(op.scalar, eew)
        kind = op.kind

        if kind is MicroOpKind.VLOAD_IMM:
            dst[:vl] = self._scalar(op.scalar, eew)
        elif kind is MicroOpKind.VADD:
            dst[:vl] = a + b
        elif kind is MicroOpKind.VSUB:
            dst[:vl] = a - b
        elif kind is MicroOpKind.VMUL:
            dst[:vl] = a * b
        elif kind is MicroOpKind.VMACC:
            dst[:vl] = dst[:vl] + a * b
        elif kind is MicroOpKind.VMAX:
            dst[:vl] = np.maximum(a, b)
        elif kind is MicroOpKind.VSRA:
            dst[:vl] = a >> min(max(op.scalar, 0), int(eew) - 1)
        elif kind is MicroOpKind.VSLIDE:
            src = self.view(op.src1, eew)
            if op.scalar >= 0:
                start = op.scalar
                dst[:vl] = src[start : start + (vl - 1) * op.stride + 1 : op.stride].copy()
            else:
                up = -op.scalar
                dst[up : up + vl] = src[:vl].copy()
        elif kind is MicroOpKind.VREDMAX:
            if vl:
                dst[0] = a.max()
        elif kind is MicroOpKind.VMERGE_GE0:
            dst[:vl] = np.where(a >= 0, a, b)
        elif kind is MicroOpKind.VCOPY:
            dst[:vl] = a.copy()
        else:  # pragma: no cover
            raise VpuError(f"Unsupported micro-op {kind}")

        self.cache.ct[self.line(op.dst)].dirty = True
        cycles = micro_op_cycles(vl, eew, self.lanes, self.issue)
        self.ops_executed += 1
        self.busy_cycles += cycles
        if self.trace_enabled:
            self.trace.append(MicroOpRecord(self.id, op, cycles))
        return cycles
