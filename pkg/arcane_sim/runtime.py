"""Cache runtime running on the embedded controller core.

Three cooperating parts:

* the Kernel Decoder (``on_offload``) binds ``xmr`` descriptors with
  register renaming and validates, registers and enqueues ``xmkN`` kernels;
* the Kernel Scheduler (``schedule_step``) pops the queue, picks a VPU and
  runs the kernel body, eliding the writeback when a queued kernel consumes
  the result;
* the Matrix Allocator (``allocate_matrix``/``writeback_matrix``) moves
  matrices between memory and vector registers with 2D DMA under the cache
  lock.

All work is expressed as generators yielding ``Slice`` objects. The
simulation loop resumes a generator once the slice's cycles have elapsed,
which is what lets decode interrupts and host accesses interleave with
kernels in simulated time.
"""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Callable, Generator, Iterator
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Protocol

from arcane_sim import isa
from arcane_sim.cache import AddressTableEntry, CacheController, OperandRole
from arcane_sim.config import SimConfig
from arcane_sim.dataclasses import DecodedOp, Eew, MatrixDescriptor, PhaseBreakdown
from arcane_sim.errors import (
    CapacityExceeded,
    DescriptorInvalid,
    EncodingError,
    NotResident,
    QueueFull,
    RuntimeFault,
    ShapeMismatch,
)
from arcane_sim.logging_config import get_logger
from arcane_sim.memory import Dma2dRequest, DmaDirection, DmaEngine
from arcane_sim.trace import EventLog
from arcane_sim.vpu import MicroOpKind, VectorMicroOp, Vpu

logger = get_logger(__name__)


class Phase(StrEnum):
    PREAMBLE = "preamble"
    ALLOCATION = "allocation"
    COMPUTE = "compute"
    WRITEBACK = "writeback"


@dataclass(slots=True, frozen=True)
class Slice:
    """A stretch of eCPU time charged to one accounting phase."""

    cycles: int
    phase: Phase


Work = Generator[Slice, None, int]


class OffloadOutcome(StrEnum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    STALLED = "stalled"


def run_slices(work: Generator[Slice, None, int | None], runtime: CacheRuntime | None = None) -> int:
    """Drive a work generator to completion outside the simulation loop.

    Advances ``runtime.now`` as slices elapse and returns the total cycles.
    """
    total = 0
    for piece in work:
        total += piece.cycles
        if runtime is not None:
            runtime.phases.add(piece.phase, piece.cycles)
            runtime.now += piece.cycles
    return total


def rows_per_vreg(row_bytes: int, line_bytes: int) -> int:
    """Whole matrix rows that fit in one vector register.

    Raises:
        CapacityExceeded: If a single row is wider than a register.
    """
    rows = line_bytes // row_bytes
    if rows == 0:
        raise CapacityExceeded(f"A {row_bytes}-byte row does not fit in a {line_bytes}-byte vector register")
    return rows


def vregs_for(rows: int, row_bytes: int, line_bytes: int) -> int:
    return math.ceil(rows / rows_per_vreg(row_bytes, line_bytes)) if rows > 0 else 0


# --- matrix registers -------------------------------------------------------


@dataclass(slots=True, frozen=True)
class MatrixLayout:
    first_row: int
    rows: int
    vregs: list[int]


@dataclass(slots=True)
class Residency:
    """Rows [first_row, first_row + rows) of a matrix held in ``vregs`` of one VPU."""

    vpu_id: int
    vregs: list[int]
    first_row: int
    rows: int
    rows_per_vreg: int

    def covers(self, first_row: int, rows: int) -> bool:
        return self.first_row <= first_row and first_row + rows <= self.first_row + self.rows

    def locate(self, row: int) -> tuple[int, int]:
        """(vreg, row slot inside the vreg) holding ``row``."""
        k = row - self.first_row
        if not 0 <= k < self.rows:
            raise NotResident(f"Row {row} is not resident (window starts at {self.first_row}, {self.rows} rows)")
        return self.vregs[k // self.rows_per_vreg], k % self.rows_per_vreg


@dataclass(slots=True, eq=False)
class PhysicalMatrix:
    """A renamed matrix binding; kernels capture these, not logical registers."""

    name: int
    descriptor: MatrixDescriptor
    resident: Residency | None = None
    pending_writeback: bool = False
    dest_slots: list[int] = field(default_factory=list)

    def __repr__(self) -> str:
        return f"p{self.name}@{self.descriptor.base:#x}"


@dataclass(slots=True)
class MatrixRegister:
    index: int
    physical: PhysicalMatrix | None = None

    @property
    def bound(self) -> bool:
        return self.physical is not None

    @property
    def descriptor(self) -> MatrixDescriptor | None:
        return self.physical.descriptor if self.physical else None


class MatrixMap:
    """Logical matrix registers m0..mN mapped to physical bindings."""

    def __init__(self, size: int = 16):
        self.registers = [MatrixRegister(i) for i in range(size)]
        self._next_name = 0

    def __len__(self) -> int:
        return len(self.registers)

    def _fresh(self, desc: MatrixDescriptor) -> PhysicalMatrix:
        physical = PhysicalMatrix(self._next_name, desc)
        self._next_name += 1
        return physical

    def bind(self, index: int, desc: MatrixDescriptor, in_use: set[PhysicalMatrix]) -> tuple[PhysicalMatrix, bool]:
        """Bind ``desc`` to register ``index``.

        The previous binding keeps living under its own physical name when a
        pending kernel or a resident result still refers to it.

        Returns:
            The new physical binding and whether a rename happened.
        """
        register = self.registers[index]
        previous = register.physical
        renamed = previous is not None and previous in in_use
        if previous is None or renamed:
            register.physical = self._fresh(desc)
        else:
            register.physical = PhysicalMatrix(previous.name, desc)
        return register.physical, renamed

    def lookup(self, index: int) -> PhysicalMatrix | None:
        if not 0 <= index < len(self.registers):
            return None
        return self.registers[index].physical


# --- kernels ----------------------------------------------------------------


class KernelBody(Protocol):
    """What the scheduler needs from a library kernel."""

    name: str
    sources: tuple[str, ...]

    def check(self, request: KernelRequest) -> None: ...

    def output_rows(self, request: KernelRequest) -> int: ...

    def footprint(
        self, request: KernelRequest, band: int, line_bytes: int, resident: set[str]
    ) -> list[tuple[str, int]]: ...

    def run(self, ctx: KernelContext) -> Iterator[Slice]: ...


@dataclass(slots=True, eq=False)
class KernelRequest:
    """A decoded, accepted ``xmkN`` waiting in (or popped from) the queue."""

    seq: int
    func5: int
    eew: Eew
    halves: tuple[int, ...]
    kernel: KernelBody
    registers: dict[str, int] = field(default_factory=dict)
    operands: dict[str, PhysicalMatrix] = field(default_factory=dict)
    issue_cycle: int = 0
    source_slots: list[int] = field(default_factory=list)
    dest_slot: int | None = None

    @property
    def alpha(self) -> int:
        return isa.signed_half(self.halves[0])

    @property
    def beta(self) -> int:
        return isa.signed_half(self.halves[1])

    @property
    def stride(self) -> int:
        return self.halves[0]

    @property
    def win_size(self) -> int:
        return self.halves[1]

    def desc(self, role: str) -> MatrixDescriptor:
        return self.operands[role].descriptor

    def source_physicals(self) -> set[PhysicalMatrix]:
        return {self.operands[role] for role in self.kernel.sources}

    @property
    def dest(self) -> PhysicalMatrix:
        return self.operands["md"]

    def __repr__(self) -> str:
        regs = ", ".join(f"{role}=m{idx}" for role, idx in self.registers.items())
        return f"xmk{self.func5}.{self.eew.suffix}#{self.seq}({regs})"


class KernelQueue:
    """Statically sized FIFO of accepted kernels."""

    def __init__(self, depth: int = 8):
        self.depth = depth
        self._items: deque[KernelRequest] = deque()

    def push(self, request: KernelRequest) -> None:
        if self.full:
            raise QueueFull(f"Kernel queue is full ({self.depth} entries)")
        self._items.append(request)

    def pop(self) -> KernelRequest:
        return self._items.popleft()

    @property
    def full(self) -> bool:
        return len(self._items) >= self.depth

    def __len__(self) -> int:
        return len(self._items)

    def __bool__(self) -> bool:
        return bool(self._items)

    def __iter__(self) -> Iterator[KernelRequest]:
        return iter(self._items)


class KernelLibrary:
    """func5-indexed kernel table; lookup is a list index."""

    def __init__(self):
        self._slots: list[KernelBody | None] = [None] * (isa.MAX_KERNEL_ID + 1)

    def register(self, func5: int, kernel: KernelBody) -> None:
        if not 0 <= func5 <= isa.MAX_KERNEL_ID:
            raise ValueError(f"Kernel id {func5} outside 0..{isa.MAX_KERNEL_ID}")
        self._slots[func5] = kernel
        logger.debug(f"Registered kernel {kernel.name} as xmk{func5}")

    def lookup(self, func5: int) -> KernelBody | None:
        return self._slots[func5] if 0 <= func5 < len(self._slots) else None

    def registered(self) -> dict[int, str]:
        return {i: k.name for i, k in enumerate(self._slots) if k is not None}


# --- kernel execution context ----------------------------------------------


class KernelContext:
    """Per-kernel view handed to kernel bodies: register groups, windows and micro-op issue."""

    def __init__(
        self,
        runtime: CacheRuntime,
        request: KernelRequest,
        vpu: Vpu,
        band_rows: int,
        groups: dict[str, list[int]],
        pre_resident: dict[str, Residency],
    ):
        self.runtime = runtime
        self.request = request
        self.vpu = vpu
        self.band_rows = band_rows
        self.out_rows = request.kernel.output_rows(request)
        self.groups = groups
        self.pre_resident = pre_resident
        self.windows: dict[str, Residency] = dict(pre_resident)
        self.dest_window: Residency | None = None
        self.eew = request.eew
        self.line_bytes = vpu.line_bytes
        self._sources_released = False

    @property
    def tiled(self) -> bool:
        return self.band_rows < self.out_rows

    def desc(self, role: str) -> MatrixDescriptor:
        return self.request.desc(role)

    def group(self, name: str) -> list[int]:
        return self.groups[name]

    def reg(self, name: str) -> int:
        return self.groups[name][0]

    def load(self, role: str, first_row: int, rows: int, group: str | None = None) -> Work:
        """Bring rows of a source operand into its register group (no-op if already resident)."""
        if role in self.pre_resident:
            return 0
        physical = self.request.operands[role]
        layout = MatrixLayout(first_row, rows, self.group(group or role))
        cycles = yield from self.runtime.allocate_matrix(physical, self.vpu, layout)
        self.windows[role] = physical.resident
        return cycles

    def locate(self, role: str, row: int) -> tuple[int, int]:
        """(vreg, element offset) of the first element of ``row`` of a source operand."""
        vreg, slot = self.windows[role].locate(row)
        return vreg, slot * self.desc(role).cols

    def element(self, role: str, row: int, col: int) -> int:
        vreg, offset = self.locate(role, row)
        return int(self.vpu.view(vreg, self.eew)[offset + col])

    def vop(
        self,
        kind: MicroOpKind,
        dst: int,
        src1: int | None = None,
        src2: int | None = None,
        scalar: int = 0,
        vl: int = 0,
        stride: int = 1,
    ) -> Slice:
        op = VectorMicroOp(kind, dst, src1, src2, scalar, vl, self.eew, stride)
        return Slice(self.vpu.exec_micro_op(op), Phase.COMPUTE)

    def tap(self, acc: int, role: str, row: int, col: int, weight: int, vl: int) -> Iterator[Slice]:
        """acc[:vl] += weight * row[col : col + vl], as slide, broadcast, multiply, add."""
        scratch, weight_reg = self.reg("tap"), self.reg("wt")
        vreg, offset = self.locate(role, row)
        yield self.vop(MicroOpKind.VSLIDE, scratch, vreg, scalar=offset + col, vl=vl)
        yield self.vop(MicroOpKind.VLOAD_IMM, weight_reg, scalar=weight, vl=vl)
        yield self.vop(MicroOpKind.VMUL, scratch, scratch, weight_reg, vl=vl)
        yield self.vop(MicroOpKind.VADD, acc, acc, scratch, vl=vl)

    def begin_band(self, first_row: int, rows: int) -> None:
        out = self.desc("md")
        rpv = rows_per_vreg(out.row_bytes, self.line_bytes)
        if not self.tiled:
            first_row, rows = 0, self.out_rows
        self.dest_window = Residency(self.vpu.id, self.group("md"), first_row, rows, rpv)

    def put_row(self, row: int, src: int, vl: int) -> Slice:
        """Store an output row from ``src`` into its slot of the destination group."""
        vreg, slot = self.dest_window.locate(row)
        return self.vop(MicroOpKind.VSLIDE, vreg, src, scalar=-slot * self.desc("md").cols, vl=vl)

    def end_band(self) -> Work:
        """Write a finished band back when the kernel is tiled."""
        if not self.tiled:
            return 0
        dest = self.request.dest
        dest.resident = self.dest_window
        cycles = yield from self.runtime.writeback_matrix(dest, self.vpu, release_lines=False)
        dest.resident = None
        return cycles

    def release_sources(self) -> None:
        """Lift the WAR blocks on the sources once every source window has been loaded."""
        if not self._sources_released:
            self._sources_released = True
            self.runtime.release_slots(self.request.source_slots)


# --- the runtime actor ------------------------------------------------------


@dataclass(slots=True)
class PendingOffload:
    """An instruction latched by the bridge, delivered to the eCPU as an interrupt."""

    word: int
    regs: tuple[int, int, int]
    arrives_at: int
    report: Callable[[OffloadOutcome, int, str], None]


class CacheRuntime:
    """The eCPU software stack, stepped by the simulation loop."""

    def __init__(
        self,
        config: SimConfig,
        cache: CacheController,
        dma: DmaEngine,
        vpus: list[Vpu],
        library: KernelLibrary,
        events: EventLog | None = None,
    ):
        self.config = config
        self.cache = cache
        self.dma = dma
        self.vpus = vpus
        self.library = library
        self.events = events if events is not None else EventLog()
        self.line_bytes = cache.line_bytes

        self.matrix_map = MatrixMap(config.matrix_registers)
        self.queue = KernelQueue(config.queue_depth)
        self.phases = PhaseBreakdown()
        self.idle_cycles = 0
        self.completed = 0
        self.last_reason = ""

        self.now = 0
        self.ready_at: int | None = None
        self.busy_until = 0
        self._sleep_since: int | None = 0
        self._interrupt: PendingOffload | None = None
        self._stalled: PendingOffload | None = None
        self._stalled_op: DecodedOp | None = None
        self._handler: Generator[Slice, None, None] | None = None
        self._active: Generator[Slice, None, None] | None = None
        self.running: KernelRequest | None = None
        self.residents: list[PhysicalMatrix] = []
        self._seq = 0

    # --- decoder -----------------------------------------------------------

    def _reject(self, reason: str) -> OffloadOutcome:
        self.last_reason = reason
        logger.warning(f"Offload rejected: {reason}", extra={"cycle": self.now})
        return OffloadOutcome.REJECTED

    def referenced(self) -> set[PhysicalMatrix]:
        """Physical matrices still needed by queued, running or resident work."""
        in_use = set(self.residents)
        for request in self.queue:
            in_use.update(request.operands.values())
        if self.running is not None:
            in_use.update(self.running.operands.values())
        return in_use

    def on_offload(self, op: DecodedOp) -> OffloadOutcome:
        """Software decode of one offloaded instruction.

        ``xmr`` only records the binding: no data moves until a kernel needs
        it. ``xmkN`` is validated by its library entry, its operand regions
        are registered busy in the AT and it is queued. When the queue or the
        AT has no room the outcome is STALLED and nothing changes.
        """
        self.last_reason = ""
        if op.is_xmr:
            md, desc = isa.xmr_descriptor(op)
            if md >= len(self.matrix_map):
                return self._reject(f"matrix register m{md} does not exist")
            try:
                desc.validate()
            except DescriptorInvalid as e:
                return self._reject(str(e))
            physical, renamed = self.matrix_map.bind(md, desc, self.referenced())
            if renamed:
                self.events.record(self.now, "runtime", "rename", f"m{md} -> p{physical.name}")
            self.events.record(self.now, "runtime", "xmr", f"m{md}={physical!r} {desc.rows}x{desc.cols}")
            return OffloadOutcome.ACCEPTED

        kernel = self.library.lookup(op.func5)
        if kernel is None:
            return self._reject(f"no kernel registered for func5={op.func5}")

        roles = (*kernel.sources, "md")
        request = KernelRequest(self._seq, op.func5, op.eew, op.halves, kernel, issue_cycle=self.now)
        for role in roles:
            index = op.halves[isa.HALF_SLOTS[role]]
            physical = self.matrix_map.lookup(index)
            if physical is None:
                return self._reject(f"{role}=m{index} is not bound")
            request.registers[role] = index
            request.operands[role] = physical
        try:
            kernel.check(request)
        except ShapeMismatch as e:
            return self._reject(f"{kernel.name}: {e}")

        if len(roles) > self.cache.at.capacity:
            return self._reject(f"{kernel.name} needs {len(roles)} Address Table slots")
        if self.queue.full or self.cache.at.free_slots < len(roles):
            return OffloadOutcome.STALLED

        for role in kernel.sources:
            desc = request.desc(role)
            entry = AddressTableEntry(desc.base, desc.end, OperandRole.SOURCE, owner=f"#{self._seq}:{role}")
            request.source_slots.append(self.cache.at_register(entry))
        dest = request.desc("md")
        entry = AddressTableEntry(dest.base, dest.end, OperandRole.DESTINATION, owner=f"#{self._seq}:md")
        request.dest_slot = self.cache.at_register(entry)
        self.queue.push(request)
        self._seq += 1
        self.events.record(self.now, "runtime", "enqueue", f"{request!r} depth={len(self.queue)}")
        return OffloadOutcome.ACCEPTED

    def raise_interrupt(self, offload: PendingOffload) -> None:
        self._interrupt = offload
        if self.ready_at is None or self.ready_at > offload.arrives_at and self._is_sleeping():
            self.ready_at = offload.arrives_at

    def _is_sleeping(self) -> bool:
        return self._sleep_since is not None

    def _decode(self, offload: PendingOffload) -> Generator[Slice, None, None]:
        try:
            op = isa.decode(offload.word, *offload.regs)
        except EncodingError as e:
            op = None
            outcome = self._reject(str(e))
        else:
            outcome = self.on_offload(op)
        done = self.now + self.config.decode_cycles
        if outcome is OffloadOutcome.STALLED:
            self._stalled, self._stalled_op = offload, op
            self.events.record(self.now, "runtime", "offload-stalled")
        else:
            offload.report(outcome, done, self.last_reason)
        yield Slice(self.config.decode_cycles, Phase.PREAMBLE)

    def _retry_stalled(self) -> None:
        if self._stalled is None:
            return
        outcome = self.on_offload(self._stalled_op)
        if outcome is not OffloadOutcome.STALLED:
            self._stalled.report(outcome, self.now, self.last_reason)
            self._stalled = self._stalled_op = None

    # --- scheduler ---------------------------------------------------------

    def select_vpu(self, request: KernelRequest | None = None) -> Vpu:
        """VPU holding a resident source, else the one with the fewest dirty lines (lowest id on ties)."""
        if request is not None:
            for physical in request.source_physicals():
                if physical.resident is not None:
                    return self.vpus[physical.resident.vpu_id]
        return min(self.vpus, key=lambda vpu: (vpu.dirty_line_count(), vpu.id))

    def schedule_step(self) -> bool:
        """Start the queue head if no kernel is running."""
        if self._active is not None or not self.queue:
            return False
        request = self.queue.pop()
        self.running = request
        self._active = self._execute(request)
        self._retry_stalled()
        return True

    def _execute(self, request: KernelRequest) -> Generator[Slice, None, None]:
        kernel = request.kernel
        self.events.record(self.now, "runtime", "kernel-start", repr(request))
        yield from self._settle_overlaps(request)

        vpu = self.select_vpu(request)
        for physical in request.source_physicals():
            if physical.resident is not None and physical.resident.vpu_id != vpu.id:
                if physical.pending_writeback:
                    yield from self.writeback_matrix(physical, self.vpus[physical.resident.vpu_id])
                self._drop_resident(physical)
        pre_resident = {
            role: request.operands[role].resident
            for role in kernel.sources
            if request.operands[role].resident is not None
        }
        band, groups = self._plan(request, vpu, set(pre_resident))
        lines = [vpu.line(v) for group in groups.values() for v in group]
        if lines:
            yield from self._locked(lambda: self.cache.claim_lines(lines), Phase.ALLOCATION)

        ctx = KernelContext(self, request, vpu, band, groups, pre_resident)
        self.events.record(self.now, "runtime", "kernel-body", f"vpu={vpu.id} band={band}/{ctx.out_rows}")
        yield from kernel.run(ctx)
        ctx.release_sources()
        self._finish(request, ctx)
        yield from self.retire_residents()
        self.events.record(self.now, "runtime", "kernel-done", repr(request))

    def _plan(self, request: KernelRequest, vpu: Vpu, resident: set[str]) -> tuple[int, dict[str, list[int]]]:
        """Largest output band whose register groups fit the VPU's free registers."""
        kernel = request.kernel
        out_rows = kernel.output_rows(request)
        free = vpu.free_vregs()
        for band in range(out_rows, 0, -1):
            groups = _fit_groups(kernel.footprint(request, band, self.line_bytes, resident), free)
            if groups is None:
                continue
            if band < out_rows and any(
                request.desc(role).overlaps(request.desc("md")) for role in kernel.sources if role not in resident
            ):
                break
            return band, groups
        raise CapacityExceeded(f"{request!r} does not fit in the {len(free)} free registers of VPU {vpu.id}")

    def _settle_overlaps(self, request: KernelRequest) -> Iterator[Slice]:
        """Write back resident results whose memory this kernel reads; drop those it overwrites."""
        sources = request.source_physicals()
        md = request.desc("md")
        regions = [request.desc(role) for role in request.kernel.sources]
        for physical in list(self.residents):
            vpu = self.vpus[physical.resident.vpu_id]
            overwritten = physical.descriptor.overlaps(md)
            if physical in sources:
                # a resident source stays in place; memory must be current before md lands on it or an alias loads it
                aliased = any(
                    request.operands[role] is not physical and physical.descriptor.overlaps(request.desc(role))
                    for role in request.kernel.sources
                )
                clobbered = overwritten and physical is not request.dest
                if physical.pending_writeback and (aliased or clobbered):
                    yield from self.writeback_matrix(physical, vpu, release_lines=False)
                continue
            if not overwritten and not any(physical.descriptor.overlaps(region) for region in regions):
                continue
            if physical.pending_writeback:
                yield from self.writeback_matrix(physical, vpu, release_lines=overwritten)
            if overwritten:
                self._drop_resident(physical)

    def _finish(self, request: KernelRequest, ctx: KernelContext) -> None:
        dest = request.dest
        for name, group in ctx.groups.items():
            if name != "md" or ctx.tiled:
                self.cache.release_lines([ctx.vpu.line(v) for v in group])
        for role in request.kernel.sources:
            physical = request.operands[role]
            if role not in ctx.pre_resident and physical is not dest:
                physical.resident = None

        stale = [window for role, window in ctx.pre_resident.items() if request.operands[role] is dest]
        if stale:
            # in-place update of a resident result: the new value supersedes it
            self.cache.release_lines([ctx.vpu.line(v) for v in stale[0].vregs])
            self._drop_resident(dest, release=False)

        for physical in list(self.residents):
            if physical is not dest and physical.descriptor.overlaps(dest.descriptor):
                self._drop_resident(physical)

        if ctx.tiled:
            self.release_slots([request.dest_slot])
        else:
            dest.resident = ctx.dest_window
            dest.pending_writeback = True
            dest.dest_slots.append(request.dest_slot)
            self.residents.append(dest)
        request.dest_slot = None
        self.completed += 1
        self.running = None

    def retire_residents(self) -> Iterator[Slice]:
        """Write back and free resident results no queued kernel consumes."""
        needed = set()
        for request in self.queue:
            needed.update(request.source_physicals())
        for physical in list(self.residents):
            if physical in needed:
                self.events.record(self.now, "runtime", "writeback-elided", repr(physical))
                continue
            vpu = self.vpus[physical.resident.vpu_id]
            if physical.pending_writeback:
                yield from self.writeback_matrix(physical, vpu)
            self._drop_resident(physical)

    def _drop_resident(self, physical: PhysicalMatrix, release: bool = True) -> None:
        if physical.resident is not None and release:
            vpu = self.vpus[physical.resident.vpu_id]
            self.cache.release_lines([vpu.line(v) for v in physical.resident.vregs])
        physical.resident = None
        self.release_slots(physical.dest_slots)
        physical.pending_writeback = False
        if physical in self.residents:
            self.residents.remove(physical)

    def release_slots(self, slots: list[int | None]) -> None:
        for slot in slots:
            if slot is not None:
                self.cache.at_release(slot)
        slots.clear()

    # --- allocator ---------------------------------------------------------

    def _locked(self, action: Callable[[], int], phase: Phase) -> Generator[Slice, None, int]:
        """Take the cache lock (waiting out host accesses), run ``action``, then release."""
        waited = 0
        while not self.cache.acquire_lock(self.now):
            wait = max(1, self.cache.host_busy_until - self.now)
            yield Slice(wait, phase)
            waited += wait
        try:
            cycles = action()
        except BaseException:
            self.cache.release_lock(self.now)
            raise
        if cycles:
            yield Slice(cycles, phase)
        self.cache.release_lock(self.now)
        return waited + cycles

    def allocate_matrix(
        self, matrix: PhysicalMatrix, vpu: Vpu, layout: MatrixLayout | None = None
    ) -> Generator[Slice, None, int]:
        """Load a matrix (or a row window of it) into consecutive vector registers.

        Without a layout the whole matrix is loaded into the first free run
        of registers large enough, which are claimed here.

        Returns:
            Cycles spent, lock wait included.

        Raises:
            CapacityExceeded: If the rows need more registers than available.
        """
        desc = matrix.descriptor
        rpv = rows_per_vreg(desc.row_bytes, self.line_bytes)
        first_row, rows = (layout.first_row, layout.rows) if layout else (0, desc.rows)
        needed = math.ceil(rows / rpv)
        vregs = layout.vregs[:needed] if layout else _first_run(vpu.free_vregs(), needed)
        if vregs is None or len(vregs) < needed:
            raise CapacityExceeded(f"{matrix!r} needs {needed} vector registers on VPU {vpu.id}")

        def transfer() -> int:
            cycles = 0 if layout else self.cache.claim_lines([vpu.line(v) for v in vregs])
            request = Dma2dRequest(
                src_base=desc.row_address(first_row),
                dst_base=vpu.line(vregs[0]) * self.line_bytes,
                rows=rows,
                row_bytes=desc.row_bytes,
                src_stride_bytes=desc.stride_bytes,
                dst_stride_bytes=desc.row_bytes,
                direction=DmaDirection.MEM_TO_VPU,
                rows_per_line=rpv,
            )
            return cycles + self.dma.execute(request)

        cycles = yield from self._locked(transfer, Phase.ALLOCATION)
        matrix.resident = Residency(vpu.id, list(vregs), first_row, rows, rpv)
        return cycles

    def writeback_matrix(
        self, matrix: PhysicalMatrix, vpu: Vpu, release_lines: bool = True
    ) -> Generator[Slice, None, int]:
        """Copy the resident rows of a matrix back to memory with fetch-on-write.

        Releasing frees the registers and lifts the matrix's destination
        blocks in the AT; a matrix that stays resident keeps them, so the
        host cannot change memory under a register copy.

        Raises:
            NotResident: If the matrix has no resident rows.
        """
        window = matrix.resident
        if window is None:
            raise NotResident(f"{matrix!r} is not resident")
        desc = matrix.descriptor
        request = Dma2dRequest(
            src_base=vpu.line(window.vregs[0]) * self.line_bytes,
            dst_base=desc.row_address(window.first_row),
            rows=window.rows,
            row_bytes=desc.row_bytes,
            src_stride_bytes=desc.row_bytes,
            dst_stride_bytes=desc.stride_bytes,
            direction=DmaDirection.VPU_TO_MEM,
            rows_per_line=window.rows_per_vreg,
        )

        def transfer() -> int:
            cycles = self.dma.execute(request)
            if release_lines:
                self.cache.release_lines([vpu.line(v) for v in window.vregs])
            return cycles

        cycles = yield from self._locked(transfer, Phase.WRITEBACK)
        if release_lines:
            matrix.resident = None
        if window.covers(0, desc.rows):
            matrix.pending_writeback = False
            if release_lines:
                self.release_slots(matrix.dest_slots)
        self.events.record(self.now, "runtime", "writeback", f"{matrix!r} rows={window.rows} cycles={cycles}")
        return cycles

    # --- actor -------------------------------------------------------------

    def drained(self) -> bool:
        return not (
            self._handler or self._interrupt or self._stalled or self._active or self.queue or self.residents
        )

    def _next_work(self) -> Generator[Slice, None, None] | None:
        if self._handler is not None:
            return self._handler
        if self._interrupt is not None and self._interrupt.arrives_at <= self.now:
            self._handler = self._decode(self._interrupt)
            self._interrupt = None
            return self._handler
        if self._active is not None:
            return self._active
        if self.schedule_step():
            return self._active
        return None

    def step(self, now: int) -> None:
        """Advance to the end of the next slice of eCPU work, or go to sleep."""
        self.now = now
        if self._sleep_since is not None:
            self.idle_cycles += now - self._sleep_since
            self._sleep_since = None
        self._retry_stalled()
        while True:
            work = self._next_work()
            if work is None:
                if self._stalled is not None:
                    self._retry_stalled()
                    if self._stalled is None:
                        continue
                self._sleep_since = now
                self.ready_at = self._interrupt.arrives_at if self._interrupt is not None else None
                return
            try:
                piece = next(work)
            except StopIteration:
                if work is self._handler:
                    self._handler = None
                else:
                    self._active = None
                    self._retry_stalled()
                continue
            except RuntimeFault:
                logger.error(f"Kernel failed: {self.running!r}", extra={"cycle": now})
                raise
            if piece.cycles <= 0:
                continue
            self.phases.add(piece.phase, piece.cycles)
            self.ready_at = now + piece.cycles
            self.busy_until = self.ready_at
            return

    def finalize(self, end: int) -> None:
        """Account idle time up to the end of the run."""
        if self._sleep_since is not None and end > self._sleep_since:
            self.idle_cycles += end - self._sleep_since
            self._sleep_since = end


def _first_run(free: list[int], count: int) -> list[int] | None:
    """First run of ``count`` consecutive register indices in a sorted free list."""
    if count == 0:
        return []
    run: list[int] = []
    for vreg in free:
        run = run + [vreg] if run and vreg == run[-1] + 1 else [vreg]
        if len(run) == count:
            return run
    return None


def _fit_groups(groups: list[tuple[str, int]], free: list[int]) -> dict[str, list[int]] | None:
    """Place each group on a contiguous run of free registers, first fit, in order."""
    available = list(free)
    placed: dict[str, list[int]] = {}
    for name, count in groups:
        run = _first_run(available, count)
        if run is None:
            return None
        placed[name] = run
        taken = set(run)
        available = [v for v in available if v not in taken]
    return placed
