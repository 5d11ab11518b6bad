"""Host core model: program events, the offload bridge and analytic baselines.

The host executes a flat list of events. Loads and stores go through the
cache controller and stall on hazards; offloads go through the bridge and
wait for the eCPU's verdict. The host never computes anything itself, so
its "program" is the memory traffic and offload stream a real RV32 core
would produce.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING

import numpy as np

from arcane_sim import isa
from arcane_sim.cache import AccessKind, Stall
from arcane_sim.config import SimConfig
from arcane_sim.dataclasses import Eew, ExecutionReport, MatrixDescriptor
from arcane_sim.errors import IllegalInstruction, SimulationDeadlock
from arcane_sim.logging_config import get_logger
from arcane_sim.runtime import OffloadOutcome, PendingOffload
from arcane_sim.trace import EventLog

if TYPE_CHECKING:
    from arcane_sim.simulator import Simulator

logger = get_logger(__name__)


# --- program events ---------------------------------------------------------


@dataclass(slots=True, frozen=True)
class Load:
    addr: int
    width: int = 4


@dataclass(slots=True, frozen=True)
class Store:
    addr: int
    width: int = 4
    value: int = 0


@dataclass(slots=True, frozen=True)
class Offload:
    """One xmnmc instruction with the values of its three source registers."""

    word: int
    regs: tuple[int, int, int] = (0, 0, 0)
    text: str = ""

    @classmethod
    def from_asm(cls, line: str, symbols: dict[str, int] | None = None) -> Offload:
        inst = isa.assemble(line, symbols)
        return cls(inst.word, inst.regs, inst.text)


@dataclass(slots=True, frozen=True)
class Busy:
    cycles: int


@dataclass(slots=True, frozen=True)
class Barrier:
    """Wait until the eCPU has no pending, running or resident work."""


HostEvent = Load | Store | Offload | Busy | Barrier


@dataclass(slots=True)
class MatrixImage:
    """Initial contents of a matrix, written to memory before the run starts."""

    name: str
    descriptor: MatrixDescriptor
    values: np.ndarray


@dataclass(slots=True)
class HostProgram:
    name: str = "program"
    events: list[HostEvent] = field(default_factory=list)
    images: list[MatrixImage] = field(default_factory=list)
    symbols: dict[str, int] = field(default_factory=dict)
    kernels: dict[int, object] = field(default_factory=dict)


# --- bridge -----------------------------------------------------------------


class BridgePhase(StrEnum):
    IDLE = "idle"
    ISSUED = "issued"
    AWAITING_DECODE = "awaiting-decode"
    ACCEPTED = "accepted"
    KILLED = "killed"


@dataclass(slots=True)
class BridgeState:
    """Latched copy of the last offloaded instruction and its outcome."""

    opcode: int = 0
    func5: int = 0
    rs1: int = 0
    rs2: int = 0
    rs3: int = 0
    outcome: OffloadOutcome | None = None
    phase: BridgePhase = BridgePhase.IDLE


class Bridge:
    """Latches an offloaded instruction and raises the decode interrupt on the eCPU."""

    def __init__(self, handshake_cycles: int = 2, events: EventLog | None = None):
        self.handshake_cycles = handshake_cycles
        self.events = events if events is not None else EventLog()
        self.state = BridgeState()
        self.history: list[BridgePhase] = [BridgePhase.IDLE]
        self.outcome_at: int | None = None
        self.reason = ""

    def _enter(self, phase: BridgePhase) -> None:
        self.state.phase = phase
        self.history.append(phase)

    def issue(self, offload: Offload, now: int) -> PendingOffload:
        if self.state.phase not in (BridgePhase.IDLE, BridgePhase.ACCEPTED, BridgePhase.KILLED):
            raise IllegalInstruction("Bridge is busy with another offload", word=offload.word)
        rs1, rs2, rs3 = offload.regs
        self.state = BridgeState(offload.word & 0x7F, offload.word >> 27, rs1, rs2, rs3, None, self.state.phase)
        self.outcome_at = None
        self.reason = ""
        self._enter(BridgePhase.ISSUED)
        self._enter(BridgePhase.AWAITING_DECODE)
        self.events.record(now, "bridge", "issue", offload.text or f"{offload.word:#010x}")
        return PendingOffload(offload.word, offload.regs, now + self.handshake_cycles, self._report)

    def _report(self, outcome: OffloadOutcome, at: int, reason: str = "") -> None:
        if self.state.phase is not BridgePhase.AWAITING_DECODE:
            raise IllegalInstruction("Bridge received an outcome without a pending offload")
        self.state.outcome = outcome
        self.outcome_at = at
        self.reason = reason
        self._enter(BridgePhase.KILLED if outcome is OffloadOutcome.REJECTED else BridgePhase.ACCEPTED)
        self.events.record(at, "bridge", str(outcome), reason)

    def retire(self) -> None:
        self._enter(BridgePhase.IDLE)


# --- host actor -------------------------------------------------------------


class HostState(StrEnum):
    RUNNING = "running"
    OFFLOADING = "offloading"
    DONE = "done"


class Host:
    """Executes a HostProgram against a simulator, interleaved with the eCPU."""

    def __init__(self, sim: Simulator):
        self.sim = sim
        self.cache = sim.cache
        self.runtime = sim.runtime
        self.bridge = sim.bridge
        self.events = sim.events

    def run_program(self, program: HostProgram) -> ExecutionReport:
        """Run until the host finished every event and the eCPU drained.

        On equal timestamps the host acts before the eCPU.

        Raises:
            IllegalInstruction: If an offload is rejected.
            SimulationDeadlock: If the host waits on an eCPU with nothing to do.
        """
        runtime = self.runtime
        report = ExecutionReport(workload=program.name, config=self.sim.config.label())
        events = program.events
        pc = 0
        state = HostState.RUNNING
        host_next: int | None = 0
        blocked_since = 0
        finished_at = 0

        while True:
            if state is HostState.OFFLOADING:
                host_next = self.bridge.outcome_at
            ecpu_next = runtime.ready_at
            if host_next is None and ecpu_next is None:
                if state is HostState.DONE and runtime.drained():
                    break
                raise SimulationDeadlock(f"Host is {state} at event {pc} and the eCPU is asleep")
            if host_next is None or (ecpu_next is not None and ecpu_next < host_next):
                runtime.step(ecpu_next)
                continue

            now = host_next
            if state is HostState.OFFLOADING:
                report.offload_wait += now - blocked_since
                if self.bridge.state.outcome is OffloadOutcome.REJECTED:
                    word = events[pc].word
                    raise IllegalInstruction(
                        f"Offload {events[pc].text or hex(word)} rejected: {self.bridge.reason}",
                        word=word,
                        func5=word >> 27,
                    )
                self.bridge.retire()
                state = HostState.RUNNING
                pc += 1
                continue
            if pc >= len(events):
                state, host_next, finished_at = HostState.DONE, None, now
                continue

            event = events[pc]
            if isinstance(event, Load | Store):
                rw = AccessKind.READ if isinstance(event, Load) else AccessKind.WRITE
                value = event.value if isinstance(event, Store) else None
                result = self.cache.host_access(event.addr, rw, event.width, value, now=now)
                if isinstance(result, Stall):
                    retry = self._retry_time(now, f"{rw} {event.addr:#x} stalled ({result.reason})")
                    report.host_stall += retry - now
                    host_next = retry
                    continue
                if isinstance(event, Load):
                    report.loads.append((event.addr, event.width, result.data))
                pc += 1
                host_next = now + result.cycles
            elif isinstance(event, Busy):
                pc += 1
                host_next = now + event.cycles
            elif isinstance(event, Barrier):
                if runtime.drained():
                    pc += 1
                    continue
                retry = self._retry_time(now, "barrier")
                report.barrier_wait += retry - now
                host_next = retry
            elif isinstance(event, Offload):
                runtime.raise_interrupt(self.bridge.issue(event, now))
                state = HostState.OFFLOADING
                blocked_since = now
            else:
                raise TypeError(f"Unknown host event {event!r}")

        end = max(finished_at, runtime.busy_until)
        runtime.finalize(end)
        report.total_cycles = end
        report.phases = dataclasses.replace(runtime.phases)
        report.ecpu_idle = runtime.idle_cycles
        report.kernels = runtime.completed
        logger.info(
            f"{program.name}: {end} cycles, {report.kernels} kernels, host stalled {report.host_stall} cycles"
        )
        return report

    def _retry_time(self, now: int, what: str) -> int:
        ready = self.runtime.ready_at
        if ready is None:
            raise SimulationDeadlock(f"Host waits on {what} at cycle {now} but the eCPU is asleep")
        self.events.record(now, "host", "stall", what)
        return max(now + 1, ready)


# --- analytic baselines -----------------------------------------------------


class BaselineModel(StrEnum):
    SCALAR = "scalar"
    PACKED_SIMD = "packed-simd"


@dataclass(slots=True, frozen=True)
class KernelShape:
    """Problem size of one kernel invocation, as the baselines see it."""

    rows: int
    cols: int
    depth: int = 1
    kernel_rows: int = 1
    kernel_cols: int = 1
    stride: int = 1

    @classmethod
    def conv_layer(cls, size: int, filter_size: int) -> KernelShape:
        return cls(rows=size, cols=size, depth=3, kernel_rows=filter_size, kernel_cols=filter_size, stride=2)


def mac_equivalents(kernel: str | int, shape: KernelShape) -> int:
    """Multiply-accumulate equivalents of a kernel: each compare, scale or add counts as one."""
    name = isa.KERNEL_NAMES.get(kernel, kernel) if isinstance(kernel, int) else kernel
    s = shape
    if name == "gemm":
        return s.rows * s.depth * s.cols + 2 * s.rows * s.cols
    if name == "leaky_relu":
        return s.rows * s.cols
    if name == "maxpool":
        out_rows = (s.rows - s.kernel_rows) // s.stride + 1
        out_cols = (s.cols - s.kernel_cols) // s.stride + 1
        return out_rows * out_cols * s.kernel_rows * s.kernel_cols
    conv_rows, conv_cols = s.rows - s.kernel_rows + 1, s.cols - s.kernel_cols + 1
    if name == "conv2d":
        return conv_rows * conv_cols * s.kernel_rows * s.kernel_cols
    if name == "conv_layer3":
        pooled = (conv_rows // 2) * (conv_cols // 2)
        return s.depth * conv_rows * conv_cols * s.kernel_rows * s.kernel_cols + 5 * pooled
    raise ValueError(f"No baseline model for kernel {kernel!r}")


def ops_count(kernel: str | int, shape: KernelShape) -> int:
    """Arithmetic operations, counting a MAC as two."""
    return 2 * mac_equivalents(kernel, shape)


def baseline_cycles(
    kernel: str | int,
    shape: KernelShape,
    eew: Eew,
    model: BaselineModel = BaselineModel.SCALAR,
    config: SimConfig | None = None,
) -> int:
    """Cycles the host core alone would need for the same kernel.

    The scalar model charges ``cpi_scalar_mac`` per MAC-equivalent. The
    packed-SIMD model divides that by the sub-word packing factor 32/eew and
    scales by ``simd_efficiency``.
    """
    config = config or SimConfig()
    scalar = mac_equivalents(kernel, shape) * config.cpi_scalar_mac
    if model is BaselineModel.SCALAR:
        return scalar
    return round(scalar * config.simd_efficiency / (32 // int(eew)))
