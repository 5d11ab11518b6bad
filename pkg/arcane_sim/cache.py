"""The compute-capable LLC controller.

A fully associative, write-back cache whose lines are the VPUs' vector
registers. Line ``i`` is vector register ``i % vregs_per_vpu`` of VPU
``i // vregs_per_vpu``. The Cache Table (CT) keeps per-line status, the
Address Table (AT) keeps the memory regions of in-flight kernel operands and
blocks hazardous host accesses.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from arcane_sim.errors import AtFull, CacheError, DoubleRelease, LockNotHeld, Misaligned, NoEvictableLine, OutOfBounds
from arcane_sim.logging_config import get_logger
from arcane_sim.memory import DmaTiming, MainMemory
from arcane_sim.trace import EventLog

logger = get_logger(__name__)


class AccessKind(StrEnum):
    READ = "read"
    WRITE = "write"


class HazardKind(StrEnum):
    WAR = "war"
    RAW = "raw"
    WAW = "waw"
    LOCKED = "locked"
    BUSY = "busy"
    NO_LINE = "no-line"


class OperandRole(StrEnum):
    SOURCE = "source"
    DESTINATION = "destination"


class AtStatus(StrEnum):
    BUSY = "busy"
    FREE = "free"


class LockHolder(StrEnum):
    NONE = "none"
    HOST = "host"
    ECPU = "ecpu"


@dataclass(slots=True, frozen=True)
class CacheGeometry:
    num_vpus: int = 4
    vregs_per_vpu: int = 32
    line_bytes: int = 1024

    @property
    def lines(self) -> int:
        return self.num_vpus * self.vregs_per_vpu

    @property
    def capacity(self) -> int:
        return self.lines * self.line_bytes

    def line_of(self, vpu_id: int, vreg: int) -> int:
        return vpu_id * self.vregs_per_vpu + vreg

    @classmethod
    def from_config(cls, config) -> CacheGeometry:
        return cls(num_vpus=config.num_vpus, vregs_per_vpu=config.vregs_per_vpu, line_bytes=config.line_bytes)


@dataclass(slots=True)
class CacheTableEntry:
    """CT status of one line. ``tag`` is None while the line serves as a vector register."""

    tag: int | None = None
    valid: bool = False
    dirty: bool = False
    busy_computing: bool = False
    is_source: bool = False
    is_dest: bool = False
    lru_counter: int = 0

    CSV_COLUMNS = ("line", "tag", "valid", "dirty", "busy_computing", "is_source", "is_dest", "lru_counter")

    def reset(self) -> None:
        self.tag = None
        self.valid = self.dirty = self.busy_computing = self.is_source = self.is_dest = False
        self.lru_counter = 0

    def to_row(self, index: int) -> tuple:
        tag = "" if self.tag is None else f"{self.tag:#010x}"
        flags = (self.valid, self.dirty, self.busy_computing, self.is_source, self.is_dest)
        return (index, tag, *(int(f) for f in flags), self.lru_counter)


@dataclass(slots=True)
class AddressTableEntry:
    """An operand region; both bounds inclusive."""

    start_addr: int
    end_addr: int
    role: OperandRole
    valid: bool = True
    status: AtStatus = AtStatus.BUSY
    owner: str = ""

    CSV_COLUMNS = ("slot", "start_addr", "end_addr", "valid", "status", "role", "owner")

    def __post_init__(self):
        if self.start_addr > self.end_addr:
            raise ValueError(f"AT entry start {self.start_addr:#x} is after end {self.end_addr:#x}")

    def overlaps(self, start: int, end: int) -> bool:
        return self.start_addr <= end and start <= self.end_addr

    @property
    def blocking(self) -> bool:
        return self.valid and self.status is AtStatus.BUSY

    def to_row(self, slot: int) -> tuple:
        start, end = f"{self.start_addr:#010x}", f"{self.end_addr:#010x}"
        return (slot, start, end, int(self.valid), self.status, self.role, self.owner)


@dataclass(slots=True)
class LockState:
    holder: LockHolder = LockHolder.NONE
    pending_ecpu_request: bool = False


@dataclass(slots=True, frozen=True)
class Access:
    """A served host access."""

    data: int | None
    cycles: int
    hit: bool


@dataclass(slots=True, frozen=True)
class Stall:
    reason: HazardKind


@dataclass(slots=True)
class CacheStats:
    hits: int = 0
    misses: int = 0
    fills: int = 0
    writebacks: int = 0
    stalls: dict[str, int] = field(default_factory=dict)

    def stall(self, reason: HazardKind) -> None:
        self.stalls[reason] = self.stalls.get(reason, 0) + 1


class AddressTable:
    """Fixed-capacity table of kernel operand regions."""

    def __init__(self, capacity: int = 16):
        self.capacity = capacity
        self._slots: list[AddressTableEntry | None] = [None] * capacity

    def register(self, entry: AddressTableEntry) -> int:
        for slot, current in enumerate(self._slots):
            if current is None:
                self._slots[slot] = entry
                return slot
        raise AtFull(f"All {self.capacity} Address Table slots are in use")

    def release(self, slot: int) -> AddressTableEntry:
        entry = self._slots[slot]
        if entry is None:
            raise CacheError(f"Address Table slot {slot} is already free")
        self._slots[slot] = None
        return entry

    @property
    def free_slots(self) -> int:
        return sum(1 for entry in self._slots if entry is None)

    def __getitem__(self, slot: int) -> AddressTableEntry | None:
        return self._slots[slot]

    def entries(self) -> Iterator[tuple[int, AddressTableEntry]]:
        for slot, entry in enumerate(self._slots):
            if entry is not None:
                yield slot, entry

    def check(self, start: int, end: int, rw: AccessKind) -> HazardKind | None:
        """Hazard raised by accessing bytes [start, end], or None if allowed."""
        for _, entry in self.entries():
            if not entry.blocking or not entry.overlaps(start, end):
                continue
            if entry.role is OperandRole.DESTINATION:
                return HazardKind.RAW if rw is AccessKind.READ else HazardKind.WAW
            if rw is AccessKind.WRITE:
                return HazardKind.WAR
        return None

    def roles_overlapping(self, start: int, end: int) -> set[OperandRole]:
        return {entry.role for _, entry in self.entries() if entry.blocking and entry.overlaps(start, end)}


class CacheController:
    """CT/AT bookkeeping, host access path, lock and the DMA port."""

    def __init__(
        self,
        geometry: CacheGeometry,
        memory: MainMemory,
        timing: DmaTiming | None = None,
        at_capacity: int = 16,
        region: tuple[int, int] | None = None,
        events: EventLog | None = None,
    ):
        self.geometry = geometry
        self.line_bytes = geometry.line_bytes
        self.memory = memory
        self.timing = timing or DmaTiming()
        self.region_base, self.region_size = region or (memory.base, memory.size)
        self.events = events if events is not None else EventLog()

        self.lines = np.zeros((geometry.lines, geometry.line_bytes), dtype=np.uint8)
        self.ct = [CacheTableEntry() for _ in range(geometry.lines)]
        self.at = AddressTable(at_capacity)
        self.lock = LockState()
        self.host_busy_until = 0
        self.stats = CacheStats()

        self._tag_index: dict[int, int] = {}
        self._dma_marked: list[int] = []
        self._line_cost = self.timing.transfer_cycles(1, geometry.line_bytes)
        self._max_counter = geometry.lines - 1

    # --- helpers ---------------------------------------------------------

    def _tag(self, addr: int) -> int:
        return addr - addr % self.line_bytes

    def _in_region(self, addr: int, nbytes: int = 1) -> bool:
        return self.region_base <= addr and addr + nbytes <= self.region_base + self.region_size

    def line_for(self, addr: int) -> int | None:
        """Index of the line caching ``addr``, if any."""
        return self._tag_index.get(self._tag(addr))

    def _lines_in(self, start: int, end: int) -> Iterator[int]:
        for tag in range(self._tag(start), end + 1, self.line_bytes):
            idx = self._tag_index.get(tag)
            if idx is not None:
                yield idx

    def _require_lock(self) -> None:
        if self.lock.holder is not LockHolder.ECPU:
            raise LockNotHeld("Operation requires the cache lock held by the eCPU")

    def _apply_operand_flags(self, idx: int) -> None:
        entry = self.ct[idx]
        roles = self.at.roles_overlapping(entry.tag, entry.tag + self.line_bytes - 1)
        entry.is_source = OperandRole.SOURCE in roles
        entry.is_dest = OperandRole.DESTINATION in roles

    def _evict(self, idx: int) -> int:
        """Drop a line from the cache role, writing it back iff dirty."""
        entry = self.ct[idx]
        cycles = 0
        if entry.valid and entry.tag is not None:
            if entry.dirty:
                self.memory.write_bytes(entry.tag, self.lines[idx])
                self.stats.writebacks += 1
                cycles = self._line_cost
            del self._tag_index[entry.tag]
        entry.reset()
        return cycles

    def _fill(self, idx: int, tag: int) -> int:
        self.lines[idx] = self.memory.read_bytes(tag, self.line_bytes)
        entry = self.ct[idx]
        entry.tag = tag
        entry.valid = True
        entry.dirty = False
        self._tag_index[tag] = idx
        self._apply_operand_flags(idx)
        self.stats.fills += 1
        return self._line_cost

    # --- replacement -----------------------------------------------------

    def lru_touch(self, line: int) -> None:
        """Make ``line`` most recent: its counter drops to 0, other valid counters age by one."""
        top = self._max_counter
        for idx, entry in enumerate(self.ct):
            if idx == line:
                entry.lru_counter = 0
            elif entry.valid and entry.lru_counter < top:
                entry.lru_counter += 1

    def select_victim(self) -> int:
        """Invalid line first, else the oldest non-busy line (lowest index on ties).

        Raises:
            NoEvictableLine: If every line is busy computing.
        """
        best = None
        for idx, entry in enumerate(self.ct):
            if entry.busy_computing:
                continue
            if not entry.valid:
                return idx
            if best is None or entry.lru_counter > self.ct[best].lru_counter:
                best = idx
        if best is None:
            raise NoEvictableLine("Every cache line is busy computing")
        return best

    # --- host path -------------------------------------------------------

    def host_access(
        self, addr: int, rw: AccessKind, width: int = 4, value: int | None = None, now: int = 0
    ) -> Access | Stall:
        """Serve one host load or store, or report why it must stall.

        Raises:
            OutOfBounds: If the access leaves the cacheable region.
            Misaligned: If the access is not naturally aligned.
        """
        if not self._in_region(addr, width):
            raise OutOfBounds(f"Host access at {addr:#x} outside the cacheable region")
        if width not in (1, 2, 4) or addr % width:
            raise Misaligned(f"Host access of {width} bytes at {addr:#x} is misaligned")

        stall = self._host_stall_reason(addr, rw, width)
        if stall is not None:
            self.stats.stall(stall)
            return Stall(stall)

        tag = self._tag(addr)
        idx = self._tag_index.get(tag)
        cycles = 1
        hit = idx is not None
        if hit:
            self.stats.hits += 1
        else:
            idx = self.select_victim()
            cycles += self._evict(idx) + self._fill(idx, tag)
            self.stats.misses += 1

        data = self._serve(idx, addr, rw, width, value)
        self.lru_touch(idx)
        self.host_busy_until = now + cycles
        return Access(data=data, cycles=cycles, hit=hit)

    def _host_stall_reason(self, addr: int, rw: AccessKind, width: int) -> HazardKind | None:
        if self.lock.holder is LockHolder.ECPU:
            return HazardKind.LOCKED
        idx = self._tag_index.get(self._tag(addr))
        if idx is not None:
            entry = self.ct[idx]
            if entry.busy_computing:
                return HazardKind.BUSY
            if entry.is_source or entry.is_dest:
                return self.at.check(addr, addr + width - 1, rw)
            return None
        hazard = self.at.check(addr, addr + width - 1, rw)
        if hazard is not None:
            return hazard
        if all(entry.busy_computing for entry in self.ct):
            return HazardKind.NO_LINE
        return None

    def _serve(self, idx: int, addr: int, rw: AccessKind, width: int, value: int | None) -> int | None:
        offset = addr - self.ct[idx].tag
        if rw is AccessKind.READ:
            return int.from_bytes(self.lines[idx, offset : offset + width].tobytes(), "little")
        raw = (value or 0) & ((1 << (8 * width)) - 1)
        self.lines[idx, offset : offset + width] = np.frombuffer(raw.to_bytes(width, "little"), dtype=np.uint8)
        self.ct[idx].dirty = True
        return None

    # --- lock ------------------------------------------------------------

    def acquire_lock(self, now: int = 0) -> bool:
        """Try to take the lock for the eCPU; deferred while a host access is in flight."""
        if self.lock.holder is LockHolder.ECPU:
            raise CacheError("Cache lock is not re-entrant")
        if now < self.host_busy_until:
            if not self.lock.pending_ecpu_request:
                self.events.record(now, "cache", "lock-deferred", f"until={self.host_busy_until}")
            self.lock.pending_ecpu_request = True
            return False
        self.lock.holder = LockHolder.ECPU
        self.lock.pending_ecpu_request = False
        self.events.record(now, "cache", "lock-acquired")
        return True

    def release_lock(self, now: int = 0) -> None:
        if self.lock.holder is not LockHolder.ECPU:
            raise DoubleRelease("Cache lock is not held")
        self.lock.holder = LockHolder.NONE
        self.events.record(now, "cache", "lock-released")

    def lock_holder(self, now: int) -> LockHolder:
        if self.lock.holder is LockHolder.ECPU:
            return LockHolder.ECPU
        return LockHolder.HOST if now < self.host_busy_until else LockHolder.NONE

    # --- address table ---------------------------------------------------

    def at_register(self, entry: AddressTableEntry) -> int:
        """Register an operand region and flag the cached lines it touches."""
        slot = self.at.register(entry)
        for idx in self._lines_in(entry.start_addr, entry.end_addr):
            self._apply_operand_flags(idx)
        return slot

    def at_release(self, slot: int) -> None:
        entry = self.at.release(slot)
        for idx in self._lines_in(entry.start_addr, entry.end_addr):
            self._apply_operand_flags(idx)

    def at_check(self, addr: int, rw: AccessKind, width: int = 1) -> HazardKind | None:
        return self.at.check(addr, addr + width - 1, rw)

    def mark_lines(
        self,
        start: int,
        end: int,
        busy_computing: bool | None = None,
        is_source: bool | None = None,
        is_dest: bool | None = None,
    ) -> list[int]:
        """Set status flags on every cached line intersecting [start, end].

        Returns:
            Indices of the lines that were updated.

        Raises:
            LockNotHeld: If the eCPU does not hold the lock.
        """
        self._require_lock()
        touched = list(self._lines_in(start, end))
        for idx in touched:
            entry = self.ct[idx]
            if busy_computing is not None:
                entry.busy_computing = busy_computing
            if is_source is not None:
                entry.is_source = is_source
            if is_dest is not None:
                entry.is_dest = is_dest
        return touched

    # --- vector register reservation ------------------------------------

    def claim_lines(self, indices: list[int]) -> int:
        """Turn lines into vector registers for a kernel; returns write-back cycles."""
        self._require_lock()
        cycles = 0
        for idx in indices:
            if self.ct[idx].busy_computing:
                raise CacheError(f"Line {idx} is already reserved")
            cycles += self._evict(idx)
            entry = self.ct[idx]
            entry.valid = True
            entry.busy_computing = True
        return cycles

    def release_lines(self, indices: list[int]) -> None:
        for idx in indices:
            self.ct[idx].reset()

    # --- DMA port --------------------------------------------------------

    def dma_lock_held(self) -> bool:
        return self.lock.holder is LockHolder.ECPU

    def _chunks(self, addr: int, nbytes: int) -> Iterator[tuple[int, int, int, int]]:
        """(position, address, line tag, length) pieces of a range split at line boundaries."""
        pos = 0
        while pos < nbytes:
            current = addr + pos
            tag = self._tag(current)
            take = min(nbytes - pos, tag + self.line_bytes - current)
            yield pos, current, tag, take
            pos += take

    def dma_read(self, addr: int, nbytes: int) -> tuple[np.ndarray, int]:
        """Source bytes from hit lines or memory; operand lines are cleaned and held busy."""
        out = np.empty(nbytes, dtype=np.uint8)
        extra = 0
        for pos, current, tag, take in self._chunks(addr, nbytes):
            idx = self._tag_index.get(tag)
            if idx is None:
                out[pos : pos + take] = self.memory.read_bytes(current, take)
                continue
            entry = self.ct[idx]
            if entry.is_source or entry.is_dest:
                if entry.dirty:
                    self.memory.write_bytes(tag, self.lines[idx])
                    self.stats.writebacks += 1
                    entry.dirty = False
                    extra += self._line_cost
                if not entry.busy_computing:
                    entry.busy_computing = True
                    self._dma_marked.append(idx)
            offset = current - tag
            out[pos : pos + take] = self.lines[idx, offset : offset + take]
        return out, extra

    def dma_write(self, addr: int, data: np.ndarray) -> int:
        """Fetch-on-write: absent lines are loaded, merged and left dirty."""
        extra = 0
        for pos, current, tag, take in self._chunks(addr, len(data)):
            chunk = data[pos : pos + take]
            idx = self._tag_index.get(tag)
            if idx is None:
                if not self._in_region(tag, self.line_bytes):
                    self.memory.write_bytes(current, chunk)
                    continue
                try:
                    idx = self.select_victim()
                except NoEvictableLine:
                    self.memory.write_bytes(current, chunk)
                    continue
                extra += self._evict(idx) + self._fill(idx, tag)
                self.lru_touch(idx)
            offset = current - tag
            self.lines[idx, offset : offset + take] = chunk
            self.ct[idx].dirty = True
        return extra

    def vpu_read(self, addr: int, nbytes: int) -> np.ndarray:
        return self.lines.reshape(-1)[addr : addr + nbytes].copy()

    def vpu_write(self, addr: int, data: np.ndarray) -> None:
        self.lines.reshape(-1)[addr : addr + len(data)] = data

    def end_dma(self) -> None:
        for idx in self._dma_marked:
            self.ct[idx].busy_computing = False
        self._dma_marked.clear()

    # --- coherence -------------------------------------------------------

    def flush(self) -> int:
        """Write every dirty, non-busy line back to memory; returns the cycle cost."""
        cycles = 0
        for idx, entry in enumerate(self.ct):
            if entry.valid and entry.tag is not None and entry.dirty and not entry.busy_computing:
                self.memory.write_bytes(entry.tag, self.lines[idx])
                self.stats.writebacks += 1
                entry.dirty = False
                cycles += self._line_cost
        return cycles

    def peek(self, addr: int, nbytes: int) -> np.ndarray:
        """Coherent view of memory contents without touching any state."""
        out = np.empty(nbytes, dtype=np.uint8)
        for pos, current, tag, take in self._chunks(addr, nbytes):
            idx = self._tag_index.get(tag)
            if idx is None:
                out[pos : pos + take] = self.memory.peek(current, take)
            else:
                offset = current - tag
                out[pos : pos + take] = self.lines[idx, offset : offset + take]
        return out

    # --- dumps -----------------------------------------------------------

    def ct_rows(self) -> list[tuple]:
        return [entry.to_row(idx) for idx, entry in enumerate(self.ct)]

    def at_rows(self) -> list[tuple]:
        return [entry.to_row(slot) for slot, entry in self.at.entries()]
