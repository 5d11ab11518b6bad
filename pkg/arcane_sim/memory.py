"""Main memory and the 2D DMA engine.

The DMA engine never touches storage directly: every row goes through a
``DmaPort`` (the cache controller), which decides whether bytes come from a
cache hit or main memory and applies fetch-on-write on the way back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import StrEnum
from typing import Protocol

import numpy as np

from arcane_sim.errors import LockNotHeld, Misaligned, OutOfBounds
from arcane_sim.logging_config import get_logger

logger = get_logger(__name__)

FILL_VALUE = 0x00
DEFAULT_MEMORY_SIZE = 16 * 1024 * 1024


class MainMemory:
    """Flat little-endian byte array standing in for off-chip memory."""

    def __init__(self, size: int = DEFAULT_MEMORY_SIZE, base: int = 0):
        self.size = size
        self.base = base
        self._data = np.full(size, FILL_VALUE, dtype=np.uint8)
        self.read_count = 0
        self.write_count = 0

    def _offset(self, addr: int, nbytes: int) -> int:
        offset = addr - self.base
        if offset < 0 or offset + nbytes > self.size:
            raise OutOfBounds(f"Access of {nbytes} bytes at {addr:#x} outside memory")
        return offset

    def contains(self, addr: int, nbytes: int = 1) -> bool:
        return self.base <= addr and addr + nbytes <= self.base + self.size

    def read(self, addr: int, width: int) -> int:
        """Read a naturally aligned 1, 2 or 4 byte little-endian value.

        Raises:
            OutOfBounds: If the access leaves memory.
            Misaligned: If addr is not a multiple of width.
        """
        offset = self._offset(addr, width)
        _check_width(addr, width)
        self.read_count += 1
        return int.from_bytes(self._data[offset : offset + width].tobytes(), "little")

    def write(self, addr: int, width: int, value: int) -> None:
        offset = self._offset(addr, width)
        _check_width(addr, width)
        self._data[offset : offset + width] = np.frombuffer(
            (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little"), dtype=np.uint8
        )
        self.write_count += 1

    def read_bytes(self, addr: int, nbytes: int) -> np.ndarray:
        offset = self._offset(addr, nbytes)
        self.read_count += 1
        return self._data[offset : offset + nbytes].copy()

    def write_bytes(self, addr: int, data: np.ndarray | bytes) -> None:
        buf = np.frombuffer(bytes(data), dtype=np.uint8) if isinstance(data, bytes | bytearray) else data
        offset = self._offset(addr, len(buf))
        self._data[offset : offset + len(buf)] = buf
        self.write_count += 1

    def peek(self, addr: int, nbytes: int) -> np.ndarray:
        """Copy of a byte range that does not count as an access."""
        offset = self._offset(addr, nbytes)
        return self._data[offset : offset + nbytes].copy()


def _check_width(addr: int, width: int) -> None:
    if width not in (1, 2, 4):
        raise Misaligned(f"Unsupported access width {width}")
    if addr % width:
        raise Misaligned(f"Address {addr:#x} is not aligned to {width} bytes")


class DmaDirection(StrEnum):
    MEM_TO_VPU = "mem->vpu"
    VPU_TO_MEM = "vpu->mem"


@dataclass(slots=True, frozen=True)
class Dma2dRequest:
    """A 2D transfer between main memory and VPU register lines.

    VPU-side addresses live in line space (global line index x line size).
    On that side ``rows_per_line`` rows are packed per line, each line
    starting a new group; rows never straddle lines.
    """

    src_base: int
    dst_base: int
    rows: int
    row_bytes: int
    src_stride_bytes: int
    dst_stride_bytes: int
    direction: DmaDirection = DmaDirection.MEM_TO_VPU
    rows_per_line: int | None = None

    def __post_init__(self):
        if self.rows < 1 or self.row_bytes < 1:
            raise ValueError("DMA request needs at least one row of one byte")
        if self.row_bytes > self.src_stride_bytes or self.row_bytes > self.dst_stride_bytes:
            raise ValueError("row_bytes must not exceed either stride")

    def _side_address(self, base: int, stride: int, row: int, line_bytes: int, packed: bool) -> int:
        if packed and self.rows_per_line:
            group, within = divmod(row, self.rows_per_line)
            return base + group * line_bytes + within * stride
        return base + row * stride

    def src_address(self, row: int, line_bytes: int) -> int:
        packed = self.direction is DmaDirection.VPU_TO_MEM
        return self._side_address(self.src_base, self.src_stride_bytes, row, line_bytes, packed)

    def dst_address(self, row: int, line_bytes: int) -> int:
        packed = self.direction is DmaDirection.MEM_TO_VPU
        return self._side_address(self.dst_base, self.dst_stride_bytes, row, line_bytes, packed)

    @property
    def total_bytes(self) -> int:
        return self.rows * self.row_bytes


@dataclass(slots=True, frozen=True)
class DmaTiming:
    dma_setup: int = 10
    row_setup: int = 4
    bus_bytes: int = 4

    def transfer_cycles(self, rows: int, row_bytes: int) -> int:
        return self.dma_setup + rows * (self.row_setup + math.ceil(row_bytes / self.bus_bytes))

    @classmethod
    def from_config(cls, config) -> DmaTiming:
        return cls(dma_setup=config.dma_setup, row_setup=config.row_setup, bus_bytes=config.bus_bytes)


class DmaPort(Protocol):
    """What the DMA engine needs from the cache controller."""

    line_bytes: int

    def dma_lock_held(self) -> bool: ...

    def dma_read(self, addr: int, nbytes: int) -> tuple[np.ndarray, int]: ...

    def dma_write(self, addr: int, data: np.ndarray) -> int: ...

    def vpu_read(self, addr: int, nbytes: int) -> np.ndarray: ...

    def vpu_write(self, addr: int, data: np.ndarray) -> None: ...

    def end_dma(self) -> None: ...


class DmaEngine:
    """Software-programmed 2D DMA routed through the cache controller."""

    def __init__(self, timing: DmaTiming, port: DmaPort):
        self.timing = timing
        self.port = port
        self.requests = 0
        self.bytes_moved = 0
        self.rows_moved = 0

    def execute(self, req: Dma2dRequest) -> int:
        """Copy every row of ``req`` and return the cycle cost.

        The base cost is DMA_SETUP + rows x (ROW_SETUP + ceil(row_bytes / bus));
        line write-backs and fetch-on-write fills done by the controller add
        their own transfer costs.

        Raises:
            LockNotHeld: If the runtime does not hold the cache lock.
            OutOfBounds: If a memory-side row leaves main memory.
        """
        if not self.port.dma_lock_held():
            raise LockNotHeld("DMA requires the cache lock held by the eCPU")

        line_bytes = self.port.line_bytes
        cycles = self.timing.transfer_cycles(req.rows, req.row_bytes)
        try:
            for row in range(req.rows):
                src = req.src_address(row, line_bytes)
                dst = req.dst_address(row, line_bytes)
                if req.direction is DmaDirection.MEM_TO_VPU:
                    data, extra = self.port.dma_read(src, req.row_bytes)
                    self.port.vpu_write(dst, data)
                else:
                    data = self.port.vpu_read(src, req.row_bytes)
                    extra = self.port.dma_write(dst, data)
                cycles += extra
        finally:
            self.port.end_dma()

        self.requests += 1
        self.rows_moved += req.rows
        self.bytes_moved += req.total_bytes
        logger.debug(f"DMA {req.direction} rows={req.rows} row_bytes={req.row_bytes} cycles={cycles}")
        return cycles
