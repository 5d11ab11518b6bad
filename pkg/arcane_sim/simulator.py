"""Top-level wiring of memory, cache, VPUs, eCPU runtime, bridge and host."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from arcane_sim.cache import AddressTableEntry, CacheController, CacheGeometry, CacheTableEntry
from arcane_sim.config import SimConfig
from arcane_sim.dataclasses import ExecutionReport, MatrixDescriptor
from arcane_sim.host import Bridge, Host, HostProgram, MatrixImage
from arcane_sim.kernels import default_library
from arcane_sim.logging_config import get_logger
from arcane_sim.memory import DmaEngine, DmaTiming, MainMemory
from arcane_sim.runtime import CacheRuntime, KernelLibrary
from arcane_sim.trace import EventLog, TraceEvent, write_csv
from arcane_sim.vpu import MicroOpRecord, Vpu

logger = get_logger(__name__)


class Simulator:
    """One simulated system; run a single program on it, then inspect its state."""

    def __init__(self, config: SimConfig | None = None, library: KernelLibrary | None = None, trace: bool = False):
        self.config = (config or SimConfig()).validate()
        config = self.config
        self.events = EventLog(enabled=trace)
        self.memory = MainMemory(config.memory_size)
        self.geometry = CacheGeometry.from_config(config)
        self.timing = DmaTiming.from_config(config)
        self.cache = CacheController(
            self.geometry,
            self.memory,
            self.timing,
            at_capacity=config.at_capacity,
            region=(config.data_base, config.region_size),
            events=self.events,
        )
        self.dma = DmaEngine(self.timing, self.cache)
        self.vpus = [Vpu(i, self.cache, config.lanes, config.issue, trace) for i in range(config.num_vpus)]
        self.library = library or default_library()
        self.runtime = CacheRuntime(config, self.cache, self.dma, self.vpus, self.library, self.events)
        self.bridge = Bridge(config.bridge_cycles, self.events)
        self.host = Host(self)
        logger.debug(f"Simulator ready: {config.label()}, {config.capacity_bytes} bytes of cache")

    def write_matrix(self, desc: MatrixDescriptor, values: np.ndarray) -> None:
        """Store matrix values straight into main memory, wrapping to the element width.

        Meant for setting up inputs before a run: it bypasses the cache.
        """
        data = np.asarray(values, dtype=np.int64).reshape(desc.rows, desc.cols)
        raw = (data & ((1 << int(desc.eew)) - 1)).astype(desc.eew.unsigned_dtype)
        for row in range(desc.rows):
            self.memory.write_bytes(desc.row_address(row), raw[row].view(np.uint8))

    def read_matrix(self, desc: MatrixDescriptor) -> np.ndarray:
        """Coherent read of a matrix (cache contents take precedence over memory)."""
        out = np.empty((desc.rows, desc.cols), dtype=desc.eew.dtype)
        for row in range(desc.rows):
            out[row] = self.cache.peek(desc.row_address(row), desc.row_bytes).view(desc.eew.dtype)
        return out

    def load_images(self, images: list[MatrixImage]) -> None:
        for image in images:
            self.write_matrix(image.descriptor, image.values)
            logger.debug(f"Matrix {image.name} written at {image.descriptor.base:#x}")

    def run(self, program: HostProgram) -> ExecutionReport:
        for func5, kernel in program.kernels.items():
            self.library.register(func5, kernel)
        self.load_images(program.images)
        return self.host.run_program(program)

    def flush(self) -> int:
        """Write every dirty cache line back; returns the cycles it would cost."""
        return self.cache.flush()

    def dump_trace(self, directory: str | Path) -> list[Path]:
        """Write ct.csv, at.csv, uops.csv and events.csv into ``directory``."""
        directory = Path(directory)
        uops = [record.to_row() for vpu in self.vpus for record in vpu.trace]
        paths = [
            write_csv(directory / "ct.csv", CacheTableEntry.CSV_COLUMNS, self.cache.ct_rows()),
            write_csv(directory / "at.csv", AddressTableEntry.CSV_COLUMNS, self.cache.at_rows()),
            write_csv(directory / "uops.csv", MicroOpRecord.CSV_COLUMNS, uops),
            write_csv(directory / "events.csv", EventLog.COLUMNS, (TraceEvent.to_row(e) for e in self.events)),
        ]
        logger.info(f"Trace written to {directory}")
        return paths
