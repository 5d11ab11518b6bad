"""Workload files, reproducible matrix data and experiment sweeps.

A workload file is INI-like::

    [config]
    lanes = 8

    [kernels]
    5 = mypkg.kernels:Transpose

    [data]
    matrix A 0x10000 24 8 w random seed=1
    matrix F 0x20000 9 3 w literal 1 0 -1 ...
    matrix R 0x30000 3 3 w literal 0 0 0 0 0 0 0 0 0

    [program]
    xmr.w m0, A, 8, 24, 8
    xmk4.w m2, m0, m1
    busy 100
    barrier
    load A+4 4

Sweeps run the three-channel convolution layer over a grid of sizes and
lane counts and emit plot-ready CSV.
"""

from __future__ import annotations

import csv
import importlib
import io
import math
import re
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from arcane_sim import isa
from arcane_sim.config import SimConfig
from arcane_sim.dataclasses import PHASES, Eew, ExecutionReport, MatrixDescriptor, PhaseBreakdown
from arcane_sim.errors import ConfigInvariantViolated, EncodingError, ParseError, WorkloadError
from arcane_sim.host import (
    Barrier,
    BaselineModel,
    Busy,
    HostProgram,
    KernelShape,
    Load,
    MatrixImage,
    Offload,
    Store,
    baseline_cycles,
)
from arcane_sim.logging_config import get_logger
from arcane_sim.simulator import Simulator

logger = get_logger(__name__)

SECTIONS = ("config", "kernels", "data", "program")
DEFAULT_SIZES = (8, 16, 32, 64, 128, 256)
DEFAULT_LANES = (2, 4, 8)
SWEEP_DATA_OFFSET = 0x10000

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1

_SYMBOL_OFFSET = re.compile(r"^([A-Za-z_]\w*)([+-])(\w+)$")


# --- random data ------------------------------------------------------------


class Lcg64:
    """64-bit linear congruential generator; each draw keeps the top bits of the state."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state * LCG_MULTIPLIER + LCG_INCREMENT) & _MASK64
        return self.state

    def bits(self, n: int) -> int:
        return self.next() >> (64 - n)


def random_matrix(rows: int, cols: int, eew: Eew, seed: int) -> np.ndarray:
    """rows x cols matrix of eew-bit signed values drawn from ``Lcg64(seed)``."""
    lcg = Lcg64(seed)
    raw = np.array([lcg.bits(int(eew)) for _ in range(rows * cols)], dtype=np.uint64)
    return raw.astype(eew.unsigned_dtype).view(eew.dtype).reshape(rows, cols)


# --- workload files ---------------------------------------------------------


@dataclass(slots=True)
class _Line:
    number: int
    column: int
    text: str


@dataclass(slots=True)
class _Sections:
    lines: dict[str, list[_Line]] = field(default_factory=lambda: {name: [] for name in SECTIONS})


def _split_sections(text: str, source: str) -> _Sections:
    sections = _Sections()
    current = "program"
    for number, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        stripped = body.strip()
        if not stripped:
            continue
        column = len(body) - len(body.lstrip()) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ParseError("Unterminated section header", number, column, source)
            current = stripped[1:-1].strip().lower()
            if current not in SECTIONS:
                raise ParseError(f"Unknown section [{current}]", number, column, source)
            continue
        sections.lines[current].append(_Line(number, column, stripped))
    return sections


def _parse_number(token: str, line: _Line, source: str, symbols: dict[str, int] | None = None) -> int:
    if symbols:
        if token in symbols:
            return symbols[token]
        match = _SYMBOL_OFFSET.match(token)
        if match and match.group(1) in symbols:
            offset = _parse_number(match.group(3), line, source)
            return symbols[match.group(1)] + (offset if match.group(2) == "+" else -offset)
    try:
        return int(token, 0)
    except ValueError:
        column = line.column + max(line.text.find(token), 0)
        raise ParseError(f"Expected a number, got {token!r}", line.number, column, source) from None


def _parse_config(lines: list[_Line], source: str) -> dict[str, str]:
    overrides = {}
    for line in lines:
        key, sep, value = line.text.partition("=")
        if not sep or not key.strip():
            raise ParseError("Expected key = value", line.number, line.column, source)
        overrides[key.strip()] = value.strip()
    return overrides


def _parse_kernels(lines: list[_Line], source: str) -> dict[int, object]:
    kernels = {}
    for line in lines:
        key, sep, target = line.text.partition("=")
        module_name, colon, class_name = target.strip().partition(":")
        if not sep or not colon:
            raise ParseError("Expected N = module:Class", line.number, line.column, source)
        func5 = _parse_number(key.strip(), line, source)
        if not 0 <= func5 <= isa.MAX_KERNEL_ID:
            raise ParseError(f"Kernel id {func5} outside 0..{isa.MAX_KERNEL_ID}", line.number, line.column, source)
        try:
            kernel_cls = getattr(importlib.import_module(module_name.strip()), class_name.strip())
        except (ImportError, AttributeError) as e:
            raise ParseError(f"Cannot import {target.strip()}: {e}", line.number, line.column, source) from None
        kernels[func5] = kernel_cls()
    return kernels


def _parse_matrix(line: _Line, source: str, base_dir: Path) -> MatrixImage:
    tokens = line.text.split()
    if len(tokens) < 7 or tokens[0] != "matrix":
        raise ParseError("Expected: matrix NAME ADDR ROWS COLS EEW <data>", line.number, line.column, source)
    name = tokens[1]
    addr, rows, cols = (_parse_number(tok, line, source) for tok in tokens[2:5])
    try:
        eew = Eew.parse(tokens[5])
    except EncodingError as e:
        raise ParseError(str(e), line.number, line.column, source) from None
    if rows < 1 or cols < 1:
        raise ConfigInvariantViolated(f"{source}:{line.number}: matrix {name} must have rows and cols >= 1")
    desc = MatrixDescriptor(addr, cols, rows, cols, eew)

    kind, rest = tokens[6], tokens[7:]
    if kind == "literal":
        if len(rest) != rows * cols:
            raise ParseError(
                f"matrix {name} needs {rows * cols} literal values, got {len(rest)}", line.number, line.column, source
            )
        values = np.array([_parse_number(tok, line, source) for tok in rest], dtype=np.int64).reshape(rows, cols)
    elif kind == "random":
        params = dict(tok.split("=", 1) for tok in rest if "=" in tok)
        values = random_matrix(rows, cols, eew, _parse_number(params.get("seed", "0"), line, source))
    elif kind.startswith("file="):
        path = base_dir / kind.removeprefix("file=")
        try:
            data = path.read_bytes()
        except OSError as e:
            raise ParseError(f"Cannot read {path}: {e}", line.number, line.column, source) from None
        expected = rows * cols * eew.nbytes
        if len(data) != expected:
            message = f"{path} holds {len(data)} bytes, expected {expected}"
            raise ParseError(message, line.number, line.column, source)
        values = np.frombuffer(data, dtype=eew.dtype).reshape(rows, cols).copy()
    else:
        raise ParseError(f"Unknown matrix data source {kind!r}", line.number, line.column, source)
    return MatrixImage(name, desc, values)


def _parse_event(line: _Line, source: str, symbols: dict[str, int]):
    tokens = line.text.split()
    head = tokens[0].lower()
    args = tokens[1:]

    def expect(count: int) -> None:
        if len(args) != count:
            raise ParseError(f"{head} takes {count} operand(s)", line.number, line.column, source)

    if head == "load":
        expect(2)
        return Load(_parse_number(args[0], line, source, symbols), _parse_number(args[1], line, source))
    if head == "store":
        expect(3)
        addr, width, value = (_parse_number(tok, line, source, symbols) for tok in args)
        return Store(addr, width, value)
    if head == "busy":
        expect(1)
        return Busy(_parse_number(args[0], line, source))
    if head == "barrier":
        expect(0)
        return Barrier()
    try:
        return Offload.from_asm(line.text, symbols)
    except EncodingError as e:
        raise ParseError(str(e), line.number, line.column, source) from None


def parse_workload(
    text: str, source: str = "<workload>", base: SimConfig | None = None, base_dir: Path | None = None
) -> tuple[SimConfig, HostProgram]:
    """Parse workload text into a validated configuration and a host program.

    Raises:
        ParseError: On malformed lines, with line and column.
        ConfigInvariantViolated: On bad config values or empty matrices.
    """
    sections = _split_sections(text, source)
    config = (base or SimConfig()).with_overrides(_parse_config(sections.lines["config"], source))
    program = HostProgram(name=Path(source).stem)
    program.kernels = _parse_kernels(sections.lines["kernels"], source)
    for line in sections.lines["data"]:
        image = _parse_matrix(line, source, base_dir or Path("."))
        if image.name in program.symbols:
            raise ParseError(f"Matrix {image.name} defined twice", line.number, line.column, source)
        program.images.append(image)
        program.symbols[image.name] = image.descriptor.base
    program.events = [_parse_event(line, source, program.symbols) for line in sections.lines["program"]]
    logger.debug(f"Parsed {source}: {len(program.events)} events, {len(program.images)} matrices")
    return config, program


def load_workload(path: str | Path, base: SimConfig | None = None) -> tuple[SimConfig, HostProgram]:
    path = Path(path)
    return parse_workload(path.read_text(), str(path), base, path.parent)


def load_config(path: str | Path, base: SimConfig | None = None) -> SimConfig:
    """Read only the ``[config]`` section of a file."""
    path = Path(path)
    sections = _split_sections(path.read_text(), str(path))
    return (base or SimConfig()).with_overrides(_parse_config(sections.lines["config"], str(path)))


# --- conv-layer experiments -------------------------------------------------


def _align(value: int, boundary: int) -> int:
    return math.ceil(value / boundary) * boundary


def conv_layer_program(size: int, filter_size: int, eew: Eew, config: SimConfig, seed: int = 1) -> HostProgram:
    """Three-channel size x size convolution layer with a filter_size filter, as offloads."""
    conv = size - filter_size + 1
    if conv < 2:
        raise WorkloadError(f"Input size {size} is too small for a {filter_size}x{filter_size} filter")
    boundary = max(config.line_bytes, 4096)
    a = MatrixDescriptor(config.data_base + SWEEP_DATA_OFFSET, size, 3 * size, size, eew)
    f = MatrixDescriptor(_align(a.base + a.extent_bytes, boundary), filter_size, 3 * filter_size, filter_size, eew)
    r = MatrixDescriptor(_align(f.base + f.extent_bytes, boundary), conv // 2, conv // 2, conv // 2, eew)
    if r.base + r.extent_bytes > config.data_base + config.region_size:
        raise WorkloadError(f"Size {size} does not fit the data region")

    program = HostProgram(name=f"conv_layer3-{size}-{filter_size}x{filter_size}-{eew.suffix}")
    program.images = [
        MatrixImage("A", a, random_matrix(a.rows, a.cols, eew, seed)),
        MatrixImage("F", f, random_matrix(f.rows, f.cols, eew, seed + 1)),
        MatrixImage("R", r, np.zeros((r.rows, r.cols), dtype=eew.dtype)),
    ]
    program.symbols = {image.name: image.descriptor.base for image in program.images}
    for index, image in enumerate(program.images):
        word, regs = isa.encode_xmr(index, image.descriptor)
        program.events.append(Offload(word, regs, f"xmr.{eew.suffix} m{index}, {image.name}"))
    word, regs = isa.encode_xmk(4, eew, (0, 0, 0, 2, 0, 1))
    program.events.append(Offload(word, regs, f"xmk4.{eew.suffix} m2, m0, m1"))
    return program


@dataclass(slots=True, frozen=True)
class SweepPoint:
    size: int
    lanes: int
    eew: Eew
    filter_size: int = 3


@dataclass(slots=True)
class OverheadRow:
    point: SweepPoint
    total_cycles: int
    phases: PhaseBreakdown

    CSV_COLUMNS = ("size", "lanes", "eew", "filter", "total_cycles", *PHASES, *(f"{p}_frac" for p in PHASES))

    def to_row(self) -> tuple:
        fractions = self.phases.fractions()
        p = self.point
        return (
            p.size,
            p.lanes,
            int(p.eew),
            p.filter_size,
            self.total_cycles,
            *(getattr(self.phases, phase) for phase in PHASES),
            *(f"{fractions[phase]:.6f}" for phase in PHASES),
        )


@dataclass(slots=True)
class SpeedupRow:
    point: SweepPoint
    arcane_cycles: int
    scalar_cycles: int
    packed_cycles: int

    CSV_COLUMNS = (
        "size",
        "lanes",
        "eew",
        "filter",
        "arcane_cycles",
        "scalar_cycles",
        "packed_cycles",
        "speedup_scalar",
        "speedup_packed",
    )

    @property
    def speedup_scalar(self) -> float:
        return self.scalar_cycles / self.arcane_cycles

    @property
    def speedup_packed(self) -> float:
        return self.packed_cycles / self.arcane_cycles

    def to_row(self) -> tuple:
        p = self.point
        return (
            p.size,
            p.lanes,
            int(p.eew),
            p.filter_size,
            self.arcane_cycles,
            self.scalar_cycles,
            self.packed_cycles,
            f"{self.speedup_scalar:.6f}",
            f"{self.speedup_packed:.6f}",
        )


def run_point(point: SweepPoint, base: SimConfig | None = None, seed: int = 1) -> ExecutionReport:
    """Simulate one conv-layer point on a fresh simulator."""
    config = (base or SimConfig()).with_overrides({"lanes": point.lanes})
    program = conv_layer_program(point.size, point.filter_size, point.eew, config, seed)
    return Simulator(config).run(program)


def _run_all(points: list[SweepPoint], base: SimConfig | None, seed: int, jobs: int) -> list[ExecutionReport]:
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_point, points, [base] * len(points), [seed] * len(points)))
    return [run_point(point, base, seed) for point in points]


def _check_sizes(sizes: Sequence[int]) -> list[int]:
    sizes = list(sizes)
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:], strict=False)):
        raise WorkloadError(f"Sweep sizes must be strictly ascending, got {sizes}")
    return sizes


def sweep_overhead(
    sizes: Sequence[int] = DEFAULT_SIZES,
    lanes_set: Sequence[int] = DEFAULT_LANES,
    eew: Eew = Eew.W,
    filter_size: int = 3,
    base: SimConfig | None = None,
    seed: int = 1,
    jobs: int = 1,
) -> list[OverheadRow]:
    """Phase breakdown of the conv layer for every size x lane count."""
    points = [SweepPoint(size, lanes, eew, filter_size) for size in _check_sizes(sizes) for lanes in lanes_set]
    reports = _run_all(points, base, seed, jobs)
    rows = [OverheadRow(p, r.total_cycles, r.phases) for p, r in zip(points, reports, strict=True)]
    logger.info(f"Overhead sweep finished: {len(rows)} points")
    return rows


def sweep_speedup(
    sizes: Sequence[int] = DEFAULT_SIZES,
    lanes_set: Sequence[int] = DEFAULT_LANES,
    eews: Sequence[Eew] = (Eew.B, Eew.W),
    filters: Sequence[int] = (3,),
    base: SimConfig | None = None,
    seed: int = 1,
    jobs: int = 1,
) -> list[SpeedupRow]:
    """Conv-layer cycles against the scalar and packed-SIMD host baselines."""
    points = [
        SweepPoint(size, lanes, eew, filter_size)
        for eew in eews
        for filter_size in filters
        for size in _check_sizes(sizes)
        for lanes in lanes_set
    ]
    reports = _run_all(points, base, seed, jobs)
    config = base or SimConfig()
    rows = []
    for point, report in zip(points, reports, strict=True):
        shape = KernelShape.conv_layer(point.size, point.filter_size)
        scalar = baseline_cycles("conv_layer3", shape, point.eew, BaselineModel.SCALAR, config)
        packed = baseline_cycles("conv_layer3", shape, point.eew, BaselineModel.PACKED_SIMD, config)
        rows.append(SpeedupRow(point, report.total_cycles, scalar, packed))
    logger.info(f"Speedup sweep finished: {len(rows)} points")
    return rows


# --- output -----------------------------------------------------------------


def to_csv(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buffer.getvalue()


def reports_csv(reports: Iterable[ExecutionReport]) -> str:
    return to_csv(ExecutionReport.CSV_COLUMNS, (report.to_row() for report in reports))


def rows_csv(rows: Sequence[OverheadRow] | Sequence[SpeedupRow]) -> str:
    columns = rows[0].CSV_COLUMNS if rows else SpeedupRow.CSV_COLUMNS
    return to_csv(columns, (row.to_row() for row in rows))


def write_plot_data(rows: Sequence[OverheadRow] | Sequence[SpeedupRow], directory: str | Path) -> list[Path]:
    """One CSV per (eew, filter): x = size, one column per lane count.

    Speedup rows plot the scalar speedup; overhead rows plot the
    non-compute share of the phase total.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    series: dict[tuple[int, int], dict[int, dict[int, str]]] = {}
    for row in rows:
        p = row.point
        if isinstance(row, SpeedupRow):
            value = f"{row.speedup_scalar:.6f}"
        else:
            value = f"{1.0 - row.phases.fractions()['compute']:.6f}"
        series.setdefault((int(p.eew), p.filter_size), {}).setdefault(p.size, {})[p.lanes] = value

    kind = "speedup" if rows and isinstance(rows[0], SpeedupRow) else "overhead"
    paths = []
    for (eew, filter_size), by_size in sorted(series.items()):
        lanes = sorted({lane for values in by_size.values() for lane in values})
        table = [(size, *(by_size[size].get(lane, "") for lane in lanes)) for size in sorted(by_size)]
        path = directory / f"{kind}-e{eew}-f{filter_size}.csv"
        path.write_text(to_csv(("size", *(f"lanes_{lane}" for lane in lanes)), table))
        paths.append(path)
    return paths
