"""Tests for workload parsing, seeded data and the conv-layer sweeps."""

from pathlib import Path

import numpy as np
import pytest

from arcane_sim.config import SimConfig
from arcane_sim.dataclasses import PHASES, Eew, ExecutionReport
from arcane_sim.errors import ConfigInvariantViolated, ParseError, WorkloadError
from arcane_sim.harness import (
    LCG_INCREMENT,
    LCG_MULTIPLIER,
    Lcg64,
    OverheadRow,
    SpeedupRow,
    conv_layer_program,
    load_config,
    load_workload,
    parse_workload,
    random_matrix,
    reports_csv,
    rows_csv,
    sweep_overhead,
    sweep_speedup,
    write_plot_data,
)
from arcane_sim.host import Barrier, Busy, Load, Offload, Store
from arcane_sim.kernels import LeakyRelu
from arcane_sim.simulator import Simulator
from test.data import reference as ref

LISTING = Path(__file__).parent / "data" / "listing1.wl"


class TestLcg:
    def test_first_draw(self):
        assert Lcg64(1).next() == (LCG_MULTIPLIER + LCG_INCREMENT) % 2**64

    def test_bits_keep_the_top_of_the_state(self):
        lcg, twin = Lcg64(9), Lcg64(9)
        assert lcg.bits(8) == twin.next() >> 56

    def test_random_matrix_is_reproducible(self):
        first = random_matrix(4, 5, Eew.B, seed=3)
        np.testing.assert_array_equal(first, random_matrix(4, 5, Eew.B, seed=3))
        assert first.dtype == np.int8
        assert not np.array_equal(first, random_matrix(4, 5, Eew.B, seed=4))


class TestListing:
    """The three-channel convolution example from the ISA documentation."""

    @pytest.fixture
    def workload(self):
        return load_workload(LISTING)

    def test_parses_to_four_events(self, workload):
        _, program = workload
        assert len(program.events) == 4
        assert all(isinstance(event, Offload) for event in program.events)
        assert program.name == "listing1"
        assert program.symbols == {"A": 0x10000, "F": 0x20000, "R": 0x30000}

    def test_default_lanes(self, workload):
        config, _ = workload
        assert config.lanes == 4

    def test_runs_to_the_reference_result(self, workload):
        config, program = workload
        sim = Simulator(config)
        report = sim.run(program)

        images = {image.name: image for image in program.images}
        expected = ref.ref_conv_layer3(images["A"].values, images["F"].values, Eew.W)
        assert sim.read_matrix(images["R"].descriptor).tolist() == expected
        assert report.kernels == 1


class TestParseWorkload:
    def test_config_section(self):
        config, _ = parse_workload("[config]\nlanes = 8\nat_capacity = 0x20\n")
        assert (config.lanes, config.at_capacity) == (8, 32)

    def test_base_config_is_kept(self):
        config, _ = parse_workload("[config]\nlanes = 2\n", base=SimConfig(num_vpus=2))
        assert (config.num_vpus, config.lanes) == (2, 2)

    def test_bad_lane_count(self):
        with pytest.raises(ConfigInvariantViolated):
            parse_workload("[config]\nlanes = 3\n")

    def test_empty_matrix(self):
        with pytest.raises(ConfigInvariantViolated):
            parse_workload("[data]\nmatrix A 0x1000 0 4 w literal\n")

    def test_host_events_with_symbols(self):
        text = "[data]\nmatrix A 0x1000 1 4 w literal 1 2 3 4\n[program]\nstore A+8 4 -1\nload A 2\nbusy 100\nbarrier\n"
        _, program = parse_workload(text)
        assert program.events == [Store(0x1008, 4, -1), Load(0x1000, 2), Busy(100), Barrier()]

    def test_program_is_the_default_section(self):
        _, program = parse_workload("busy 5  # wait\n")
        assert program.events == [Busy(5)]

    def test_literal_values(self):
        _, program = parse_workload("[data]\nmatrix M 0x40 2 2 h literal 1 -2 0x7fff 4\n")
        image = program.images[0]
        assert image.values.tolist() == [[1, -2], [0x7FFF, 4]]
        assert (image.descriptor.stride, image.descriptor.eew) == (2, Eew.H)

    def test_matrix_from_file(self, tmp_path):
        (tmp_path / "m.bin").write_bytes(np.array([[1, -1], [2, -2]], dtype="<i2").tobytes())
        (tmp_path / "w.wl").write_text("[data]\nmatrix M 0x100 2 2 h file=m.bin\n")
        _, program = load_workload(tmp_path / "w.wl")
        assert program.images[0].values.tolist() == [[1, -1], [2, -2]]

    def test_custom_kernel(self):
        text = (
            "[kernels]\n5 = arcane_sim.kernels:LeakyRelu\n"
            "[data]\nmatrix X 0x1000 1 2 w literal -3 4\nmatrix Y 0x2000 1 2 w literal 0 0\n"
            "[program]\nxmr.w m0, X, 2, 1, 2\nxmr.w m1, Y, 2, 1, 2\nxmk5.w m1, m0, m0, m0, 3\nbarrier\n"
        )
        config, program = parse_workload(text)
        assert isinstance(program.kernels[5], LeakyRelu)

        sim = Simulator(config.with_overrides({"memory_size": 1 << 20}))
        sim.run(program)
        assert sim.read_matrix(program.images[1].descriptor).tolist() == [[-9, 4]]


class TestParseErrors:
    @pytest.mark.parametrize(
        ("text", "line", "column"),
        [
            ("[program]\nload 0x10 zz\n", 2, 11),
            ("\n  busy x\n", 2, 8),
            ("[nope]\n", 1, 1),
            ("[config\n", 1, 1),
            ("[config]\nlanes 8\n", 2, 1),
            ("[program]\nbarrier now\n", 2, 1),
            ("[program]\nxmk1.q m0, m1\n", 2, 1),
            ("[data]\nmatrix A 0x10 2 2 w literal 1 2 3\n", 2, 1),
            ("[data]\nmatrix A 0x10 2 2 w poisson\n", 2, 1),
            ("[kernels]\n5 = no.such.module:Thing\n", 2, 1),
            ("[kernels]\n31 = arcane_sim.kernels:Gemm\n", 2, 1),
        ],
    )
    def test_position(self, text, line, column):
        with pytest.raises(ParseError) as exc:
            parse_workload(text, source="bad.wl")
        assert (exc.value.line, exc.value.column) == (line, column)
        assert str(exc.value).startswith(f"bad.wl:{line}:{column}:")

    def test_duplicate_matrix(self):
        with pytest.raises(ParseError):
            parse_workload("[data]\nmatrix A 0 1 1 w literal 0\nmatrix A 64 1 1 w literal 0\n")

    def test_missing_file(self, tmp_path):
        (tmp_path / "w.wl").write_text("[data]\nmatrix M 0x100 2 2 h file=absent.bin\n")
        with pytest.raises(ParseError):
            load_workload(tmp_path / "w.wl")


class TestLoadConfig:
    def test_reads_only_config(self, tmp_path):
        path = tmp_path / "sys.cfg"
        path.write_text("[config]\nnum_vpus = 2\nlanes = 8\n[program]\nthis is ignored\n")
        config = load_config(path)
        assert (config.num_vpus, config.lanes) == (2, 8)


class TestConvLayerProgram:
    def test_layout(self):
        program = conv_layer_program(16, 3, Eew.W, SimConfig())
        assert len(program.events) == 4
        a, f, r = (image.descriptor for image in program.images)
        assert (a.rows, a.cols) == (48, 16)
        assert (f.rows, f.cols) == (9, 3)
        assert (r.rows, r.cols) == (7, 7)
        assert f.base % 4096 == 0 and r.base % 4096 == 0
        assert f.base > a.end and r.base > f.end

    def test_too_small(self):
        with pytest.raises(WorkloadError):
            conv_layer_program(3, 3, Eew.W, SimConfig())

    def test_does_not_fit_memory(self):
        with pytest.raises(WorkloadError):
            conv_layer_program(256, 3, Eew.W, SimConfig(memory_size=256 * 1024))


class TestSweeps:
    def test_sizes_must_ascend(self):
        with pytest.raises(WorkloadError):
            sweep_overhead(sizes=[16, 8])

    def test_overhead_rows(self):
        rows = sweep_overhead(sizes=[8, 16], lanes_set=[4])
        assert [(row.point.size, row.point.lanes) for row in rows] == [(8, 4), (16, 4)]
        for row in rows:
            assert sum(row.phases.fractions().values()) == pytest.approx(1.0, abs=1e-9)
            assert row.phases.total <= row.total_cycles

        header = rows_csv(rows).splitlines()[0].split(",")
        assert header == list(OverheadRow.CSV_COLUMNS)
        assert [f"{phase}_frac" for phase in PHASES] == header[-4:]

    def test_speedup_rows(self):
        rows = sweep_speedup(sizes=[8], lanes_set=[2, 8], eews=[Eew.W])
        assert len(rows) == 2
        assert all(isinstance(row, SpeedupRow) for row in rows)
        assert rows[1].arcane_cycles <= rows[0].arcane_cycles
        assert rows[0].speedup_scalar == rows[0].scalar_cycles / rows[0].arcane_cycles

    def test_csv_is_deterministic(self):
        first = rows_csv(sweep_speedup(sizes=[8, 16], lanes_set=[4], eews=[Eew.B]))
        second = rows_csv(sweep_speedup(sizes=[8, 16], lanes_set=[4], eews=[Eew.B]))
        assert first == second

    def test_plot_data(self, tmp_path):
        rows = sweep_speedup(sizes=[8, 16], lanes_set=[2, 4], eews=[Eew.W])
        (path,) = write_plot_data(rows, tmp_path)
        assert path.name == "speedup-e32-f3.csv"
        lines = path.read_text().splitlines()
        assert lines[0] == "size,lanes_2,lanes_4"
        assert [line.split(",")[0] for line in lines[1:]] == ["8", "16"]

    def test_reports_csv(self):
        report = ExecutionReport(workload="w", config="c", total_cycles=10)
        assert reports_csv([report]).splitlines() == [",".join(ExecutionReport.CSV_COLUMNS), "w,c,10,0,0,0,0,0,0"]
