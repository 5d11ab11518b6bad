import numpy as np
import pytest

from arcane_sim.dataclasses import PHASES, Eew, ExecutionReport, MatrixDescriptor, PhaseBreakdown
from arcane_sim.errors import DescriptorInvalid, InvalidEew


class TestEew:
    """Test element widths and their encodings."""

    @pytest.mark.parametrize(("text", "expected"), [("w", Eew.W), ("H", Eew.H), ("8", Eew.B), (16, Eew.H)])
    def test_parse(self, text, expected):
        """Test parsing suffixes and bit widths."""
        assert Eew.parse(text) is expected

    @pytest.mark.parametrize("text", ["q", "64", "", 7])
    def test_parse_rejects(self, text):
        """Test unsupported widths raise InvalidEew."""
        with pytest.raises(InvalidEew):
            Eew.parse(text)

    def test_codes_round_trip(self):
        """Test every width maps to a distinct two-bit code."""
        assert {eew.code for eew in Eew} == {0b00, 0b01, 0b10}
        assert all(Eew.from_code(eew.code) is eew for eew in Eew)

    def test_reserved_code(self):
        with pytest.raises(InvalidEew):
            Eew.from_code(0b11)

    def test_dtypes(self):
        assert Eew.B.dtype == np.int8
        assert Eew.H.unsigned_dtype == np.uint16
        assert (Eew.W.nbytes, Eew.W.suffix) == (4, "w")


class TestMatrixDescriptor:
    """Test matrix descriptors as bound by xmr."""

    @pytest.fixture
    def desc(self):
        """A 3x4 int16 matrix with two padding elements per row."""
        return MatrixDescriptor(base=0x1000, stride=6, rows=3, cols=4, eew=Eew.H)

    def test_geometry(self, desc):
        """Test byte sizes derived from the shape."""
        assert (desc.row_bytes, desc.stride_bytes) == (8, 12)
        assert desc.extent_bytes == 2 * 12 + 8
        assert desc.end == 0x1000 + 32 - 1
        assert desc.row_address(2) == 0x1018

    def test_overlaps(self, desc):
        """Test overlap uses inclusive byte bounds."""
        assert desc.overlaps(MatrixDescriptor(desc.end, 1, 1, 1, Eew.B))
        assert not desc.overlaps(MatrixDescriptor(desc.end + 1, 1, 1, 1, Eew.B))

    @pytest.mark.parametrize(
        "bad",
        [
            MatrixDescriptor(0, 4, 0, 4),
            MatrixDescriptor(0, 4, 4, 0),
            MatrixDescriptor(0, 3, 2, 4),
            MatrixDescriptor(0xFFFF_FFF0, 4, 2, 4),
        ],
        ids=["no-rows", "no-cols", "stride", "wraps"],
    )
    def test_validate(self, bad):
        """Test inconsistent descriptors are rejected."""
        with pytest.raises(DescriptorInvalid):
            bad.validate()

    def test_from_dict(self, desc):
        """Test building a descriptor from a mapping."""
        assert MatrixDescriptor.from_dict(desc.to_dict()) == desc
        assert MatrixDescriptor.from_dict({"base": "16", "stride": 2, "rows": 1, "cols": 2}).eew is Eew.W


class TestPhaseBreakdown:
    def test_fractions_sum_to_one(self):
        phases = PhaseBreakdown(preamble=3, allocation=10, compute=80, writeback=7)
        assert phases.total == 100
        assert phases.fractions()["compute"] == 0.8
        assert sum(phases.fractions().values()) == pytest.approx(1.0)

    def test_empty(self):
        """Test fractions of an empty breakdown are all zero."""
        assert PhaseBreakdown().fractions() == dict.fromkeys(PHASES, 0.0)

    def test_add(self):
        phases = PhaseBreakdown()
        phases.add("allocation", 5)
        phases.add("allocation", 2)
        assert phases.to_dict() == {"preamble": 0, "allocation": 7, "compute": 0, "writeback": 0}


class TestExecutionReport:
    def test_to_dict(self):
        """Test the CSV view reads phase cycles through the breakdown."""
        report = ExecutionReport(workload="w", config="c", total_cycles=120, phases=PhaseBreakdown(compute=90))
        row = report.to_dict()
        assert list(row) == list(ExecutionReport.CSV_COLUMNS)
        assert (row["compute"], row["total_cycles"], row["host_stall"]) == (90, 120, 0)
