"""Trend checks of the conv-layer sweeps under the default calibration."""

import pytest

from arcane_sim.dataclasses import Eew
from arcane_sim.harness import DEFAULT_SIZES, sweep_overhead, sweep_speedup

pytestmark = pytest.mark.slow

LARGEST = DEFAULT_SIZES[-1]


@pytest.fixture(scope="module")
def overhead():
    rows = sweep_overhead(sizes=DEFAULT_SIZES, lanes_set=[4], eew=Eew.W)
    return [row.phases.fractions() for row in rows]


@pytest.fixture(scope="module")
def speedup():
    rows = sweep_speedup(sizes=[LARGEST], lanes_set=[2, 4, 8], eews=[Eew.B, Eew.W])
    return {(row.point.eew, row.point.lanes): row for row in rows}


class TestOverheadTrends:
    def test_preamble_shrinks_with_size(self, overhead):
        preamble = [fractions["preamble"] for fractions in overhead]
        assert all(b <= a for a, b in zip(preamble, preamble[1:], strict=False))
        assert preamble[-1] <= 0.05

    def test_writeback_is_small_at_the_largest_size(self, overhead):
        assert overhead[-1]["writeback"] <= 0.04

    def test_allocation_stays_bounded(self, overhead):
        assert max(fractions["allocation"] for fractions in overhead) <= 0.20

    def test_compute_dominates_at_the_largest_size(self, overhead):
        assert overhead[-1]["compute"] == max(overhead[-1].values())


class TestSpeedupTrends:
    def test_int8_eight_lanes(self, speedup):
        assert 20 <= speedup[(Eew.B, 8)].speedup_scalar <= 45

    @pytest.mark.parametrize("eew", [Eew.B, Eew.W], ids=["e8", "e32"])
    def test_more_lanes_is_faster(self, speedup, eew):
        ordered = [speedup[(eew, lanes)].speedup_scalar for lanes in (2, 4, 8)]
        assert ordered[0] <= ordered[1] <= ordered[2]

    @pytest.mark.parametrize("lanes", [2, 4, 8])
    def test_int8_beats_int32(self, speedup, lanes):
        assert speedup[(Eew.B, lanes)].speedup_scalar >= speedup[(Eew.W, lanes)].speedup_scalar

    def test_packed_simd_peak(self, speedup):
        peak = max(row.scalar_cycles / row.packed_cycles for row in speedup.values())
        assert 1 < peak <= 10

    def test_larger_filter_gains_more(self, speedup):
        (wide,) = sweep_speedup(sizes=[LARGEST], lanes_set=[8], eews=[Eew.B], filters=[7])
        assert wide.speedup_scalar > speedup[(Eew.B, 8)].speedup_scalar
