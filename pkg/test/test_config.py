"""Tests for SimConfig defaults, overrides and invariants."""

import os
from unittest import mock

import pytest

from arcane_sim.config import SimConfig
from arcane_sim.errors import ConfigInvariantViolated


class TestDefaults:
    def test_synthesized_system(self):
        config = SimConfig()
        assert (config.num_vpus, config.vregs_per_vpu, config.line_bytes) == (4, 32, 1024)
        assert config.capacity_bytes == 128 * 1024
        assert config.validate() is config

    def test_label(self):
        assert SimConfig(num_vpus=2, lanes=8).label() == "v2x32x1024-l8"

    def test_region_defaults_to_memory(self):
        config = SimConfig(memory_size=1 << 20, data_base=4096)
        assert config.region_size == (1 << 20) - 4096


class TestOverrides:
    def test_strings_are_coerced(self):
        config = SimConfig().with_overrides({"LANES": "8", "line_bytes": "0x400", "simd_efficiency": "0.5"})
        assert (config.lanes, config.line_bytes, config.simd_efficiency) == (8, 1024, 0.5)

    def test_data_size_none(self):
        assert SimConfig(data_size=4096).with_overrides({"data_size": "none"}).data_size is None

    @pytest.mark.parametrize(
        "overrides",
        [
            {"lanes": "3"},
            {"line_bytes": "1000"},
            {"num_vpus": "0"},
            {"decode_cycles": "-1"},
            {"simd_efficiency": "1.5"},
            {"data_base": "100"},
            {"data_size": "0x2000000"},
            {"vregs": "4"},
            {"lanes": "many"},
        ],
        ids=["lanes", "line-size", "vpus", "decode", "simd", "base-alignment", "region", "unknown", "not-a-number"],
    )
    def test_rejected(self, overrides):
        with pytest.raises(ConfigInvariantViolated):
            SimConfig().with_overrides(overrides)


class TestFromEnv:
    def test_reads_prefixed_variables(self):
        with mock.patch.dict(os.environ, {"ARCANE_NUM_VPUS": "2", "ARCANE_DECODE_CYCLES": "80"}):
            config = SimConfig.from_env()
        assert (config.num_vpus, config.decode_cycles) == (2, 80)

    def test_keeps_base(self):
        with mock.patch.dict(os.environ, {"ARCANE_LANES": "2"}):
            config = SimConfig.from_env(SimConfig(num_vpus=1))
        assert (config.num_vpus, config.lanes) == (1, 2)

    def test_invalid_value(self):
        with mock.patch.dict(os.environ, {"ARCANE_LANES": "16"}):
            with pytest.raises(ConfigInvariantViolated):
                SimConfig.from_env()
