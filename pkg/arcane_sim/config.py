"""Simulator configuration.

Defaults reproduce the synthesized system: 4 VPUs x 32 vector registers x
1 KiB lines (128 KiB of cache). Any field can be overridden with an
``ARCANE_<FIELD>`` environment variable, a ``--config`` file or the
``[config]`` section of a workload.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from typing import Any

from arcane_sim.errors import ConfigInvariantViolated
from arcane_sim.logging_config import get_logger

logger = get_logger(__name__)

ENV_PREFIX = "ARCANE_"
VALID_LANES = (2, 4, 8)


@dataclass(slots=True, frozen=True)
class SimConfig:
    """Every tunable of the simulated system, cycle costs included."""

    num_vpus: int = 4
    vregs_per_vpu: int = 32
    line_bytes: int = 1024
    lanes: int = 4
    at_capacity: int = 16
    queue_depth: int = 8
    matrix_registers: int = 16

    # timing
    dma_setup: int = 10
    row_setup: int = 4
    bus_bytes: int = 4
    issue: int = 3
    decode_cycles: int = 50
    bridge_cycles: int = 2

    # analytic baselines
    cpi_scalar_mac: int = 8
    simd_efficiency: float = 0.7

    memory_size: int = 16 * 1024 * 1024
    data_base: int = 0
    data_size: int | None = None

    @property
    def total_lines(self) -> int:
        return self.num_vpus * self.vregs_per_vpu

    @property
    def capacity_bytes(self) -> int:
        return self.total_lines * self.line_bytes

    @property
    def region_size(self) -> int:
        """Size of the cacheable data region (defaults to all of memory above data_base)."""
        return self.data_size if self.data_size is not None else self.memory_size - self.data_base

    def validate(self) -> SimConfig:
        """Check the configuration invariants.

        Returns:
            self, so calls can be chained.

        Raises:
            ConfigInvariantViolated: On the first violated invariant.
        """
        if self.lanes not in VALID_LANES:
            raise ConfigInvariantViolated(f"lanes must be one of {VALID_LANES}, got {self.lanes}")
        for name in (
            "num_vpus",
            "vregs_per_vpu",
            "line_bytes",
            "at_capacity",
            "queue_depth",
            "matrix_registers",
            "bus_bytes",
            "memory_size",
        ):
            if getattr(self, name) < 1:
                raise ConfigInvariantViolated(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("dma_setup", "row_setup", "issue", "decode_cycles", "bridge_cycles", "cpi_scalar_mac"):
            if getattr(self, name) < 0:
                raise ConfigInvariantViolated(f"{name} must not be negative, got {getattr(self, name)}")
        if self.line_bytes & (self.line_bytes - 1) or self.line_bytes < 4:
            raise ConfigInvariantViolated(f"line_bytes must be a power of two >= 4, got {self.line_bytes}")
        if not 0 < self.simd_efficiency <= 1:
            raise ConfigInvariantViolated(f"simd_efficiency must be in (0, 1], got {self.simd_efficiency}")
        if self.matrix_registers > 0xFFFF:
            raise ConfigInvariantViolated("matrix_registers must fit in a 16-bit field")
        if self.data_base < 0 or self.data_base % self.line_bytes:
            raise ConfigInvariantViolated("data_base must be a non-negative multiple of line_bytes")
        if self.region_size < 1 or self.data_base + self.region_size > self.memory_size:
            raise ConfigInvariantViolated("data region must lie inside main memory")
        if self.region_size % self.line_bytes:
            raise ConfigInvariantViolated("data region size must be a multiple of line_bytes")
        return self

    def with_overrides(self, overrides: dict[str, Any]) -> SimConfig:
        """Return a copy with fields replaced from a key/value mapping.

        String values are converted to the field's type, so the mapping can
        come straight from a config file.

        Raises:
            ConfigInvariantViolated: On unknown keys, unparsable values or a
                resulting configuration that violates an invariant.
        """
        fields = {f.name: f for f in dataclasses.fields(self)}
        changes = {}
        for key, raw in overrides.items():
            name = key.strip().lower()
            if name not in fields:
                raise ConfigInvariantViolated(f"Unknown config key: {key}")
            changes[name] = _coerce(name, raw)
        return dataclasses.replace(self, **changes).validate()

    @classmethod
    def from_env(cls, base: SimConfig | None = None) -> SimConfig:
        """Build a config from ARCANE_<FIELD> environment variables."""
        base = base or cls()
        overrides = {}
        for field in dataclasses.fields(cls):
            value = os.getenv(f"{ENV_PREFIX}{field.name.upper()}")
            if value is not None:
                overrides[field.name] = value
        if overrides:
            logger.debug(f"Config overrides from environment: {sorted(overrides)}")
        return base.with_overrides(overrides)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def label(self) -> str:
        """Compact identifier used in the ``config`` column of report CSVs."""
        return f"v{self.num_vpus}x{self.vregs_per_vpu}x{self.line_bytes}-l{self.lanes}"


def _coerce(name: str, raw: Any) -> Any:
    if raw is None or not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if name == "simd_efficiency":
            return float(text)
        if name == "data_size" and text.lower() in ("", "none"):
            return None
        return int(text, 0)
    except ValueError:
        raise ConfigInvariantViolated(f"Invalid value for {name}: {raw!r}") from None
