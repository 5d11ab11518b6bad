"""Exception hierarchy for the simulator.

Every error raised on purpose derives from ArcaneError so the CLI can map
failures to exit codes without catching unrelated exceptions.
"""


class ArcaneError(Exception):
    """Base class for all simulator errors."""


# --- encoding -------------------------------------------------------------


class EncodingError(ArcaneError):
    """Malformed xmnmc instruction or operand packing."""


class FieldOverflow(EncodingError):
    """A packed field does not fit in its bit width."""


class BadKernelId(EncodingError):
    """Kernel id outside 0..30 (31 is reserved for xmr)."""


class NotXmnmc(EncodingError):
    """Instruction word does not carry the xmnmc major opcode."""


class InvalidEew(EncodingError):
    """Element width code or suffix is not one of w, h, b."""


# --- memory ---------------------------------------------------------------


class MemoryAccessError(ArcaneError):
    """Illegal main-memory or cache access."""


class OutOfBounds(MemoryAccessError):
    pass


class Misaligned(MemoryAccessError):
    pass


# --- cache ----------------------------------------------------------------


class LockError(ArcaneError):
    """Cache lock protocol violation."""


class LockNotHeld(LockError):
    pass


class DoubleRelease(LockError):
    pass


class CacheError(ArcaneError):
    pass


class NoEvictableLine(CacheError):
    """Every line is reserved by a kernel."""


class AtFull(CacheError):
    """No free Address Table slot."""


# --- vpu ------------------------------------------------------------------


class VpuError(ArcaneError):
    pass


class VlTooLarge(VpuError):
    pass


class LineNotReserved(VpuError):
    """A micro-op targeted a vector register that is not reserved for computing."""


# --- runtime --------------------------------------------------------------


class RuntimeFault(ArcaneError):
    """Error raised by the cache runtime while handling a kernel."""


class CapacityExceeded(RuntimeFault):
    pass


class NotResident(RuntimeFault):
    pass


class ShapeMismatch(RuntimeFault):
    pass


class QueueFull(RuntimeFault):
    pass


class DescriptorInvalid(RuntimeFault):
    pass


class IllegalInstruction(ArcaneError):
    """An offloaded instruction was rejected by the runtime decoder."""

    def __init__(self, message: str, word: int | None = None, func5: int | None = None):
        super().__init__(message)
        self.word = word
        self.func5 = func5


class SimulationDeadlock(ArcaneError):
    """The host is stalled and the runtime has nothing left to do."""


# --- workload -------------------------------------------------------------


class WorkloadError(ArcaneError):
    pass


class ParseError(WorkloadError):
    def __init__(self, message: str, line: int = 0, column: int = 0, source: str | None = None):
        self.line = line
        self.column = column
        self.source = source
        where = f"{source or '<input>'}:{line}:{column}"
        super().__init__(f"{where}: {message}")


class ConfigInvariantViolated(WorkloadError):
    pass
