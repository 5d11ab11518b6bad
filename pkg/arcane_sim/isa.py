"""Encoder/decoder for the xmnmc matrix extension.

Word layout (custom-2 major opcode):

    31    27 26  25 24  20 19  15 14 12 11   7 6      0
    | func5 | eew  |  rs2 |  rs1 | 000 |  rs3 | 0x5b   |

Register operands are split in 16-bit halves. Kernels share one packing:

    rs1 = (alpha|stride|p0) << 16 | (beta|win_size|p1)
    rs2 = ms3 << 16 | md
    rs3 = ms1 << 16 | ms2

``xmr`` (func5 31) carries the full base address in rs1,
``stride << 16 | md`` in rs2 and ``cols << 16 | rows`` in rs3.
"""

from __future__ import annotations

import re
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from arcane_sim.dataclasses import DecodedOp, Eew, MatrixDescriptor
from arcane_sim.errors import BadKernelId, EncodingError, FieldOverflow, InvalidEew, NotXmnmc

OPCODE = 0x5B
FUNC5_XMR = 31
MAX_KERNEL_ID = 30
DEFAULT_RS = (10, 11, 12)

KERNEL_NAMES = {0: "gemm", 1: "leaky_relu", 2: "maxpool", 3: "conv2d", 4: "conv_layer3"}

# Positions in DecodedOp.halves
HALF_SLOTS = {
    "p0": 0,
    "alpha": 0,
    "stride": 0,
    "p1": 1,
    "beta": 1,
    "win_size": 1,
    "ms3": 2,
    "md": 3,
    "ms1": 4,
    "ms2": 5,
}
SIGNED_OPERANDS = frozenset({"alpha", "beta"})
REGISTER_OPERANDS = frozenset({"md", "ms1", "ms2", "ms3"})

KERNEL_OPERANDS = {
    0: ("md", "ms1", "ms2", "ms3", "alpha", "beta"),
    1: ("md", "ms1", "alpha"),
    2: ("md", "ms1", "stride", "win_size"),
    3: ("md", "ms1", "ms2"),
    4: ("md", "ms1", "ms2"),
}
GENERIC_OPERANDS = ("md", "ms1", "ms2", "ms3", "p0", "p1")


def kernel_operands(func5: int) -> tuple[str, ...]:
    return KERNEL_OPERANDS.get(func5, GENERIC_OPERANDS)


def _check_field(name: str, value: int, bits: int) -> int:
    if value < 0 or value >= 1 << bits:
        raise FieldOverflow(f"{name}={value} does not fit in {bits} bits")
    return value


def to_half(value: int) -> int:
    """Two's-complement 16-bit encoding of a signed scalar."""
    if not -0x8000 <= value <= 0xFFFF:
        raise FieldOverflow(f"{value} does not fit in a 16-bit half")
    return value & 0xFFFF


def signed_half(half: int) -> int:
    return half - 0x10000 if half & 0x8000 else half


def pack_word(func5: int, eew: Eew, rs_indices: Sequence[int] = DEFAULT_RS) -> int:
    rs1, rs2, rs3 = (_check_field(f"rs{i + 1}", r, 5) for i, r in enumerate(rs_indices))
    _check_field("func5", func5, 5)
    return (func5 << 27) | (eew.code << 25) | (rs2 << 20) | (rs1 << 15) | (rs3 << 7) | OPCODE


def encode_xmr(
    md: int, desc: MatrixDescriptor, rs_indices: Sequence[int] = DEFAULT_RS
) -> tuple[int, tuple[int, int, int]]:
    """Encode ``xmr`` binding matrix register ``md`` to ``desc``.

    Returns:
        The instruction word and the three register values.

    Raises:
        FieldOverflow: If md, stride, rows or cols exceed 16 bits, or the base exceeds 32.
    """
    _check_field("md", md, 16)
    _check_field("stride", desc.stride, 16)
    _check_field("rows", desc.rows, 16)
    _check_field("cols", desc.cols, 16)
    _check_field("base", desc.base, 32)
    regs = (desc.base, (desc.stride << 16) | md, (desc.cols << 16) | desc.rows)
    return pack_word(FUNC5_XMR, desc.eew, rs_indices), regs


def encode_xmk(
    n: int, eew: Eew, halves: Sequence[int], rs_indices: Sequence[int] = DEFAULT_RS
) -> tuple[int, tuple[int, int, int]]:
    """Encode kernel ``xmk<n>`` from six 16-bit halves (hi/lo of rs1..rs3).

    Raises:
        BadKernelId: If n is outside 0..30.
        FieldOverflow: If a half exceeds 16 bits.
    """
    if not 0 <= n <= MAX_KERNEL_ID:
        raise BadKernelId(f"Kernel id {n} outside 0..{MAX_KERNEL_ID}")
    if len(halves) != 6:
        raise EncodingError(f"Expected 6 halves, got {len(halves)}")
    h = [_check_field(f"half[{i}]", v, 16) for i, v in enumerate(halves)]
    regs = ((h[0] << 16) | h[1], (h[2] << 16) | h[3], (h[4] << 16) | h[5])
    return pack_word(n, eew, rs_indices), regs


def decode(word: int, rs1_val: int = 0, rs2_val: int = 0, rs3_val: int = 0) -> DecodedOp:
    """Split an instruction word and its operand values into a DecodedOp.

    Raises:
        NotXmnmc: If the major opcode is not 0x5b.
        InvalidEew: If the width code is the reserved value.
    """
    if word & 0x7F != OPCODE:
        raise NotXmnmc(f"Opcode {word & 0x7F:#04x} is not xmnmc")
    return DecodedOp(
        func5=(word >> 27) & 0x1F,
        eew=Eew.from_code((word >> 25) & 0b11),
        rs1_val=rs1_val & 0xFFFFFFFF,
        rs2_val=rs2_val & 0xFFFFFFFF,
        rs3_val=rs3_val & 0xFFFFFFFF,
        rs1_idx=(word >> 15) & 0x1F,
        rs2_idx=(word >> 20) & 0x1F,
        rs3_idx=(word >> 7) & 0x1F,
    )


def to_bytes(word: int) -> bytes:
    return struct.pack("<I", word)


def from_bytes(data: bytes) -> int:
    return struct.unpack("<I", data[:4])[0]


def xmr_descriptor(op: DecodedOp) -> tuple[int, MatrixDescriptor]:
    """Matrix register index and descriptor carried by a decoded ``xmr``."""
    desc = MatrixDescriptor(base=op.rs1_val, stride=op.rs2_hi, rows=op.rs3_lo, cols=op.rs3_hi, eew=op.eew)
    return op.rs2_lo, desc


# --- assembly ---------------------------------------------------------------

_MNEMONIC = re.compile(r"^(xmr|xmk(\d+))\.([a-z]+)$")
_MATRIX_REG = re.compile(r"^m(\d+)$")


@dataclass(slots=True, frozen=True)
class AsmInstruction:
    """A parsed xmnmc assembly line, ready to offload."""

    text: str
    word: int
    regs: tuple[int, int, int]

    def decoded(self) -> DecodedOp:
        return decode(self.word, *self.regs)


def _parse_int(token: str, symbols: Mapping[str, int] | None = None) -> int:
    if symbols and token in symbols:
        return symbols[token]
    try:
        return int(token, 0)
    except ValueError:
        raise EncodingError(f"Expected a number or known symbol, got {token!r}") from None


def _parse_register(token: str) -> int:
    match = _MATRIX_REG.match(token)
    if not match:
        raise EncodingError(f"Expected a matrix register (m0, m1, ...), got {token!r}")
    return int(match.group(1))


def assemble(line: str, symbols: Mapping[str, int] | None = None, rs_indices: Sequence[int] = DEFAULT_RS):
    """Assemble one line such as ``xmr.w m0, A, 8, 8, 8`` or ``xmk4.w m2, m0, m1``.

    Symbols map matrix names to base addresses. Trailing kernel operands may
    be omitted and encode as zero.

    Raises:
        EncodingError: On unknown mnemonics, bad operands or field overflow.
    """
    text = line.strip()
    head, _, tail = text.partition(" ")
    match = _MNEMONIC.match(head.strip().lower())
    if not match:
        raise EncodingError(f"Unknown mnemonic {head!r}")
    try:
        eew = Eew.parse(match.group(3))
    except InvalidEew as e:
        raise EncodingError(str(e)) from None
    operands = [tok.strip() for tok in tail.split(",")] if tail.strip() else []

    if match.group(1) == "xmr":
        if len(operands) != 5:
            raise EncodingError("xmr takes md, address, stride, rows, cols")
        md = _parse_register(operands[0])
        base, stride, rows, cols = (_parse_int(tok, symbols) for tok in operands[1:])
        word, regs = encode_xmr(md, MatrixDescriptor(base, stride, rows, cols, eew), rs_indices)
        return AsmInstruction(text, word, regs)

    func5 = int(match.group(2))
    names = kernel_operands(func5)
    if len(operands) > len(names):
        raise EncodingError(f"xmk{func5} takes at most {len(names)} operands: {', '.join(names)}")
    halves = [0] * 6
    for name, token in zip(names, operands, strict=False):
        if name in REGISTER_OPERANDS:
            value = _parse_register(token)
        else:
            value = _parse_int(token, symbols)
            value = to_half(value) if name in SIGNED_OPERANDS else value
        halves[HALF_SLOTS[name]] = value
    word, regs = encode_xmk(func5, eew, halves, rs_indices)
    return AsmInstruction(text, word, regs)


def disassemble(op: DecodedOp) -> str:
    """Render a decoded op in the assembly syntax accepted by ``assemble``."""
    if op.is_xmr:
        md, desc = xmr_descriptor(op)
        return f"xmr.{op.eew.suffix} m{md}, {desc.base:#x}, {desc.stride}, {desc.rows}, {desc.cols}"
    names = kernel_operands(op.func5)
    halves = op.halves
    rendered = []
    for name in names:
        value = halves[HALF_SLOTS[name]]
        if name in REGISTER_OPERANDS:
            rendered.append(f"m{value}")
        elif name in SIGNED_OPERANDS:
            rendered.append(str(signed_half(value)))
        else:
            rendered.append(str(value))
    return f"xmk{op.func5}.{op.eew.suffix} " + ", ".join(rendered)
