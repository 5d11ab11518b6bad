"""Scalar brute-force kernels and a serial executor used as test oracles.

Everything here works on plain Python integers so it shares no code path
with the vectorised simulator.
"""

from arcane_sim import isa
from arcane_sim.dataclasses import Eew, MatrixDescriptor
from arcane_sim.host import Barrier, HostProgram, Load, MatrixImage, Offload, Store


def wrap(value, eew):
    bits = int(eew)
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >= 1 << (bits - 1) else value


def as_lists(matrix):
    return [[int(v) for v in row] for row in matrix]


def ref_gemm(a, b, c, alpha, beta, eew):
    a, b, c = as_lists(a), as_lists(b), as_lists(c)
    rows, depth, cols = len(a), len(b), len(b[0])
    out = []
    for i in range(rows):
        row = []
        for j in range(cols):
            acc = sum(a[i][k] * b[k][j] for k in range(depth))
            row.append(wrap(alpha * acc + beta * c[i][j], eew))
        out.append(row)
    return out


def ref_leaky_relu(x, alpha, eew):
    return [[v if v >= 0 else wrap(alpha * v, eew) for v in row] for row in as_lists(x)]


def ref_maxpool(x, stride, window, eew):
    x = as_lists(x)
    out_rows = (len(x) - window) // stride + 1
    out_cols = (len(x[0]) - window) // stride + 1
    return [
        [
            max(x[o * stride + di][p * stride + dj] for di in range(window) for dj in range(window))
            for p in range(out_cols)
        ]
        for o in range(out_rows)
    ]


def ref_conv2d(x, f, eew):
    x, f = as_lists(x), as_lists(f)
    kh, kw = len(f), len(f[0])
    out_rows, out_cols = len(x) - kh + 1, len(x[0]) - kw + 1
    return [
        [
            wrap(sum(x[i + di][j + dj] * f[di][dj] for di in range(kh) for dj in range(kw)), eew)
            for j in range(out_cols)
        ]
        for i in range(out_rows)
    ]


def ref_conv_layer3(x, f, eew):
    x, f = as_lists(x), as_lists(f)
    height, kh = len(x) // 3, len(f) // 3
    channels = [x[c * height : (c + 1) * height] for c in range(3)]
    filters = [f[c * kh : (c + 1) * kh] for c in range(3)]
    convs = [ref_conv2d(channels[c], filters[c], eew) for c in range(3)]
    summed = [[wrap(convs[0][i][j] + convs[1][i][j] + convs[2][i][j], eew) for j in range(len(convs[0][0]))]
              for i in range(len(convs[0]))]
    pooled = ref_maxpool(summed, 2, 2, eew)
    return [[max(v, 0) for v in row] for row in pooled]


def reference(func5, eew, operands, params):
    """Dispatch to the oracle of a built-in kernel."""
    if func5 == 0:
        return ref_gemm(operands["ms1"], operands["ms2"], operands["ms3"], params["alpha"], params["beta"], eew)
    if func5 == 1:
        return ref_leaky_relu(operands["ms1"], params["alpha"], eew)
    if func5 == 2:
        return ref_maxpool(operands["ms1"], params["stride"], params["win_size"], eew)
    if func5 == 3:
        return ref_conv2d(operands["ms1"], operands["ms2"], eew)
    return ref_conv_layer3(operands["ms1"], operands["ms2"], eew)


def output_shape(func5, operands, params):
    ms1 = operands["ms1"]
    if func5 == 0:
        return len(ms1), len(operands["ms2"][0])
    if func5 == 1:
        return len(ms1), len(ms1[0])
    if func5 == 2:
        stride, window = params["stride"], params["win_size"]
        return (len(ms1) - window) // stride + 1, (len(ms1[0]) - window) // stride + 1
    kh, kw = len(operands["ms2"]), len(operands["ms2"][0])
    if func5 == 3:
        return len(ms1) - kh + 1, len(ms1[0]) - kw + 1
    return (len(ms1) // 3 - kh // 3 + 1) // 2, (len(ms1[0]) - kw + 1) // 2


def random_case(func5, eew, rng):
    """Random operands and parameters for a built-in kernel, kept small."""
    lo, hi = -(1 << (int(eew) - 1)), 1 << (int(eew) - 1)

    def matrix(rows, cols):
        return rng.integers(lo, hi, size=(rows, cols), dtype="int64")

    params = {}
    if func5 == 0:
        rows, depth, cols = (int(v) for v in rng.integers(1, 7, size=3))
        operands = {"ms1": matrix(rows, depth), "ms2": matrix(depth, cols), "ms3": matrix(rows, cols)}
        params = {"alpha": int(rng.integers(-8, 9)), "beta": int(rng.integers(-8, 9))}
    elif func5 == 1:
        operands = {"ms1": matrix(*(int(v) for v in rng.integers(1, 9, size=2)))}
        params = {"alpha": int(rng.integers(-4, 5))}
    elif func5 == 2:
        window, stride = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        rows, cols = (int(v) for v in rng.integers(window, window + 7, size=2))
        operands = {"ms1": matrix(rows, cols)}
        params = {"stride": stride, "win_size": window}
    elif func5 == 3:
        kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
        rows, cols = int(rng.integers(kh, kh + 6)), int(rng.integers(kw, kw + 6))
        operands = {"ms1": matrix(rows, cols), "ms2": matrix(kh, kw)}
    else:
        k = int(rng.integers(1, 4))
        height, width = int(rng.integers(k + 1, k + 7)), int(rng.integers(k + 1, k + 7))
        operands = {"ms1": matrix(3 * height, width), "ms2": matrix(3 * k, k)}
    return operands, params


def kernel_program(func5, eew, operands, params, base=0x1000, spacing=0x1000):
    """A program binding m0.. to the operands, m7 to the result, then offloading one kernel."""
    program = HostProgram(name=f"xmk{func5}")
    registers = {}
    for index, (role, values) in enumerate(sorted(operands.items())):
        desc = MatrixDescriptor(base + index * spacing, len(values[0]), len(values), len(values[0]), Eew(eew))
        program.images.append(MatrixImage(role, desc, values))
        registers[role] = index
    rows, cols = output_shape(func5, operands, params)
    dest = MatrixDescriptor(base + len(operands) * spacing, cols, rows, cols, Eew(eew))
    registers["md"] = 7
    for role, index in registers.items():
        desc = dest if role == "md" else program.images[index].descriptor
        word, regs = isa.encode_xmr(index, desc)
        program.events.append(Offload(word, regs, f"xmr {role}"))
    halves = [0] * 6
    for role, index in registers.items():
        halves[isa.HALF_SLOTS[role]] = index
    for name, value in params.items():
        halves[isa.HALF_SLOTS[name]] = isa.to_half(value)
    word, regs = isa.encode_xmk(func5, Eew(eew), halves)
    program.events.append(Offload(word, regs, f"xmk{func5}"))
    program.events.append(Barrier())
    return program, dest


class SerialMachine:
    """Executes a host program one event at a time with atomic kernels.

    Memory is a dict of byte values; kernels read their operands, compute
    with the scalar references and write the result before the next event.
    """

    def __init__(self):
        self.memory = {}
        self.registers = {}
        self.loads = []

    def write_matrix(self, desc, values):
        for r, row in enumerate(as_lists(values)):
            for c, value in enumerate(row):
                self.store(desc.row_address(r) + c * desc.elem_bytes, desc.elem_bytes, value)

    def read_matrix(self, desc):
        return [
            [
                wrap(self.load(desc.row_address(r) + c * desc.elem_bytes, desc.elem_bytes), desc.eew)
                for c in range(desc.cols)
            ]
            for r in range(desc.rows)
        ]

    def store(self, addr, width, value):
        raw = value & ((1 << (8 * width)) - 1)
        for i in range(width):
            self.memory[addr + i] = (raw >> (8 * i)) & 0xFF

    def load(self, addr, width):
        return sum(self.memory.get(addr + i, 0) << (8 * i) for i in range(width))

    def run(self, program):
        for image in program.images:
            self.write_matrix(image.descriptor, image.values)
        for event in program.events:
            if isinstance(event, Store):
                self.store(event.addr, event.width, event.value)
            elif isinstance(event, Load):
                self.loads.append((event.addr, event.width, self.load(event.addr, event.width)))
            elif isinstance(event, Offload):
                self._offload(event)

    def _offload(self, event):
        op = isa.decode(event.word, *event.regs)
        if op.is_xmr:
            md, desc = isa.xmr_descriptor(op)
            self.registers[md] = desc
            return
        roles = [name for name in isa.kernel_operands(op.func5) if name in isa.REGISTER_OPERANDS]
        halves = op.halves
        descs = {role: self.registers[halves[isa.HALF_SLOTS[role]]] for role in roles}
        operands = {role: self.read_matrix(desc) for role, desc in descs.items() if role != "md"}
        params = {}
        for name in isa.kernel_operands(op.func5):
            if name not in isa.REGISTER_OPERANDS:
                raw = halves[isa.HALF_SLOTS[name]]
                params[name] = isa.signed_half(raw) if name in isa.SIGNED_OPERANDS else raw
        self.write_matrix(descs["md"], reference(op.func5, op.eew, operands, params))


def xmr_op(md, desc):
    """Decoded ``xmr`` binding register ``md`` to ``desc``."""
    word, regs = isa.encode_xmr(md, desc)
    return isa.decode(word, *regs)


def xmk_encoding(func5, eew=Eew.W, **fields):
    """Word and register values of ``xmkN`` with operand and parameter fields given by name."""
    halves = [0] * 6
    for name, value in fields.items():
        halves[isa.HALF_SLOTS[name]] = isa.to_half(value)
    return isa.encode_xmk(func5, eew, halves)


def xmk_op(func5, eew=Eew.W, **fields):
    return isa.decode(*_flat(xmk_encoding(func5, eew, **fields)))


def _flat(encoded):
    word, regs = encoded
    return (word, *regs)
