"""Kernel library: vector lowerings of the built-in ``xmkN`` kernels.

Every kernel declares its source operand roles, validates shapes at decode
time, reports the register groups one band of output rows needs and runs as
a generator of micro-op slices. Output rows are produced band by band when
the whole result does not fit the VPU's free registers.

Register groups are named after operand roles ("ms1", "md", ...) or after
scratch registers ("acc", "tap", "wt", ...).
"""

from __future__ import annotations

from collections.abc import Iterator

from arcane_sim.errors import ShapeMismatch
from arcane_sim.logging_config import get_logger
from arcane_sim.runtime import KernelContext, KernelLibrary, KernelRequest, Slice, vregs_for
from arcane_sim.vpu import MicroOpKind

logger = get_logger(__name__)


class Kernel:
    """Base class for library kernels."""

    name = "kernel"
    sources: tuple[str, ...] = ("ms1",)

    def check(self, request: KernelRequest) -> None:
        for role in (*self.sources, "md"):
            desc = request.desc(role)
            if desc.eew is not request.eew:
                raise ShapeMismatch(
                    f"{role} holds {int(desc.eew)}-bit elements but the kernel runs at {int(request.eew)} bits"
                )
        self.check_shapes(request)

    def check_shapes(self, request: KernelRequest) -> None:
        raise NotImplementedError

    def output_rows(self, request: KernelRequest) -> int:
        return request.desc("md").rows

    def footprint(
        self, request: KernelRequest, band: int, line_bytes: int, resident: set[str]
    ) -> list[tuple[str, int]]:
        raise NotImplementedError

    def run(self, ctx: KernelContext) -> Iterator[Slice]:
        raise NotImplementedError

    def _window(self, request, role, rows, line_bytes, resident) -> tuple[str, int]:
        if role in resident:
            return role, 0
        return role, vregs_for(rows, request.desc(role).row_bytes, line_bytes)

    def _dest(self, request, band, line_bytes) -> tuple[str, int]:
        return "md", vregs_for(band, request.desc("md").row_bytes, line_bytes)

    @staticmethod
    def _expect(role: str, actual: tuple[int, int], expected: tuple[int, int]) -> None:
        if actual != expected:
            raise ShapeMismatch(f"{role} is {actual[0]}x{actual[1]}, expected {expected[0]}x{expected[1]}")

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class Gemm(Kernel):
    """md = alpha * (ms1 x ms2) + beta * ms3."""

    name = "gemm"
    sources = ("ms1", "ms2", "ms3")

    def check_shapes(self, request):
        a, b, c = request.desc("ms1"), request.desc("ms2"), request.desc("ms3")
        if a.cols != b.rows:
            raise ShapeMismatch(f"ms1 has {a.cols} columns but ms2 has {b.rows} rows")
        self._expect("ms3", (c.rows, c.cols), (a.rows, b.cols))
        self._expect("md", (request.desc("md").rows, request.desc("md").cols), (a.rows, b.cols))

    def footprint(self, request, band, line_bytes, resident):
        k = request.desc("ms1").cols
        return [
            self._window(request, "ms2", k, line_bytes, resident),
            self._window(request, "ms1", band, line_bytes, resident),
            self._window(request, "ms3", band, line_bytes, resident),
            ("acc", 1),
            ("tap", 1),
            ("wt", 1),
            self._dest(request, band, line_bytes),
        ]

    def run(self, ctx):
        request = ctx.request
        rows, depth, cols = request.desc("ms1").rows, request.desc("ms1").cols, request.desc("ms2").cols
        acc, tap, wt = ctx.reg("acc"), ctx.reg("tap"), ctx.reg("wt")
        yield from ctx.load("ms2", 0, depth)
        for r0 in range(0, rows, ctx.band_rows):
            band = min(ctx.band_rows, rows - r0)
            yield from ctx.load("ms1", r0, band)
            yield from ctx.load("ms3", r0, band)
            if r0 + band >= rows:
                ctx.release_sources()
            ctx.begin_band(r0, band)
            for i in range(r0, r0 + band):
                yield ctx.vop(MicroOpKind.VLOAD_IMM, acc, scalar=0, vl=cols)
                for k in range(depth):
                    yield from ctx.tap(acc, "ms2", k, 0, ctx.element("ms1", i, k), cols)
                yield ctx.vop(MicroOpKind.VMUL, acc, acc, scalar=request.alpha, vl=cols)
                c_reg, c_off = ctx.locate("ms3", i)
                yield ctx.vop(MicroOpKind.VSLIDE, tap, c_reg, scalar=c_off, vl=cols)
                yield ctx.vop(MicroOpKind.VLOAD_IMM, wt, scalar=request.beta, vl=cols)
                yield ctx.vop(MicroOpKind.VMACC, acc, tap, wt, vl=cols)
                yield ctx.put_row(i, acc, cols)
            yield from ctx.end_band()


class LeakyRelu(Kernel):
    """md = x if x >= 0 else alpha * x, element-wise."""

    name = "leaky_relu"
    sources = ("ms1",)

    def check_shapes(self, request):
        src, dst = request.desc("ms1"), request.desc("md")
        self._expect("md", (dst.rows, dst.cols), (src.rows, src.cols))

    def footprint(self, request, band, line_bytes, resident):
        return [
            self._window(request, "ms1", band, line_bytes, resident),
            ("tap", 1),
            ("neg", 1),
            self._dest(request, band, line_bytes),
        ]

    def run(self, ctx):
        request = ctx.request
        rows, cols = request.desc("ms1").rows, request.desc("ms1").cols
        tap, neg = ctx.reg("tap"), ctx.reg("neg")
        for r0 in range(0, rows, ctx.band_rows):
            band = min(ctx.band_rows, rows - r0)
            yield from ctx.load("ms1", r0, band)
            if r0 + band >= rows:
                ctx.release_sources()
            ctx.begin_band(r0, band)
            for i in range(r0, r0 + band):
                vreg, offset = ctx.locate("ms1", i)
                yield ctx.vop(MicroOpKind.VSLIDE, tap, vreg, scalar=offset, vl=cols)
                yield ctx.vop(MicroOpKind.VMUL, neg, tap, scalar=request.alpha, vl=cols)
                yield ctx.vop(MicroOpKind.VMERGE_GE0, neg, tap, neg, vl=cols)
                yield ctx.put_row(i, neg, cols)
            yield from ctx.end_band()


class MaxPool(Kernel):
    """Max over win_size x win_size windows taken every ``stride`` rows and columns."""

    name = "maxpool"
    sources = ("ms1",)

    @staticmethod
    def output_shape(rows: int, cols: int, window: int, stride: int) -> tuple[int, int]:
        return (rows - window) // stride + 1, (cols - window) // stride + 1

    def check_shapes(self, request):
        src, dst = request.desc("ms1"), request.desc("md")
        stride, window = request.stride, request.win_size
        if stride < 1 or window < 1:
            raise ShapeMismatch(f"stride={stride} and win_size={window} must both be at least 1")
        if window > src.rows or window > src.cols:
            raise ShapeMismatch(f"{window}x{window} window larger than the {src.rows}x{src.cols} input")
        self._expect("md", (dst.rows, dst.cols), self.output_shape(src.rows, src.cols, window, stride))

    def footprint(self, request, band, line_bytes, resident):
        rows_in = (band - 1) * request.stride + request.win_size
        return [
            self._window(request, "ms1", rows_in, line_bytes, resident),
            ("m", 1),
            ("h", 1),
            ("tap", 1),
            self._dest(request, band, line_bytes),
        ]

    def run(self, ctx):
        request = ctx.request
        cols = request.desc("ms1").cols
        stride, window = request.stride, request.win_size
        out_rows, out_cols = request.desc("md").rows, request.desc("md").cols
        m, h, tap = ctx.reg("m"), ctx.reg("h"), ctx.reg("tap")
        span = cols - window + 1
        for r0 in range(0, out_rows, ctx.band_rows):
            band = min(ctx.band_rows, out_rows - r0)
            yield from ctx.load("ms1", r0 * stride, (band - 1) * stride + window)
            if r0 + band >= out_rows:
                ctx.release_sources()
            ctx.begin_band(r0, band)
            for o in range(r0, r0 + band):
                base = o * stride
                vreg, offset = ctx.locate("ms1", base)
                yield ctx.vop(MicroOpKind.VSLIDE, m, vreg, scalar=offset, vl=cols)
                for di in range(1, window):
                    vreg, offset = ctx.locate("ms1", base + di)
                    yield ctx.vop(MicroOpKind.VSLIDE, tap, vreg, scalar=offset, vl=cols)
                    yield ctx.vop(MicroOpKind.VMAX, m, m, tap, vl=cols)
                # horizontal pass over every window start, then keep every stride-th
                yield ctx.vop(MicroOpKind.VCOPY, h, m, vl=span)
                for dj in range(1, window):
                    yield ctx.vop(MicroOpKind.VSLIDE, tap, m, scalar=dj, vl=span)
                    yield ctx.vop(MicroOpKind.VMAX, h, h, tap, vl=span)
                yield ctx.vop(MicroOpKind.VSLIDE, tap, h, scalar=0, vl=out_cols, stride=stride)
                yield ctx.put_row(o, tap, out_cols)
            yield from ctx.end_band()


class Conv2d(Kernel):
    """Valid 2D convolution (cross-correlation) of ms1 with the ms2 filter."""

    name = "conv2d"
    sources = ("ms1", "ms2")

    def check_shapes(self, request):
        src, filt, dst = request.desc("ms1"), request.desc("ms2"), request.desc("md")
        if filt.rows > src.rows or filt.cols > src.cols:
            raise ShapeMismatch(f"{filt.rows}x{filt.cols} filter larger than the {src.rows}x{src.cols} input")
        self._expect("md", (dst.rows, dst.cols), (src.rows - filt.rows + 1, src.cols - filt.cols + 1))

    def footprint(self, request, band, line_bytes, resident):
        kh = request.desc("ms2").rows
        return [
            self._window(request, "ms2", kh, line_bytes, resident),
            self._window(request, "ms1", band + kh - 1, line_bytes, resident),
            ("acc", 1),
            ("tap", 1),
            ("wt", 1),
            self._dest(request, band, line_bytes),
        ]

    def run(self, ctx):
        request = ctx.request
        kh, kw = request.desc("ms2").rows, request.desc("ms2").cols
        out_rows, out_cols = request.desc("md").rows, request.desc("md").cols
        acc = ctx.reg("acc")
        yield from ctx.load("ms2", 0, kh)
        for r0 in range(0, out_rows, ctx.band_rows):
            band = min(ctx.band_rows, out_rows - r0)
            yield from ctx.load("ms1", r0, band + kh - 1)
            if r0 + band >= out_rows:
                ctx.release_sources()
            ctx.begin_band(r0, band)
            for i in range(r0, r0 + band):
                yield ctx.vop(MicroOpKind.VLOAD_IMM, acc, scalar=0, vl=out_cols)
                for ki in range(kh):
                    for kj in range(kw):
                        yield from ctx.tap(acc, "ms1", i + ki, kj, ctx.element("ms2", ki, kj), out_cols)
                yield ctx.put_row(i, acc, out_cols)
            yield from ctx.end_band()


class ConvLayer3(Kernel):
    """Three-channel convolution, summed over channels, then 2x2/2 max-pool and ReLU.

    ms1 stacks the three H x W channels vertically (3H x W), ms2 stacks the
    three kh x kw filters (3kh x kw). The result is floor(Hc/2) x floor(Wc/2)
    with Hc = H - kh + 1 and Wc = W - kw + 1.
    """

    name = "conv_layer3"
    sources = ("ms1", "ms2")
    CHANNELS = 3

    def _dims(self, request):
        src, filt = request.desc("ms1"), request.desc("ms2")
        height, kh = src.rows // self.CHANNELS, filt.rows // self.CHANNELS
        conv_rows, conv_cols = height - kh + 1, src.cols - filt.cols + 1
        return height, kh, filt.cols, conv_rows, conv_cols

    def check_shapes(self, request):
        src, filt, dst = request.desc("ms1"), request.desc("ms2"), request.desc("md")
        if src.rows % self.CHANNELS or filt.rows % self.CHANNELS:
            raise ShapeMismatch("ms1 and ms2 must stack three channels vertically")
        height, kh, kw, conv_rows, conv_cols = self._dims(request)
        if kh < 1 or kh > height or kw > src.cols:
            raise ShapeMismatch(f"{kh}x{kw} filter does not fit the {height}x{src.cols} channels")
        if conv_rows < 2 or conv_cols < 2:
            raise ShapeMismatch("convolution output is too small to pool")
        self._expect("md", (dst.rows, dst.cols), (conv_rows // 2, conv_cols // 2))

    def footprint(self, request, band, line_bytes, resident):
        kh = self._dims(request)[1]
        return [
            self._window(request, "ms2", request.desc("ms2").rows, line_bytes, resident),
            self._window(request, "ms1", 2 * band + kh - 1, line_bytes, resident),
            ("acc", 2 * band),
            ("tap", 1),
            ("wt", 1),
            self._dest(request, band, line_bytes),
        ]

    def run(self, ctx):
        request = ctx.request
        height, kh, kw, _, conv_cols = self._dims(request)
        out_rows, out_cols = request.desc("md").rows, request.desc("md").cols
        accs, tap = ctx.group("acc"), ctx.reg("tap")
        yield from ctx.load("ms2", 0, request.desc("ms2").rows)
        for r0 in range(0, out_rows, ctx.band_rows):
            band = min(ctx.band_rows, out_rows - r0)
            conv_first, conv_rows = 2 * r0, 2 * band
            for a in range(conv_rows):
                yield ctx.vop(MicroOpKind.VLOAD_IMM, accs[a], scalar=0, vl=conv_cols)
            for c in range(self.CHANNELS):
                base = c * height
                yield from ctx.load("ms1", base + conv_first, conv_rows + kh - 1)
                if c == self.CHANNELS - 1 and r0 + band >= out_rows:
                    ctx.release_sources()
                for a in range(conv_rows):
                    row = base + conv_first + a
                    for ki in range(kh):
                        for kj in range(kw):
                            weight = ctx.element("ms2", c * kh + ki, kj)
                            yield from ctx.tap(accs[a], "ms1", row + ki, kj, weight, conv_cols)
            ctx.begin_band(r0, band)
            for p in range(band):
                top, bottom = accs[2 * p], accs[2 * p + 1]
                yield ctx.vop(MicroOpKind.VMAX, top, top, bottom, vl=conv_cols)
                yield ctx.vop(MicroOpKind.VSLIDE, tap, top, scalar=1, vl=conv_cols - 1)
                yield ctx.vop(MicroOpKind.VMAX, top, top, tap, vl=conv_cols - 1)
                yield ctx.vop(MicroOpKind.VSLIDE, tap, top, scalar=0, vl=out_cols, stride=2)
                yield ctx.vop(MicroOpKind.VMERGE_GE0, tap, tap, scalar=0, vl=out_cols)
                yield ctx.put_row(r0 + p, tap, out_cols)
            yield from ctx.end_band()


BUILTIN_KERNELS: dict[int, type[Kernel]] = {0: Gemm, 1: LeakyRelu, 2: MaxPool, 3: Conv2d, 4: ConvLayer3}


def default_library() -> KernelLibrary:
    """A library with the five built-in kernels at func5 0..4."""
    library = KernelLibrary()
    for func5, kernel_cls in BUILTIN_KERNELS.items():
        library.register(func5, kernel_cls())
    return library
