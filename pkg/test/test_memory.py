"""Unit tests for main memory and the 2D DMA engine."""

import numpy as np
import pytest

from arcane_sim.cache import CacheController, CacheGeometry
from arcane_sim.errors import LockNotHeld, Misaligned, OutOfBounds
from arcane_sim.memory import Dma2dRequest, DmaDirection, DmaEngine, DmaTiming, MainMemory


class TestMainMemory:
    @pytest.fixture
    def memory(self):
        return MainMemory(size=4096)

    def test_little_endian(self, memory):
        memory.write(0x100, 4, 0x11223344)
        assert memory.read(0x100, 1) == 0x44
        assert memory.read(0x102, 2) == 0x1122

    def test_fill_value(self, memory):
        assert memory.read(0x200, 4) == 0

    def test_out_of_bounds(self, memory):
        with pytest.raises(OutOfBounds):
            memory.read(memory.size - 2, 4)

    def test_misaligned(self, memory):
        with pytest.raises(Misaligned):
            memory.write(0x101, 4, 1)

    def test_byte_write_keeps_neighbours(self, memory):
        memory.write(0x100, 4, 0x11223344)
        memory.write(0x101, 1, 0x01)
        assert memory.read(0x100, 4) == 0x11220144

    def test_write_wraps_to_width(self, memory):
        memory.write(0x10, 2, -1)
        assert memory.read(0x10, 2) == 0xFFFF
        assert memory.read(0x12, 2) == 0

    def test_peek_is_not_counted(self, memory):
        memory.peek(0, 16)
        assert memory.read_count == 0


class TestDma2dRequest:
    def test_vpu_side_packs_rows_per_line(self):
        req = Dma2dRequest(0x1000, 0, rows=5, row_bytes=16, src_stride_bytes=32, dst_stride_bytes=16, rows_per_line=2)
        assert req.src_address(3, 64) == 0x1000 + 3 * 32
        assert req.dst_address(3, 64) == 64 + 16

    def test_rejects_overlapping_rows(self):
        with pytest.raises(ValueError):
            Dma2dRequest(0, 0, rows=2, row_bytes=16, src_stride_bytes=8, dst_stride_bytes=16)


class TestDmaEngine:
    @pytest.fixture
    def memory(self):
        return MainMemory(size=8192)

    @pytest.fixture
    def cache(self, memory):
        return CacheController(CacheGeometry(num_vpus=1, vregs_per_vpu=8, line_bytes=64), memory)

    @pytest.fixture
    def dma(self, cache):
        return DmaEngine(DmaTiming(), cache)

    def test_single_row_cost(self, dma, cache):
        cache.acquire_lock()
        req = Dma2dRequest(0x1000, 0, rows=1, row_bytes=64, src_stride_bytes=64, dst_stride_bytes=64)
        assert dma.execute(req) == 10 + 4 + 16
        assert dma.bytes_moved == 64

    def test_requires_lock(self, dma):
        req = Dma2dRequest(0x1000, 0, rows=1, row_bytes=4, src_stride_bytes=4, dst_stride_bytes=4)
        with pytest.raises(LockNotHeld):
            dma.execute(req)

    def test_matrix_roundtrip(self, dma, cache, memory):
        values = np.arange(16, dtype="<i4").reshape(4, 4) - 5
        for row in range(4):
            memory.write_bytes(0x1000 + row * 32, values[row].view(np.uint8))
        cache.acquire_lock()
        cache.claim_lines([1])
        load = Dma2dRequest(0x1000, 64, 4, 16, 32, 16, DmaDirection.MEM_TO_VPU, rows_per_line=4)
        store = Dma2dRequest(64, 0x1800, 4, 16, 16, 16, DmaDirection.VPU_TO_MEM, rows_per_line=4)
        dma.execute(load)
        dma.execute(store)

        copied = cache.peek(0x1800, 64).view("<i4").reshape(4, 4)
        np.testing.assert_array_equal(copied, values)

    def test_fetch_on_write_merges(self, dma, cache, memory):
        memory.write_bytes(0x1000, np.full(64, 0xAA, dtype=np.uint8))
        cache.acquire_lock()
        cache.claim_lines([0])
        cache.lines[0, :8] = np.arange(1, 9, dtype=np.uint8)
        req = Dma2dRequest(0, 0x1010, 1, 8, 8, 8, DmaDirection.VPU_TO_MEM)
        cycles = dma.execute(req)

        expected = np.full(64, 0xAA, dtype=np.uint8)
        expected[0x10:0x18] = np.arange(1, 9, dtype=np.uint8)
        idx = cache.line_for(0x1000)
        assert idx is not None
        assert cache.ct[idx].dirty
        np.testing.assert_array_equal(cache.lines[idx], expected)
        np.testing.assert_array_equal(memory.peek(0x1000, 64), np.full(64, 0xAA, dtype=np.uint8))
        assert cycles == DmaTiming().transfer_cycles(1, 8) + DmaTiming().transfer_cycles(1, 64)
