import pytest

from hvsim.addresses import Gmfn, Gpfn, VirtAddr
from hvsim.config import RESERVED_EXAMPLE_BASE
from hvsim.core import CrashReason, Variant
from hvsim.errors import (
    BadGuestAddress,
    BadGuestHandle,
    GpfnInUse,
    HypervisorCrash,
    MalformedPayload,
    OutOfHeap,
    PodRequiresTranslatedPaging,
)
from hvsim.memory_ops import (
    MEMF_POPULATE_ON_DEMAND,
    MemoryExchange,
    MemoryReservation,
    memory_exchange,
    populate_physmap,
)

V, P = Variant.VULNERABLE, Variant.PATCHED


def _array(hv, d, values, gpfn=0):
    va = hv.guest_va_of(Gpfn(gpfn))
    hv.write_elements(d, va, values, hv.config.element_size_bytes)
    return va


class TestPopulate:
    def test_maps_new_extents_and_writes_back(self, hv, dom):
        n = hv.config.guest_frames
        va = _array(hv, dom, [n, n + 4])
        res = MemoryReservation(va, extent_order=2, nr_extents=2)
        assert populate_physmap(hv, dom, res, P) == 2
        bases = hv.read_elements(dom, va, 2, 8)
        for gpfn, base in zip((n, n + 4), bases):
            assert base % 4 == 0
            assert [hv.translate_p2m(dom, Gpfn(gpfn + k)).value for k in range(4)] == [base + k for k in range(4)]
        assert hv.conservation_ok() and hv.translation_ok()

    def test_occupied_gpfn(self, hv, dom):
        va = _array(hv, dom, [3])
        with pytest.raises(GpfnInUse):
            populate_physmap(hv, dom, MemoryReservation(va, 0, 1), V)

    def test_partial_success_on_exhaustion(self, hv, dom):
        n = hv.config.guest_frames
        free = hv.allocator.nr_free
        va = _array(hv, dom, [n + k for k in range(free + 2)])
        assert populate_physmap(hv, dom, MemoryReservation(va, 0, free + 2), V) == free
        va = _array(hv, dom, [n + free + 5])
        with pytest.raises(OutOfHeap):
            populate_physmap(hv, dom, MemoryReservation(va, 0, 1), V)

    def test_bad_array_handle(self, hv, dom):
        with pytest.raises(BadGuestAddress):
            populate_physmap(hv, dom, MemoryReservation(VirtAddr(RESERVED_EXAMPLE_BASE), 0, 1), P)

    def test_order_limit(self, hv, dom):
        va = _array(hv, dom, [0])
        with pytest.raises(MalformedPayload):
            populate_physmap(hv, dom, MemoryReservation(va, hv.config.max_extent_order + 1, 1), P)

    def test_pod_on_pv_domain(self, hv, dom):
        va = _array(hv, dom, [100])
        res = MemoryReservation(va, 0, 1, MEMF_POPULATE_ON_DEMAND)
        with pytest.raises(PodRequiresTranslatedPaging):
            populate_physmap(hv, dom, res, P)
        assert hv.running
        with pytest.raises(HypervisorCrash):
            populate_physmap(hv, dom, res, V)
        assert hv.crash_reason is CrashReason.BUG_ON

    def test_pod_on_translated_domain_is_fine_in_both(self, hv):
        d = hv.create_domain(5, paravirtualized=False)
        va = _array(hv, d, [hv.config.guest_frames + 1])
        res = MemoryReservation(va, 0, 1, MEMF_POPULATE_ON_DEMAND)
        assert populate_physmap(hv, d, res, V) == 1
        assert Gpfn(hv.config.guest_frames + 1) in d.pod_gpfns


class TestExchange:
    def _exchange(self, hv, d, n, out_va, order=0):
        gmfns = [hv.translate_p2m(d, Gpfn(8 + k)).value for k in range(n)]
        va = _array(hv, d, gmfns)
        return MemoryExchange(MemoryReservation(va, order, n), MemoryReservation(out_va, order, n))

    def test_exchange_to_guest_memory(self, hv, dom):
        out_va = hv.guest_va_of(Gpfn(4))
        ex = self._exchange(hv, dom, 4, out_va)
        old = [hv.translate_p2m(dom, Gpfn(8 + k)) for k in range(4)]
        for variant in (P,):
            assert memory_exchange(hv, dom, ex, variant) == 0
        new = [Gmfn(v) for v in hv.read_elements(dom, out_va, 4, 8)]
        assert [hv.translate_p2m(dom, Gpfn(8 + k)) for k in range(4)] == new
        assert set(new).isdisjoint(old)
        assert ex.nr_exchanged == 4
        assert hv.conservation_ok() and hv.translation_ok() and hv.tracklist.integrity_ok()

    def test_patched_rejects_reserved_out(self, hv, dom):
        ex = self._exchange(hv, dom, 32, VirtAddr(RESERVED_EXAMPLE_BASE))
        digest = hv.digest()
        with pytest.raises(BadGuestHandle):
            memory_exchange(hv, dom, ex, P)
        assert hv.digest() == digest

    @pytest.mark.parametrize("n, crashed", [(8, False), (9, False), (10, True), (16, True), (32, True)])
    def test_vulnerable_write_size_decides(self, hv, dom, n, crashed):
        # 8-byte elements: the critical word at +0x48 is reached from the tenth element
        ex = self._exchange(hv, dom, n, VirtAddr(RESERVED_EXAMPLE_BASE))
        if crashed:
            with pytest.raises(HypervisorCrash):
                memory_exchange(hv, dom, ex, V)
            assert hv.crash_reason is CrashReason.CRITICAL_MEMORY_OVERWRITE
        else:
            memory_exchange(hv, dom, ex, V)
            assert hv.running
        rec = hv.corruption_log[-1]
        assert (rec.address, rec.byte_count) == (VirtAddr(RESERVED_EXAMPLE_BASE), n * 8)

    def test_page_count_mismatch(self, hv, dom):
        ex = self._exchange(hv, dom, 2, hv.guest_va_of(Gpfn(4)))
        ex.out.nr_extents = 3
        with pytest.raises(MalformedPayload):
            memory_exchange(hv, dom, ex, P)

    def test_duplicate_input_rejected(self, hv, dom):
        g = hv.translate_p2m(dom, Gpfn(9)).value
        va = _array(hv, dom, [g, g])
        ex = MemoryExchange(MemoryReservation(va, 0, 2), MemoryReservation(hv.guest_va_of(Gpfn(4)), 0, 2))
        with pytest.raises(MalformedPayload):
            memory_exchange(hv, dom, ex, P)

    def test_rollback_on_exhaustion(self, hv, dom):
        hv.alloc_frames(hv.allocator.nr_free - 1, "filler")
        ex = self._exchange(hv, dom, 2, hv.guest_va_of(Gpfn(4)))
        digest = hv.digest()
        with pytest.raises(OutOfHeap):
            memory_exchange(hv, dom, ex, P)
        assert hv.digest() == digest
