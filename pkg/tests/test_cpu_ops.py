import pytest
from hypothesis import given, settings, strategies as st

from hvsim.addresses import Mfn, VirtAddr
from hvsim.config import Config
from hvsim.core import CrashReason, Hypervisor, Variant
from hvsim.cpu_ops import (
    DR_CONTROL_RESERVED_ZERO,
    FreePirqArgs,
    MmuextOp,
    PirqTable,
    dr7_mask,
    garbage_page_info,
    get_free_pirq,
    get_page_from_gfn,
    mmuext_clear_page,
    set_debugreg,
)
from hvsim.errors import BadMfn, BadRegisterNumber, HypervisorCrash, NoFreePirq, NotOwner

V, P = Variant.VULNERABLE, Variant.PATCHED


class TestDebugRegs:
    def test_masks(self):
        assert DR_CONTROL_RESERVED_ZERO[V] == 0xD800
        assert dr7_mask(P) == 0xFFFF27FF
        assert dr7_mask(V) >> 32 == 0xFFFFFFFF

    def test_address_registers(self, hv, dom):
        assert set_debugreg(hv, dom, 2, 0xFFFF800000001000, V) == 0xFFFF800000001000
        assert dom.debugregs.dr[2] == VirtAddr(0xFFFF800000001000)
        with pytest.raises(BadRegisterNumber):
            set_debugreg(hv, dom, 5, 0, P)

    def test_vulnerable_bit32_crashes(self, hv, dom):
        with pytest.raises(HypervisorCrash):
            set_debugreg(hv, dom, 7, 1 << 32, V)
        assert hv.crash_reason is CrashReason.RESERVED_DR7_BITS

    def test_vulnerable_low_bits_masked_like_patched(self, hv, dom):
        assert set_debugreg(hv, dom, 7, 0xFFFF, V) == 0xFFFF & ~0xD800
        assert set_debugreg(hv, dom, 7, 0xFFFF, P) == 0xFFFF & 0xFFFF27FF

    @settings(max_examples=300)
    @given(st.integers(0, (1 << 64) - 1))
    def test_patched_commits_no_upper_bits(self, value):
        hv = Hypervisor(Config(machine_frames=16, guest_frames=1))
        d = hv.create_domain(1)
        committed = set_debugreg(hv, d, 7, value, P)
        assert committed >> 32 == 0
        assert committed == value & 0xFFFF27FF
        assert hv.running


class TestPirq:
    def test_fill_order_and_exhaustion(self):
        t = PirqTable(20)
        got = []
        while (p := t.get_free_pirq()) > 0:
            t.store(p, -1)
            got.append(p)
        assert got == list(range(16, 21))
        assert t.get_free_pirq() == -28
        assert not t.store(-28, -1)

    def test_patched_exhaustion_is_clean(self, hv, dom):
        for expected in range(16, hv.config.nr_pirqs_gsi + 1):
            assert get_free_pirq(hv, dom, FreePirqArgs(), P).pirq == expected
        with pytest.raises(NoFreePirq):
            get_free_pirq(hv, dom, FreePirqArgs(), P)
        assert not hv.corruption_log

    def test_vulnerable_writes_below_array(self, hv, dom):
        for _ in range(16, hv.config.nr_pirqs_gsi + 1):
            get_free_pirq(hv, dom, FreePirqArgs(), V)
        assert not hv.corruption_log
        with pytest.raises(NoFreePirq):
            get_free_pirq(hv, dom, FreePirqArgs(), V)
        (rec,) = hv.corruption_log
        assert (rec.address.table, rec.address.index, rec.address.byte_offset) == ("pirq_irq", -28, -112)
        assert rec.value_summary.startswith("-1 ")
        assert hv.running

    @settings(max_examples=30, deadline=None)
    @given(st.integers(16, 90), st.integers(0, 100))
    def test_monotone_fill(self, nr, calls):
        hv = Hypervisor(Config(machine_frames=16, guest_frames=1, nr_pirqs_gsi=nr))
        d = hv.create_domain(1)
        last = 15
        for _ in range(calls):
            try:
                p = get_free_pirq(hv, d, FreePirqArgs(), P).pirq
            except NoFreePirq:
                assert d.pirqs.nr_allocated() == nr - 15
                break
            assert p == last + 1
            last = p


class TestClearPage:
    def test_own_frame_cleared(self, hv, dom):
        m = dom.grant_table.entries[0].frame
        hv.write_frame(m, 0, b"xyz")
        assert mmuext_clear_page(hv, dom, MmuextOp(m), V) == 0
        assert hv.read_frame(m, 0, 3) == bytes(3)

    def test_foreign_frame(self, hv, dom, dom32):
        with pytest.raises(NotOwner):
            mmuext_clear_page(hv, dom, MmuextOp(dom32.grant_table.entries[0].frame), P)

    def test_out_of_range(self, hv, dom):
        bad = Mfn(hv.config.machine_frames + 904)
        digest = hv.digest()
        with pytest.raises(BadMfn):
            mmuext_clear_page(hv, dom, MmuextOp(bad), P)
        assert hv.digest() == digest
        with pytest.raises(HypervisorCrash):
            mmuext_clear_page(hv, dom, MmuextOp(bad), V)
        assert hv.crash_reason is CrashReason.INVALID_PAGE_INFO_USE

    def test_corrupt_outcome_setting(self):
        hv = Hypervisor(Config(machine_frames=64, guest_frames=4, invalid_page_info_outcome="corrupt"))
        d = hv.create_domain(1)
        mmuext_clear_page(hv, d, MmuextOp(Mfn(10_000)), V)
        assert hv.running and hv.corruption_log[0].source_cve == "CVE-2012-5525"

    def test_garbage_is_deterministic(self, hv, dom):
        a = get_page_from_gfn(hv, dom, Mfn(99_999), V)
        assert a == garbage_page_info(Mfn(99_999)) and not a.valid
        assert get_page_from_gfn(hv, dom, Mfn(99_999), P) is None
