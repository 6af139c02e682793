"""XENMEM_populate_physmap and XENMEM_exchange."""

from dataclasses import dataclass
from typing import TYPE_CHECKING, List

from .addresses import Gmfn, Gpfn, Mfn, VirtAddr
from .errors import (
    BadGuestAddress,
    BadGuestHandle,
    GpfnInUse,
    HypervisorCrash,
    MalformedPayload,
    OutOfHeap,
    PodRequiresTranslatedPaging,
)
from .payload import as_u, as_vaddr, decode, pack_elements
from .states import CrashReason, PageType, Variant, WriteOutcome

if TYPE_CHECKING:
    from .core import Domain, Hypervisor

CVE_POPULATE = "CVE-2012-3496"
CVE_EXCHANGE = "CVE-2012-5513"

MEMF_POPULATE_ON_DEMAND = 1 << 16


@dataclass
class MemoryReservation:
    extent_start: VirtAddr
    extent_order: int = 0
    nr_extents: int = 0
    flags: int = 0

    @classmethod
    def from_dict(cls, data, where="payload"):
        return decode(
            cls, data,
            {"extent_start": as_vaddr, "extent_order": as_u(32), "nr_extents": as_u(64), "flags": as_u(32)},
            where, optional=("extent_order", "nr_extents", "flags"),
        )


@dataclass
class MemoryExchange:
    in_: MemoryReservation
    out: MemoryReservation
    nr_exchanged: int = 0

    @classmethod
    def from_dict(cls, data, where="payload"):
        return decode(
            cls, data,
            {"in": MemoryReservation.from_dict, "out": MemoryReservation.from_dict,
             "nr_exchanged": as_u(64)},
            where, optional=("nr_exchanged",),
        )

    @property
    def pages_in(self):
        return self.in_.nr_extents << self.in_.extent_order

    @property
    def pages_out(self):
        return self.out.nr_extents << self.out.extent_order


def _check_order(hv, res: MemoryReservation, what: str):
    if res.extent_order > hv.config.max_extent_order:
        raise MalformedPayload(
            f"{what} extent_order {res.extent_order} > {hv.config.max_extent_order}"
        )


def populate_physmap(hv: "Hypervisor", d: "Domain", res: MemoryReservation, variant: Variant) -> int:
    """Populate (or mark populate-on-demand) the GPFNs listed in the guest
    array at ``res.extent_start``.  Returns the number of extents handled."""
    hv.require_running()
    _check_order(hv, res, "populate")
    elem = hv.config.element_size_bytes
    if not hv.guest_handle_okay(d, res.extent_start, res.nr_extents * elem):
        raise BadGuestAddress(f"extent array at {res.extent_start!r}")
    gpfns = hv.read_elements(d, res.extent_start, res.nr_extents, elem)
    pages = 1 << res.extent_order
    pod = bool(res.flags & MEMF_POPULATE_ON_DEMAND)
    done = 0
    for i, gpfn in enumerate(gpfns):
        hv.watchdog.tick()
        targets = [Gpfn(gpfn + k) for k in range(pages)]
        if pod:
            if not d.translated_paging:
                if variant is Variant.VULNERABLE:
                    # BUG_ON(!paging_mode_translate(d))
                    raise hv.crash(CrashReason.BUG_ON)
                raise PodRequiresTranslatedPaging(f"domain {d.id} is not translated")
            d.pod_gpfns.update(targets)
        else:
            try:
                if any(g in d.p2m for g in targets):
                    raise GpfnInUse(f"GPFN {gpfn:#x} already populated")
                ext = hv.alloc_extent(res.extent_order, "populate", owner=d.id, type_tag=PageType.GUEST_RAM)
            except (GpfnInUse, OutOfHeap):
                if done:
                    break
                raise
            for g, mfn in zip(targets, ext.frames()):
                d.map(g, Gmfn(mfn.value))
            hv.write_elements(d, res.extent_start + i * elem, [ext.base.value], elem)
        done += 1
    return done


def memory_exchange(hv: "Hypervisor", d: "Domain", exch: MemoryExchange, variant: Variant) -> int:
    """Swap the guest's in-extents for freshly allocated out-extents.

    The out-extents are mapped at the GPFNs the in-extents vacate, in order,
    and their base GMFNs are copied out to ``exch.out.extent_start``.  Only
    the patched handler validates that destination first.
    """
    hv.require_running()
    elem = hv.config.element_size_bytes
    inr, outr = exch.in_, exch.out
    _check_order(hv, inr, "in")
    _check_order(hv, outr, "out")
    if exch.pages_in != exch.pages_out:
        raise MalformedPayload(f"exchange of {exch.pages_in} pages for {exch.pages_out}")
    if variant is Variant.PATCHED and not hv.guest_handle_okay(d, outr.extent_start, outr.nr_extents * elem):
        raise BadGuestHandle(f"out.extent_start {outr.extent_start!r}")
    if not hv.guest_handle_okay(d, inr.extent_start, inr.nr_extents * elem):
        raise BadGuestAddress(f"in.extent_start {inr.extent_start!r}")

    in_gpfns: List[Gpfn] = []
    for base in hv.read_elements(d, inr.extent_start, inr.nr_extents, elem):
        hv.watchdog.tick()
        if base % (1 << inr.extent_order):
            raise MalformedPayload(f"in-extent {base:#x} not aligned to order {inr.extent_order}")
        for k in range(1 << inr.extent_order):
            gpfn = hv.translate_m2p(d, Gmfn(base + k))
            if gpfn in in_gpfns:
                raise MalformedPayload(f"GMFN {base + k:#x} listed twice")
            in_gpfns.append(gpfn)

    extents = []
    try:
        for _ in range(outr.nr_extents):
            hv.watchdog.tick()
            extents.append(hv.alloc_extent(outr.extent_order, "exchange", owner=d.id,
                                           type_tag=PageType.GUEST_RAM))
    except OutOfHeap:
        hv.free_frames([m for e in extents for m in e.frames()], remove_tracking=True)
        raise

    old = [Mfn(d.unmap(g).value) for g in in_gpfns]
    hv.free_frames(old, remove_tracking=True)
    new = [m for e in extents for m in e.frames()]
    for gpfn, mfn in zip(in_gpfns, new):
        d.map(gpfn, Gmfn(mfn.value))
    exch.nr_exchanged = inr.nr_extents

    payload = pack_elements([e.base.value for e in extents], elem)
    if variant is Variant.VULNERABLE:
        # __copy_to_guest_offset without guest_handle_okay
        outcome = hv.guarded_hypervisor_write(outr.extent_start, payload, CVE_EXCHANGE, domain=d)
        if outcome is WriteOutcome.CRASHED:
            raise HypervisorCrash(hv.crash_reason)
    else:
        hv.guest_write(d, outr.extent_start, payload)
    return 0
