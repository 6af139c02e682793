"""Grant tables and the GNTTABOP handlers.

Covers GNTTABOP_set_version (status-frame tracking leak on downgrade),
GNTTABOP_get_status_frames through the 32-on-64 compat entry point (loop that
never advances on error) and GNTTABOP_copy (non-transitive v2 grants released
as if transitive, dropping a pin on the caller's gref 0).
"""

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

from .addresses import Gmfn, Mfn, VirtAddr
from .errors import (
    BadGref,
    GrantInUse,
    LenTooLarge,
    MalformedPayload,
    PermissionDenied,
    WatchdogTripped,
)
from .payload import as_bool, as_s, as_u, as_vaddr, decode
from .states import CrashReason, PageType, TypedIndex, Variant

if TYPE_CHECKING:
    from .core import Domain, Hypervisor

CVE_STATUS_FRAMES = "CVE-2012-4539"
CVE_SET_VERSION = "CVE-2012-5510"
CVE_COPY = "CVE-2013-1964"

GNTST_OKAY = 0
GNTST_GENERAL_ERROR = -1

STATUS_FRAME_LIST_ELEMENT = 8  # frame_list is an array of uint64


class GrantFlags(str, enum.Enum):
    READ = "read"
    WRITE = "write"
    READ_WRITE = "readwrite"

    @property
    def readable(self):
        return self is not GrantFlags.WRITE

    @property
    def writable(self):
        return self is not GrantFlags.READ


@dataclass
class GrantEntry:
    """A shared grant: either a frame with permissions, or a pointer to
    another domain's grant (transitive, version 2 only)."""

    gref: int
    domid: int
    frame: Optional[Mfn] = None
    flags: Optional[GrantFlags] = None
    trans_domid: Optional[int] = None
    trans_gref: Optional[int] = None

    @classmethod
    def normal(cls, gref, domid, frame: Mfn, flags=GrantFlags.READ_WRITE):
        return cls(gref, domid, frame=frame, flags=GrantFlags(flags))

    @classmethod
    def transitive(cls, gref, domid, trans_domid, trans_gref):
        return cls(gref, domid, trans_domid=trans_domid, trans_gref=trans_gref)

    @property
    def is_transitive(self):
        return self.trans_domid is not None

    def to_tree(self):
        if self.is_transitive:
            return [self.gref, self.domid, "transitive", self.trans_domid, self.trans_gref]
        return [self.gref, self.domid, "normal", self.frame.value, self.flags.value]


@dataclass
class ActiveGrant:
    gref: int
    pin_count: int
    trans_domid: int
    trans_gref: int
    frame: Mfn


@dataclass
class GrantTable:
    version: int = 1
    entries: Dict[int, GrantEntry] = field(default_factory=dict)
    active: Dict[int, ActiveGrant] = field(default_factory=dict)
    status_frames: List[Mfn] = field(default_factory=list)

    @property
    def nr_grants(self) -> int:
        return len(self.entries)

    def issue(self, entry: GrantEntry):
        if entry.gref in self.entries:
            raise ValueError(f"gref {entry.gref} already issued")
        if entry.is_transitive and self.version != 2:
            raise ValueError("transitive grants need a version 2 table")
        self.entries[entry.gref] = entry

    def pin_count(self, gref: int) -> int:
        act = self.active.get(gref)
        return act.pin_count if act else 0

    def to_tree(self):
        return {
            "version": self.version,
            "entries": [self.entries[k].to_tree() for k in sorted(self.entries)],
            "active": [
                [a.gref, a.pin_count, a.trans_domid, a.trans_gref, a.frame.value]
                for a in (self.active[k] for k in sorted(self.active))
            ],
            "status_frames": [m.value for m in self.status_frames],
        }


@dataclass
class SetVersionArgs:
    version: int

    @classmethod
    def from_dict(cls, data, where="payload"):
        return decode(cls, data, {"version": as_u(32)}, where)


@dataclass
class GetStatusFramesArgs:
    nr_frames: int
    dom: int
    frame_list: VirtAddr
    status: int = GNTST_OKAY

    @classmethod
    def from_dict(cls, data, where="payload"):
        return decode(
            cls, data,
            {"nr_frames": as_u(32), "dom": as_u(16), "frame_list": as_vaddr, "status": as_s(16)},
            where, optional=("status",),
        )


@dataclass
class CopySide:
    ref_or_gmfn: int
    domid: int

    @classmethod
    def from_dict(cls, data, where):
        return decode(cls, data, {"ref_or_gmfn": as_u(64), "domid": as_u(16)}, where)


@dataclass
class CopyArgs:
    source: CopySide
    dest: CopySide
    len: int
    source_is_ref: bool = False
    dest_is_ref: bool = False
    status: int = GNTST_OKAY

    @classmethod
    def from_dict(cls, data, where="payload"):
        return decode(
            cls, data,
            {
                "source": CopySide.from_dict,
                "dest": CopySide.from_dict,
                "len": as_u(16),
                "source_is_ref": as_bool,
                "dest_is_ref": as_bool,
                "status": as_s(16),
            },
            where, optional=("source_is_ref", "dest_is_ref", "status"),
        )


def issue_grant(hv: "Hypervisor", d: "Domain", entry: GrantEntry):
    """Guest-side write of a shared grant entry (not a hypercall)."""
    hv.require_running()
    if not entry.is_transitive:
        info = hv.frame_table.lookup(entry.frame)
        if info is None or info.owner != d.id:
            raise ValueError(f"domain {d.id} does not own {entry.frame!r}")
    d.grant_table.issue(entry)
    _grow_status_frames(hv, d)


def _grow_status_frames(hv, d):
    gt = d.grant_table
    if gt.version != 2:
        return
    missing = hv.status_frames_needed(gt.nr_grants) - len(gt.status_frames)
    if missing > 0:
        gt.status_frames += hv.alloc_frames(
            missing, "grant_status", owner=d.id, type_tag=PageType.GRANT_STATUS
        )


def set_version(hv: "Hypervisor", d: "Domain", new_version: int, variant: Variant) -> int:
    hv.require_running()
    if new_version not in (1, 2):
        raise MalformedPayload(f"grant table version {new_version}")
    gt = d.grant_table
    if new_version == gt.version:
        return 0
    if gt.active:
        raise GrantInUse(f"domain {d.id} has active grants")
    if new_version == 1:
        if any(e.is_transitive for e in gt.entries.values()):
            raise GrantInUse("transitive grants present")
        frames, gt.status_frames = gt.status_frames, []
        # the fix is the put_page that drops the tracking node
        hv.free_frames(frames, remove_tracking=variant is Variant.PATCHED, source_cve=CVE_SET_VERSION)
    else:
        gt.status_frames = hv.alloc_frames(
            hv.status_frames_needed(gt.nr_grants), "grant_status",
            owner=d.id, type_tag=PageType.GRANT_STATUS,
        )
    gt.version = new_version
    return 0


def consume_heap_list(hv: "Hypervisor"):
    """Model the hypervisor's next walk of the heap tracking list."""
    hv.require_running()
    if not hv.tracklist.integrity_ok():
        raise hv.crash(CrashReason.HEAP_LIST_CORRUPTION_CONSUMED)


def _get_status_frames_once(hv, gf: GetStatusFramesArgs, caller):
    target = hv.domain(gf.dom)
    frames = target.grant_table.status_frames
    if gf.nr_frames > len(frames):
        gf.status = GNTST_GENERAL_ERROR
        return
    values = [m.value for m in frames[:gf.nr_frames]]
    hv.write_elements(caller, gf.frame_list, values, STATUS_FRAME_LIST_ELEMENT)
    gf.status = GNTST_OKAY


def get_status_frames(hv: "Hypervisor", caller: "Domain", gf: GetStatusFramesArgs) -> GetStatusFramesArgs:
    """Native entry point; an oversized request just reports the error."""
    hv.require_running()
    _get_status_frames_once(hv, gf, caller)
    return gf


def get_status_frames_compat(
    hv: "Hypervisor", caller: "Domain", gf: GetStatusFramesArgs, count: int, variant: Variant
) -> GetStatusFramesArgs:
    hv.require_running()
    if count != 1:
        raise MalformedPayload("get_status_frames takes count = 1")
    i, rc = 0, 0
    try:
        while i < count and rc == 0:
            hv.watchdog.tick()
            _get_status_frames_once(hv, gf, caller)
            if gf.status == GNTST_OKAY:
                i = count
            elif variant is Variant.PATCHED:
                i = 1
            # vulnerable: i never moves on error, so the loop spins
    except WatchdogTripped:
        caller.hung = True
        raise
    return gf


def pin_grant(hv: "Hypervisor", owner: int, gref: int, by: int, variant: Variant) -> Mfn:
    """Acquire (and keep) a read pin on a grant, as another operation would."""
    hv.require_running()
    frame, _ = _acquire(hv, owner, gref, by, False, variant, by, [])
    return frame


def grant_copy(hv: "Hypervisor", caller: "Domain", op: CopyArgs, variant: Variant) -> int:
    hv.require_running()
    if op.len > hv.config.page_size:
        raise LenTooLarge(f"copy of {op.len} bytes exceeds a page")
    held: List[Tuple[int, int]] = []
    top: List[Tuple[int, int]] = []
    op.status = GNTST_GENERAL_ERROR
    try:
        src = _resolve_side(hv, caller, op.source, op.source_is_ref, False, variant, held, top)
        dst = _resolve_side(hv, caller, op.dest, op.dest_is_ref, True, variant, held, top)
        hv.write_frame(dst, 0, hv.read_frame(src, 0, op.len))
        op.status = GNTST_OKAY
    finally:
        if hv.running:
            for domid, gref in top:
                _release(hv, domid, gref, held)
    return 0


def _resolve_side(hv, caller, side: CopySide, is_ref, need_write, variant, held, top) -> Mfn:
    if not is_ref:
        if side.domid != caller.id:
            raise PermissionDenied(f"gmfn side names domain {side.domid}, caller is {caller.id}")
        return hv.gmfn_to_mfn(caller, Gmfn(side.ref_or_gmfn))
    frame, token = _acquire(hv, side.domid, side.ref_or_gmfn, caller.id, need_write, variant, caller.id, held)
    top.append(token)
    return frame


def _acquire(hv, granting, gref, grantee, need_write, variant, invoker, held):
    hv.watchdog.tick()
    d = hv.domain(granting)
    gt = d.grant_table
    entry = gt.entries.get(gref)
    if entry is None:
        raise BadGref(f"domain {granting} has no gref {gref}")
    if entry.domid != grantee:
        raise PermissionDenied(f"gref {granting}:{gref} not granted to domain {grantee}")
    if entry.is_transitive:
        if gt.version != 2:
            raise BadGref("transitive grant in a version 1 table")
        frame, _ = _acquire(hv, entry.trans_domid, entry.trans_gref, granting,
                            need_write, variant, invoker, held)
        trans = (entry.trans_domid, entry.trans_gref)
    else:
        if not entry.flags.readable or (need_write and not entry.flags.writable):
            raise PermissionDenied(f"gref {granting}:{gref} is {entry.flags.value}")
        frame = entry.frame
        if variant is Variant.VULNERABLE:
            trans = (invoker, 0)
        else:
            trans = (granting, gref)
    act = gt.active.get(gref)
    if act is None:
        act = gt.active[gref] = ActiveGrant(gref, 0, trans[0], trans[1], frame)
    act.pin_count += 1
    held.append((granting, gref))
    return frame, (granting, gref)


def _release(hv, granting, gref, held):
    hv.watchdog.tick()
    d = hv.domains.get(granting)
    act = d.grant_table.active.get(gref) if d else None
    if act is None:
        hv.log(f"release of inactive grant {granting}:{gref} ignored")
        return
    token = (granting, gref)
    if token in held:
        held.remove(token)
    else:
        hv.record_corruption(
            TypedIndex("active_grant", granting, gref),
            4,
            f"spurious release: pin_count {act.pin_count} -> {act.pin_count - 1}",
            CVE_COPY,
        )
    act.pin_count -= 1
    if act.pin_count == 0:
        del d.grant_table.active[gref]
    if d.grant_table.version == 2 and act.trans_domid != granting:
        _release(hv, act.trans_domid, act.trans_gref, held)

