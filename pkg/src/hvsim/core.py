"""The simulated hypervisor: machine frames, heap, domains and global status.

Every hypercall handler operates on a :class:`Hypervisor` instance.  Crashes
are states, not process aborts: :meth:`Hypervisor.crash` records the reason
and hands back a :class:`~hvsim.errors.HypervisorCrash` for the handler to
raise, which unwinds to the dispatcher.  After that, every mutating entry
point refuses to run.
"""

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .addresses import Extent, Gmfn, Gpfn, Mfn, VirtAddr
from .config import Config
from .cpu_ops import DebugRegs, PirqTable
from .errors import (
    BadGuestAddress,
    DoubleFree,
    HypervisorCrash,
    HypervisorDead,
    NoSuchDomain,
    OutOfHeap,
    UnmappedGmfn,
    UnmappedGpfn,
    WatchdogTripped,
)
from .grant_table import GrantEntry, GrantFlags, GrantTable
from .payload import pack_elements
from .states import (  # noqa: F401  re-exported
    Bitness,
    CorruptionRecord,
    CrashReason,
    PageInfo,
    PageType,
    Status,
    TypedIndex,
    Variant,
    WriteOutcome,
)


class FrameTable:
    """One page_info record per machine frame, stored column-wise."""

    NO_OWNER = -1

    def __init__(self, nr_frames: int):
        self.owner = np.full(nr_frames, self.NO_OWNER, dtype=np.int32)
        self.in_use = np.zeros(nr_frames, dtype=np.bool_)
        self.type_tag = np.zeros(nr_frames, dtype=np.uint8)

    def __len__(self):
        return len(self.owner)

    def contains(self, mfn: Mfn) -> bool:
        return mfn.value < len(self.owner)

    def lookup(self, mfn: Mfn) -> Optional[PageInfo]:
        """Bounds-checked read; ``None`` past the end of the table."""
        if not self.contains(mfn):
            return None
        i = mfn.value
        owner = int(self.owner[i])
        return PageInfo(
            owner=None if owner == self.NO_OWNER else owner,
            in_use=bool(self.in_use[i]),
            type_tag=PageType(int(self.type_tag[i])),
        )

    def assign(self, mfn: Mfn, owner: Optional[int], type_tag: PageType):
        i = mfn.value
        self.owner[i] = self.NO_OWNER if owner is None else owner
        self.in_use[i] = True
        self.type_tag[i] = type_tag

    def release(self, mfn: Mfn):
        i = mfn.value
        self.owner[i] = self.NO_OWNER
        self.in_use[i] = False
        self.type_tag[i] = PageType.FREE

    def frames_owned_by(self, domid: int) -> List[Mfn]:
        return [Mfn(int(i)) for i in np.flatnonzero(self.owner == domid)]

    def digest_bytes(self) -> bytes:
        return self.owner.tobytes() + self.in_use.tobytes() + self.type_tag.tobytes()


@dataclass
class TrackNode:
    frame: Mfn
    purpose: str


class HeapTrackList:
    """Ordered list of heap frames handed out on behalf of guests.

    Duplicate frames are tolerated (the vulnerable downgrade path produces
    them) but reported by :meth:`integrity_ok`.
    """

    def __init__(self):
        self.nodes: List[TrackNode] = []
        self._counts: Counter = Counter()

    def __len__(self):
        return len(self.nodes)

    def append(self, frame: Mfn, purpose: str) -> bool:
        """Append a node; returns True if the frame was already listed."""
        duplicate = self._counts[frame.value] > 0
        self.nodes.append(TrackNode(frame, purpose))
        self._counts[frame.value] += 1
        return duplicate

    def remove(self, frame: Mfn) -> bool:
        for i, node in enumerate(self.nodes):
            if node.frame == frame:
                del self.nodes[i]
                self._counts[frame.value] -= 1
                if not self._counts[frame.value]:
                    del self._counts[frame.value]
                return True
        return False

    def contains(self, frame: Mfn) -> bool:
        return self._counts[frame.value] > 0

    def duplicates(self) -> List[Mfn]:
        return sorted(Mfn(v) for v, n in self._counts.items() if n > 1)

    def integrity_ok(self) -> bool:
        return len(self._counts) == len(self.nodes)


class HeapAllocator:
    """LIFO free stack over all machine frames.

    The most recently freed frame is the next one handed out, which makes
    frame reuse after a free deterministic.
    """

    def __init__(self, total_frames: int):
        self.total_frames = total_frames
        # top of stack is the end of the list; frame 0 comes out first
        self.free_list: List[int] = list(range(total_frames - 1, -1, -1))
        self._free: Set[int] = set(self.free_list)

    @property
    def nr_free(self) -> int:
        return len(self.free_list)

    @property
    def nr_allocated(self) -> int:
        return self.total_frames - len(self._free)

    def is_free(self, mfn: Mfn) -> bool:
        return mfn.value in self._free

    def pop(self, n: int) -> List[Mfn]:
        if n > len(self.free_list):
            raise OutOfHeap(f"need {n} frames, {len(self.free_list)} free")
        out = []
        for _ in range(n):
            v = self.free_list.pop()
            self._free.discard(v)
            out.append(Mfn(v))
        return out

    def take_extent(self, order: int) -> Extent:
        """Remove the lowest aligned run of ``2**order`` free frames."""
        if order == 0:
            return Extent(self.pop(1)[0], 0)
        size = 1 << order
        for base in range(0, self.total_frames - size + 1, size):
            if all(base + k in self._free for k in range(size)):
                run = set(range(base, base + size))
                self.free_list = [v for v in self.free_list if v not in run]
                self._free -= run
                return Extent(Mfn(base), order)
        raise OutOfHeap(f"no free aligned extent of order {order}")

    def push(self, mfn: Mfn):
        if mfn.value in self._free:
            raise DoubleFree(f"{mfn!r} is already free")
        self.free_list.append(mfn.value)
        self._free.add(mfn.value)


class Watchdog:
    """Bounds every handler loop; tripping it hangs the calling domain."""

    def __init__(self, max_iterations: int):
        self.max_iterations = max_iterations
        self.steps = 0

    def reset(self):
        self.steps = 0

    def tick(self):
        if self.steps >= self.max_iterations:
            raise WatchdogTripped(f"loop exceeded {self.max_iterations} iterations")
        self.steps += 1


@dataclass
class Domain:
    id: int
    paravirtualized: bool = True
    translated_paging: bool = False
    bitness: Bitness = Bitness.BITS64
    p2m: Dict[Gpfn, Gmfn] = field(default_factory=dict)
    m2p: Dict[Gmfn, Gpfn] = field(default_factory=dict)
    valid_ranges: List[Tuple[VirtAddr, VirtAddr]] = field(default_factory=list)
    grant_table: GrantTable = field(default_factory=GrantTable)
    pirqs: Optional[PirqTable] = None
    debugregs: DebugRegs = field(default_factory=DebugRegs)
    hung: bool = False
    pod_gpfns: Set[Gpfn] = field(default_factory=set)

    def map(self, gpfn: Gpfn, gmfn: Gmfn):
        self.p2m[gpfn] = gmfn
        self.m2p[gmfn] = gpfn

    def unmap(self, gpfn: Gpfn) -> Gmfn:
        gmfn = self.p2m.pop(gpfn)
        del self.m2p[gmfn]
        return gmfn


class Hypervisor:
    """One simulated host.  Not thread-safe; use one instance per replay."""

    def __init__(self, config: Optional[Config] = None):
        self.config = config or Config()
        cfg = self.config
        self.frame_table = FrameTable(cfg.machine_frames)
        self.allocator = HeapAllocator(cfg.machine_frames)
        self.tracklist = HeapTrackList()
        self.memory: Dict[int, bytearray] = {}
        self.domains: Dict[int, Domain] = {}
        self.status = Status.RUNNING
        self.crash_reason: Optional[CrashReason] = None
        self.corruption_log: List[CorruptionRecord] = []
        self.events: List[str] = []
        self.watchdog = Watchdog(cfg.watchdog_max_iterations)
        self._stale_nodes: Dict[int, str] = {}

    # -- status -------------------------------------------------------------

    @property
    def running(self) -> bool:
        return self.status is Status.RUNNING

    def require_running(self):
        if not self.running:
            raise HypervisorDead(f"hypervisor crashed ({self.crash_reason.value})")

    def crash(self, reason: CrashReason) -> HypervisorCrash:
        self.status = Status.CRASHED
        self.crash_reason = reason
        return HypervisorCrash(reason)

    def record_corruption(self, address, byte_count: int, summary: str, source_cve: str):
        self.corruption_log.append(CorruptionRecord(address, byte_count, summary, source_cve))

    def log(self, message: str):
        self.events.append(message)

    # -- domains ------------------------------------------------------------

    def domain(self, domid: int) -> Domain:
        try:
            return self.domains[domid]
        except KeyError:
            raise NoSuchDomain(f"no domain {domid}") from None

    def create_domain(
        self,
        domid: int,
        *,
        paravirtualized: bool = True,
        translated_paging: Optional[bool] = None,
        bitness: Bitness = Bitness.BITS64,
        nr_frames: Optional[int] = None,
    ) -> Domain:
        self.require_running()
        if domid in self.domains:
            raise ValueError(f"domain {domid} already exists")
        if not 0 <= domid < 0x7FF0:
            raise ValueError(f"domain id {domid} out of range")
        if translated_paging is None:
            translated_paging = not paravirtualized
        cfg = self.config
        nr_frames = cfg.guest_frames if nr_frames is None else nr_frames
        d = Domain(
            id=domid,
            paravirtualized=paravirtualized,
            translated_paging=translated_paging,
            bitness=Bitness(bitness),
            pirqs=PirqTable(cfg.nr_pirqs_gsi),
        )
        frames = self.alloc_frames(nr_frames, "guest_ram", owner=domid, type_tag=PageType.GUEST_RAM)
        for i, mfn in enumerate(frames):
            d.map(Gpfn(i), Gmfn(mfn.value))
        start = VirtAddr(cfg.guest_va_base)
        d.valid_ranges.append((start, start + nr_frames * cfg.page_size))
        # gref 0 always exists; it grants the domain's first page to itself
        d.grant_table.issue(GrantEntry.normal(0, domid, frames[0], GrantFlags.READ_WRITE))
        self.domains[domid] = d
        return d

    def _release_domain(self, d: Domain):
        owned = self.frame_table.frames_owned_by(d.id)
        self.free_frames(owned, remove_tracking=True)
        del self.domains[d.id]

    def destroy_domain(self, domid: int):
        self.require_running()
        d = self.domain(domid)
        if d.hung:
            raise self.crash(CrashReason.DESTROYED_HUNG_DOMAIN)
        self._release_domain(d)

    def shutdown_domain(self, domid: int):
        self.require_running()
        d = self.domain(domid)
        self._release_domain(d)

    # -- translation --------------------------------------------------------

    def translate_p2m(self, d: Domain, gpfn: Gpfn) -> Gmfn:
        try:
            return d.p2m[gpfn]
        except KeyError:
            raise UnmappedGpfn(f"{gpfn!r} not mapped in domain {d.id}") from None

    def translate_m2p(self, d: Domain, gmfn: Gmfn) -> Gpfn:
        try:
            return d.m2p[gmfn]
        except KeyError:
            raise UnmappedGmfn(f"{gmfn!r} not mapped in domain {d.id}") from None

    def gmfn_to_mfn(self, d: Domain, gmfn: Gmfn) -> Mfn:
        # PV guests see machine frame numbers directly
        self.translate_m2p(d, gmfn)
        return Mfn(gmfn.value)

    # -- heap ---------------------------------------------------------------

    def alloc_frames(
        self,
        n: int,
        purpose: str,
        *,
        owner: Optional[int] = None,
        type_tag: PageType = PageType.OTHER,
    ) -> List[Mfn]:
        self.require_running()
        frames = self.allocator.pop(n)
        for mfn in frames:
            self._account_alloc(mfn, purpose, owner, type_tag)
        return frames

    def alloc_extent(
        self, order: int, purpose: str, *, owner: Optional[int] = None,
        type_tag: PageType = PageType.OTHER,
    ) -> Extent:
        self.require_running()
        ext = self.allocator.take_extent(order)
        for mfn in ext.frames():
            self._account_alloc(mfn, purpose, owner, type_tag)
        return ext

    def _account_alloc(self, mfn, purpose, owner, type_tag):
        self.frame_table.assign(mfn, owner, type_tag)
        if self.tracklist.append(mfn, purpose):
            cve = self._stale_nodes.get(mfn.value, "unknown")
            self.record_corruption(
                TypedIndex("xenpage_list", owner, mfn.value),
                0,
                f"duplicate tracking node for frame {mfn.value:#x} ({purpose})",
                cve,
            )

    def free_frames(self, frames: Sequence[Mfn], remove_tracking: bool, source_cve: Optional[str] = None):
        self.require_running()
        for mfn in frames:
            if self.allocator.is_free(mfn):
                raise DoubleFree(f"{mfn!r} is already free")
        for mfn in frames:
            self.allocator.push(mfn)
            self.frame_table.release(mfn)
            self.memory.pop(mfn.value, None)
            if remove_tracking:
                self.tracklist.remove(mfn)
            elif self.tracklist.contains(mfn):
                self._stale_nodes[mfn.value] = source_cve or "unknown"

    # -- machine memory -----------------------------------------------------

    def read_frame(self, mfn: Mfn, offset: int, n: int) -> bytes:
        buf = self.memory.get(mfn.value)
        if buf is None:
            return bytes(n)
        return bytes(buf[offset:offset + n])

    def write_frame(self, mfn: Mfn, offset: int, data: bytes):
        if offset + len(data) > self.config.page_size:
            raise ValueError("write crosses a frame boundary")
        buf = self.memory.get(mfn.value)
        if buf is None:
            buf = self.memory[mfn.value] = bytearray(self.config.page_size)
        buf[offset:offset + len(data)] = data

    def clear_frame(self, mfn: Mfn):
        self.memory.pop(mfn.value, None)

    # -- guest virtual memory -----------------------------------------------

    def is_hypervisor_reserved(self, addr: VirtAddr) -> bool:
        return addr.value >= self.config.reserved_base

    def _guest_pages(self, d: Domain, addr: VirtAddr, nbytes: int):
        """Yield (mfn, offset, length) chunks covering a guest VA range."""
        if self.is_hypervisor_reserved(addr):
            raise BadGuestAddress(f"{addr!r} is hypervisor-reserved")
        end = addr.value + nbytes
        if not any(lo.value <= addr.value and end <= hi.value for lo, hi in d.valid_ranges):
            raise BadGuestAddress(f"{addr!r}+{nbytes} outside domain {d.id} RAM")
        page = self.config.page_size
        base = self.config.guest_va_base
        chunks = []
        pos = addr.value
        while pos < end:
            gpfn = Gpfn((pos - base) // page)
            off = (pos - base) % page
            n = min(page - off, end - pos)
            gmfn = d.p2m.get(gpfn)
            if gmfn is None:
                raise BadGuestAddress(f"{addr!r}: {gpfn!r} not mapped")
            chunks.append((Mfn(gmfn.value), off, n))
            pos += n
        return chunks

    def guest_handle_okay(self, d: Domain, addr: VirtAddr, nbytes: int) -> bool:
        try:
            self._guest_pages(d, addr, nbytes)
        except BadGuestAddress:
            return False
        return True

    def guest_read(self, d: Domain, addr: VirtAddr, nbytes: int) -> bytes:
        return b"".join(self.read_frame(m, off, n) for m, off, n in self._guest_pages(d, addr, nbytes))

    def guest_write(self, d: Domain, addr: VirtAddr, data: bytes):
        chunks = self._guest_pages(d, addr, len(data))
        pos = 0
        for mfn, off, n in chunks:
            self.write_frame(mfn, off, data[pos:pos + n])
            pos += n

    def read_elements(self, d: Domain, addr: VirtAddr, count: int, size: int) -> List[int]:
        raw = self.guest_read(d, addr, count * size)
        return [int.from_bytes(raw[i:i + size], "little") for i in range(0, len(raw), size)]

    def write_elements(self, d: Domain, addr: VirtAddr, values: Sequence[int], size: int):
        self.guest_write(d, addr, pack_elements(values, size))

    def guest_va_of(self, gpfn: Gpfn, offset: int = 0) -> VirtAddr:
        return VirtAddr(self.config.guest_va_base + gpfn.value * self.config.page_size + offset)

    def guarded_hypervisor_write(
        self, addr: VirtAddr, payload: bytes, source_cve: str, domain: Optional[Domain] = None
    ) -> WriteOutcome:
        """The only path by which anything lands in hypervisor-reserved memory.

        A write overlapping a critical region kills the hypervisor; any other
        reserved write is logged as corruption.  Non-reserved writes go to the
        given domain's RAM.
        """
        self.require_running()
        start, end = addr.value, addr.value + len(payload)
        for cstart, clen in self.config.critical_regions:
            if start < cstart + clen and cstart < end:
                self.crash(CrashReason.CRITICAL_MEMORY_OVERWRITE)
                self.record_corruption(addr, len(payload), _summarize(payload), source_cve)
                return WriteOutcome.CRASHED
        if self.is_hypervisor_reserved(addr):
            self.record_corruption(addr, len(payload), _summarize(payload), source_cve)
            return WriteOutcome.CORRUPTED
        if domain is None:
            raise BadGuestAddress(f"{addr!r}: no guest context for write")
        self.guest_write(domain, addr, payload)
        return WriteOutcome.LANDED

    # -- invariants -----------------------------------------------------------

    def conservation_ok(self) -> bool:
        used = int(np.count_nonzero(self.frame_table.in_use))
        return (
            self.allocator.nr_free + self.allocator.nr_allocated == self.allocator.total_frames
            and used == self.allocator.nr_allocated
        )

    def translation_ok(self) -> bool:
        for d in self.domains.values():
            if len(d.p2m) != len(d.m2p):
                return False
            if any(d.m2p.get(gmfn) != gpfn for gpfn, gmfn in d.p2m.items()):
                return False
        return True

    def state_tree(self) -> dict:
        return {
            "status": self.status.value,
            "crash_reason": self.crash_reason.value if self.crash_reason else None,
            "corruption_log": [r.to_dict() for r in self.corruption_log],
            "events": list(self.events),
            "free_list": list(self.allocator.free_list),
            "tracklist": [[n.frame.value, n.purpose] for n in self.tracklist.nodes],
            "domains": [_domain_tree(self.domains[k]) for k in sorted(self.domains)],
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.state_tree(), sort_keys=True, separators=(",", ":")).encode())
        h.update(self.frame_table.digest_bytes())
        for mfn in sorted(self.memory):
            buf = self.memory[mfn]
            if any(buf):
                h.update(mfn.to_bytes(8, "little"))
                h.update(buf)
        return h.hexdigest()

    def status_frames_needed(self, nr_grants: int) -> int:
        # status words are uint16
        return max(1, math.ceil(nr_grants * 2 / self.config.page_size))


def _summarize(payload: bytes) -> str:
    head = payload[:16].hex()
    return f"{len(payload)} bytes: {head}{'...' if len(payload) > 16 else ''}"


def _domain_tree(d: Domain) -> dict:
    return {
        "id": d.id,
        "pv": d.paravirtualized,
        "translated": d.translated_paging,
        "bitness": d.bitness.value,
        "p2m": [[g.value, m.value] for g, m in sorted(d.p2m.items())],
        "hung": d.hung,
        "pod": sorted(g.value for g in d.pod_gpfns),
        "grant_table": d.grant_table.to_tree(),
        "pirqs": d.pirqs.to_tree() if d.pirqs else None,
        "debugregs": d.debugregs.to_tree(),
    }
