"""set_debugreg, PHYSDEVOP_get_free_pirq and MMUEXT_CLEAR_PAGE."""

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional

from .addresses import Mfn, VirtAddr
from .errors import BadMfn, BadRegisterNumber, MalformedPayload, NoFreePirq, NotOwner
from .payload import as_enum, as_s, as_typed, as_u, decode
from .states import CrashReason, PageInfo, PageType, TypedIndex, Variant

if TYPE_CHECKING:
    from .core import Domain, Hypervisor

CVE_DEBUGREG = "CVE-2012-3494"
CVE_PIRQ = "CVE-2012-3495"
CVE_CLEAR_PAGE = "CVE-2012-5525"

U64 = (1 << 64) - 1
DR7_RESERVED_HIGH = 0xFFFFFFFF00000000

# DR_CONTROL_RESERVED_ZERO; the handler masks with its complement
DR_CONTROL_RESERVED_ZERO = {
    Variant.VULNERABLE: 0x0000D800,
    Variant.PATCHED: ~0xFFFF27FF & U64,
}

PIRQ_FREE = 0
PIRQ_ALLOCATED = -1
PIRQ_FIRST_ALLOCATABLE = 16
PIRQ_ENOSPC = -28
PIRQ_ELEMENT_SIZE = 4  # pirq_irq is an int array


def dr7_mask(variant: Variant) -> int:
    return ~DR_CONTROL_RESERVED_ZERO[Variant(variant)] & U64


@dataclass
class DebugRegs:
    dr: List[VirtAddr] = field(default_factory=lambda: [VirtAddr(0)] * 4)
    dr7: int = 0

    def to_tree(self):
        return [r.value for r in self.dr] + [self.dr7]


class PirqTable:
    """Per-domain pirq_irq array, indices 0..nr_pirqs_gsi inclusive.

    Writes outside the array are refused and reported to the caller, which
    decides whether that is corruption.
    """

    def __init__(self, nr_pirqs_gsi: int):
        self.nr_pirqs_gsi = nr_pirqs_gsi
        self.slots = [PIRQ_FREE] * (nr_pirqs_gsi + 1)

    def get_free_pirq(self) -> int:
        for pirq in range(PIRQ_FIRST_ALLOCATABLE, self.nr_pirqs_gsi + 1):
            if self.slots[pirq] == PIRQ_FREE:
                return pirq
        return PIRQ_ENOSPC

    def store(self, index: int, value: int) -> bool:
        if 0 <= index < len(self.slots):
            self.slots[index] = value
            return True
        return False

    def nr_allocated(self) -> int:
        return sum(1 for v in self.slots if v == PIRQ_ALLOCATED)

    def to_tree(self):
        return [i for i, v in enumerate(self.slots) if v != PIRQ_FREE]


class PirqType(str, enum.Enum):
    GSI = "MAP_PIRQ_TYPE_GSI"
    MSI = "MAP_PIRQ_TYPE_MSI"


@dataclass
class DebugregArgs:
    reg_nr: int
    value: int
    committed: Optional[int] = None

    @classmethod
    def from_dict(cls, data, where="payload"):
        return decode(cls, data, {"reg_nr": as_s(32), "value": as_u(64)}, where)


@dataclass
class FreePirqArgs:
    type: PirqType = PirqType.GSI
    pirq: Optional[int] = None

    @classmethod
    def from_dict(cls, data, where="payload"):
        return decode(cls, data, {"type": as_enum(PirqType), "pirq": as_s(64)}, where,
                      optional=("type", "pirq"))


MMUEXT_CLEAR_PAGE = "MMUEXT_CLEAR_PAGE"


@dataclass
class MmuextOp:
    arg1_mfn: Mfn
    cmd: str = MMUEXT_CLEAR_PAGE

    @classmethod
    def from_dict(cls, data, where="payload"):
        op = decode(cls, data, {"cmd": lambda v, w: v, "arg1_mfn": as_typed(Mfn)}, where,
                    optional=("cmd",))
        if op.cmd != MMUEXT_CLEAR_PAGE:
            raise MalformedPayload(f"{where}.cmd: unsupported mmuext command {op.cmd!r}")
        return op


def set_debugreg(hv: "Hypervisor", d: "Domain", reg_nr: int, value: int, variant: Variant) -> int:
    """Store a debug register; returns the value actually committed."""
    hv.require_running()
    if not 0 <= value <= U64:
        raise MalformedPayload(f"debug register value {value:#x}")
    if 0 <= reg_nr <= 3:
        d.debugregs.dr[reg_nr] = VirtAddr(value)
        return value
    if reg_nr != 7:
        raise BadRegisterNumber(f"debug register {reg_nr}")
    masked = value & dr7_mask(variant)
    if masked & DR7_RESERVED_HIGH:
        # loading reserved DR7 bits raises #GP inside the hypervisor
        raise hv.crash(CrashReason.RESERVED_DR7_BITS)
    d.debugregs.dr7 = masked
    return masked


def get_free_pirq(hv: "Hypervisor", d: "Domain", args: FreePirqArgs, variant: Variant) -> FreePirqArgs:
    hv.require_running()
    pirq = d.pirqs.get_free_pirq()
    args.pirq = pirq
    if pirq < 0 and variant is Variant.PATCHED:
        raise NoFreePirq("no free PIRQ")
    if not d.pirqs.store(pirq, PIRQ_ALLOCATED):
        hv.record_corruption(
            TypedIndex("pirq_irq", d.id, pirq, byte_offset=pirq * PIRQ_ELEMENT_SIZE),
            PIRQ_ELEMENT_SIZE,
            f"{PIRQ_ALLOCATED} (PIRQ_ALLOCATED) written at pirq_irq[{pirq}]",
            CVE_PIRQ,
        )
    if pirq < 0:
        raise NoFreePirq("no free PIRQ")
    return args


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & U64
    return x ^ (x >> 31)


def garbage_page_info(mfn: Mfn) -> PageInfo:
    """What an over-read of the frame table yields: a pure function of mfn."""
    bits = _splitmix64(mfn.value)
    return PageInfo(
        owner=bits & 0x7FFF,
        in_use=bool(bits >> 15 & 1),
        type_tag=PageType((bits >> 16) % len(PageType)),
        valid=False,
    )


def get_page_from_gfn(hv: "Hypervisor", d: "Domain", mfn: Mfn, variant: Variant) -> Optional[PageInfo]:
    info = hv.frame_table.lookup(mfn)
    if info is not None:
        return info
    if variant is Variant.PATCHED:
        return None
    return garbage_page_info(mfn)


def mmuext_clear_page(hv: "Hypervisor", d: "Domain", op: MmuextOp, variant: Variant) -> int:
    hv.require_running()
    if op.cmd != MMUEXT_CLEAR_PAGE:
        raise MalformedPayload(f"unsupported mmuext command {op.cmd!r}")
    info = get_page_from_gfn(hv, d, op.arg1_mfn, variant)
    if info is None:
        raise BadMfn(f"{op.arg1_mfn!r} is not a valid frame")
    if not info.valid:
        if hv.config.invalid_page_info_outcome == "crash":
            raise hv.crash(CrashReason.INVALID_PAGE_INFO_USE)
        hv.record_corruption(
            TypedIndex("frame_table", None, op.arg1_mfn.value),
            0,
            f"clear-page acted on over-read page_info {info}",
            CVE_CLEAR_PAGE,
        )
        return 0
    if info.owner != d.id:
        raise NotOwner(f"{op.arg1_mfn!r} is not owned by domain {d.id}")
    hv.clear_frame(op.arg1_mfn)
    return 0
