"""Hypercall entry point.

Decodes a :class:`HypercallRequest`, picks the vulnerable or patched handler
for the CVE that handler embodies, routes grant-table calls from 32-bit
guests through the compat path, and turns handler exceptions into return
codes.  Nothing reaches a handler once the hypervisor has crashed.
"""

import copy
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Mapping, Optional, Union

from . import cpu_ops, grant_table, memory_ops
from .core import Bitness, Hypervisor, Variant
from .errors import (
    ErrorCode,
    HvError,
    HypervisorCrash,
    MalformedPayload,
    UnknownHypercall,
    WatchdogTripped,
)
from .payload import as_int, encode

CVE_IDS = (
    "CVE-2012-3494",
    "CVE-2012-3495",
    "CVE-2012-3496",
    "CVE-2012-4539",
    "CVE-2012-5510",
    "CVE-2012-5513",
    "CVE-2012-5525",
    "CVE-2013-1964",
)

XENMEM_POPULATE_PHYSMAP = "XENMEM_populate_physmap"
XENMEM_EXCHANGE = "XENMEM_exchange"
GNTTABOP_SET_VERSION = "GNTTABOP_set_version"
GNTTABOP_GET_STATUS_FRAMES = "GNTTABOP_get_status_frames"
GNTTABOP_COPY = "GNTTABOP_copy"
PHYSDEVOP_GET_FREE_PIRQ = "PHYSDEVOP_get_free_pirq"


@dataclass
class MemoryOp:
    op: str
    payload: Any


@dataclass
class GnttabOp:
    op: str
    payload: Any
    count: int = 1


@dataclass
class SetDebugreg:
    reg_nr: int
    value: int


@dataclass
class PhysdevOp:
    op: str
    payload: Any = field(default_factory=dict)


@dataclass
class MmuextOp:
    payload: Any


Call = Union[MemoryOp, GnttabOp, SetDebugreg, PhysdevOp, MmuextOp]


@dataclass
class HypercallRequest:
    caller: int
    call: Call


@dataclass
class HypercallResult:
    return_code: int
    error: Optional[ErrorCode] = None
    out: Any = None
    steps: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self):
        return {
            "return_code": self.return_code,
            "error": self.error.name if self.error is not None else None,
            "out": encode(self.out),
        }


@dataclass(frozen=True)
class HandlerVariantConfig:
    """Which handler version each CVE's code path runs.  Fixed per instance."""

    variants: Mapping[str, Variant] = field(
        default_factory=lambda: {cve: Variant.VULNERABLE for cve in CVE_IDS}
    )

    def __post_init__(self):
        merged = {cve: Variant.VULNERABLE for cve in CVE_IDS}
        for cve, v in self.variants.items():
            if cve not in merged:
                raise ValueError(f"unknown CVE id {cve!r}")
            merged[cve] = Variant(v)
        object.__setattr__(self, "variants", MappingProxyType(merged))

    @classmethod
    def uniform(cls, variant) -> "HandlerVariantConfig":
        return cls({cve: Variant(variant) for cve in CVE_IDS})

    def for_cve(self, cve: str) -> Variant:
        return self.variants[cve]


# (call type, op id) -> (argument decoder, CVE selecting the variant)
_ROUTES = {
    (MemoryOp, XENMEM_POPULATE_PHYSMAP): (memory_ops.MemoryReservation, memory_ops.CVE_POPULATE),
    (MemoryOp, XENMEM_EXCHANGE): (memory_ops.MemoryExchange, memory_ops.CVE_EXCHANGE),
    (GnttabOp, GNTTABOP_SET_VERSION): (grant_table.SetVersionArgs, grant_table.CVE_SET_VERSION),
    (GnttabOp, GNTTABOP_GET_STATUS_FRAMES): (grant_table.GetStatusFramesArgs, grant_table.CVE_STATUS_FRAMES),
    (GnttabOp, GNTTABOP_COPY): (grant_table.CopyArgs, grant_table.CVE_COPY),
    (PhysdevOp, PHYSDEVOP_GET_FREE_PIRQ): (cpu_ops.FreePirqArgs, cpu_ops.CVE_PIRQ),
}


def decode_call(call: Call):
    """Validate a call and return ``(typed_args, cve)``."""
    if isinstance(call, SetDebugreg):
        args = cpu_ops.DebugregArgs(as_int(call.reg_nr, "reg_nr"), as_int(call.value, "value"))
        if not 0 <= args.value < 1 << 64:
            raise MalformedPayload(f"value {args.value:#x} is not a 64-bit register value")
        return args, cpu_ops.CVE_DEBUGREG
    if isinstance(call, MmuextOp):
        return cpu_ops.MmuextOp.from_dict(_own(call.payload)), cpu_ops.CVE_CLEAR_PAGE
    if not isinstance(call, (MemoryOp, GnttabOp, PhysdevOp)):
        raise UnknownHypercall(f"unknown hypercall {type(call).__name__}")
    route = _ROUTES.get((type(call), call.op))
    if route is None:
        raise UnknownHypercall(f"unknown {type(call).__name__} op {call.op!r}")
    cls, cve = route
    return cls.from_dict(_own(call.payload)), cve


def _own(payload):
    # handlers write out-fields into typed args; keep the caller's copy intact
    return copy.deepcopy(payload)


class Dispatcher:
    def __init__(self, hv: Hypervisor, variants: Optional[HandlerVariantConfig] = None):
        self.hv = hv
        self.variants = variants or HandlerVariantConfig()

    def uses_compat(self, caller) -> bool:
        return caller.bitness is Bitness.BITS32 and self.hv.config.hypervisor_bits == 64

    def dispatch(self, req: HypercallRequest) -> HypercallResult:
        hv = self.hv
        hv.watchdog.reset()
        if not hv.running:
            return HypercallResult(ErrorCode.HYPERVISOR_DEAD, ErrorCode.HYPERVISOR_DEAD)
        args = None
        caller = None
        try:
            caller = hv.domain(req.caller)
            if caller.hung:
                return HypercallResult(ErrorCode.CALLER_HUNG, ErrorCode.CALLER_HUNG)
            args, cve = decode_call(req.call)
            rc = self._invoke(caller, req.call, args, self.variants.for_cve(cve))
            return HypercallResult(rc, None, args, hv.watchdog.steps)
        except HypervisorCrash:
            return HypercallResult(ErrorCode.HYPERVISOR_DEAD, ErrorCode.HYPERVISOR_DEAD, args,
                                   hv.watchdog.steps)
        except WatchdogTripped:
            caller.hung = True
            return HypercallResult(ErrorCode.GUEST_HUNG, ErrorCode.GUEST_HUNG, args, hv.watchdog.steps)
        except HvError as exc:
            return HypercallResult(exc.code, exc.code, args, hv.watchdog.steps)

    def _invoke(self, caller, call, args, variant) -> int:
        hv = self.hv
        if isinstance(call, SetDebugreg):
            args.committed = cpu_ops.set_debugreg(hv, caller, args.reg_nr, args.value, variant)
            return 0
        if isinstance(call, MmuextOp):
            return cpu_ops.mmuext_clear_page(hv, caller, args, variant)
        if isinstance(call, PhysdevOp):
            cpu_ops.get_free_pirq(hv, caller, args, variant)
            return 0
        if isinstance(call, MemoryOp):
            if call.op == XENMEM_POPULATE_PHYSMAP:
                return memory_ops.populate_physmap(hv, caller, args, variant)
            return memory_ops.memory_exchange(hv, caller, args, variant)
        if call.op == GNTTABOP_SET_VERSION:
            return grant_table.set_version(hv, caller, args.version, variant)
        if call.op == GNTTABOP_COPY:
            return grant_table.grant_copy(hv, caller, args, variant)
        count = as_int(call.count, "count")
        if self.uses_compat(caller):
            grant_table.get_status_frames_compat(hv, caller, args, count, variant)
        else:
            if count != 1:
                raise MalformedPayload("get_status_frames takes count = 1")
            grant_table.get_status_frames(hv, caller, args)
        return 0


def dispatch(hv: Hypervisor, req: HypercallRequest, variants: Optional[HandlerVariantConfig] = None) -> HypercallResult:
    return Dispatcher(hv, variants).dispatch(req)
