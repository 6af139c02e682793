"""Hypercall error codes and the exceptions that carry them.

Handlers raise a subclass of :class:`HvError`; the dispatcher turns it into a
negative return code.  Codes below -100 are simulator-specific; the rest
borrow the matching errno value.  The numbering is part of the report format
and must not change.
"""

from enum import IntEnum


class ErrorCode(IntEnum):
    PERMISSION_DENIED = -1
    NO_SUCH_DOMAIN = -3
    LEN_TOO_LARGE = -7
    OUT_OF_HEAP = -12
    BAD_GUEST_ADDRESS = -14
    GRANT_IN_USE = -16
    GPFN_IN_USE = -17
    MALFORMED_PAYLOAD = -22
    NO_FREE_PIRQ = -28
    UNKNOWN_HYPERCALL = -38
    BAD_GUEST_HANDLE = -101
    POD_REQUIRES_TRANSLATED_PAGING = -102
    UNMAPPED_GPFN = -103
    UNMAPPED_GMFN = -104
    BAD_GREF = -105
    BAD_MFN = -106
    NOT_OWNER = -107
    BAD_REGISTER_NUMBER = -108
    DOUBLE_FREE = -109
    HYPERVISOR_DEAD = -110
    CALLER_HUNG = -111
    GUEST_HUNG = -112


class HvError(Exception):
    code = ErrorCode.MALFORMED_PAYLOAD


class PermissionDenied(HvError):
    code = ErrorCode.PERMISSION_DENIED


class NoSuchDomain(HvError):
    code = ErrorCode.NO_SUCH_DOMAIN


class LenTooLarge(HvError):
    code = ErrorCode.LEN_TOO_LARGE


class OutOfHeap(HvError):
    code = ErrorCode.OUT_OF_HEAP


class BadGuestAddress(HvError):
    code = ErrorCode.BAD_GUEST_ADDRESS


class GrantInUse(HvError):
    code = ErrorCode.GRANT_IN_USE


class GpfnInUse(HvError):
    code = ErrorCode.GPFN_IN_USE


class MalformedPayload(HvError):
    code = ErrorCode.MALFORMED_PAYLOAD


class NoFreePirq(HvError):
    code = ErrorCode.NO_FREE_PIRQ


class UnknownHypercall(HvError):
    code = ErrorCode.UNKNOWN_HYPERCALL


class BadGuestHandle(HvError):
    code = ErrorCode.BAD_GUEST_HANDLE


class PodRequiresTranslatedPaging(HvError):
    code = ErrorCode.POD_REQUIRES_TRANSLATED_PAGING


class UnmappedGpfn(HvError):
    code = ErrorCode.UNMAPPED_GPFN


class UnmappedGmfn(HvError):
    code = ErrorCode.UNMAPPED_GMFN


class BadGref(HvError):
    code = ErrorCode.BAD_GREF


class BadMfn(HvError):
    code = ErrorCode.BAD_MFN


class NotOwner(HvError):
    code = ErrorCode.NOT_OWNER


class BadRegisterNumber(HvError):
    code = ErrorCode.BAD_REGISTER_NUMBER


class DoubleFree(HvError):
    code = ErrorCode.DOUBLE_FREE


class HypervisorDead(HvError):
    """Raised for any operation attempted after the hypervisor crashed."""

    code = ErrorCode.HYPERVISOR_DEAD


class CallerHung(HvError):
    code = ErrorCode.CALLER_HUNG


class WatchdogTripped(HvError):
    """A handler loop ran past the watchdog budget; the caller is now hung."""

    code = ErrorCode.GUEST_HUNG


class HypervisorCrash(Exception):
    """Internal unwinding signal raised at the moment the hypervisor dies.

    Not an :class:`HvError`: by the time it propagates the status is already
    ``Crashed`` and the dispatcher reports ``HYPERVISOR_DEAD``.
    """

    def __init__(self, reason):
        super().__init__(reason.value)
        self.reason = reason
