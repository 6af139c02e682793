"""Enumerations shared by the model and every handler module."""

import enum
from dataclasses import dataclass
from typing import Optional, Union

from .addresses import VirtAddr


class Variant(str, enum.Enum):
    VULNERABLE = "vulnerable"
    PATCHED = "patched"


class Bitness(str, enum.Enum):
    BITS32 = "32"
    BITS64 = "64"


class Status(str, enum.Enum):
    RUNNING = "running"
    CRASHED = "crashed"


class CrashReason(str, enum.Enum):
    BUG_ON = "BugOn"
    RESERVED_DR7_BITS = "ReservedDr7Bits"
    CRITICAL_MEMORY_OVERWRITE = "CriticalMemoryOverwrite"
    HEAP_LIST_CORRUPTION_CONSUMED = "HeapListCorruptionConsumed"
    INVALID_PAGE_INFO_USE = "InvalidPageInfoUse"
    DESTROYED_HUNG_DOMAIN = "DestroyedHungDomain"


class PageType(enum.IntEnum):
    FREE = 0
    GUEST_RAM = 1
    GRANT_STATUS = 2
    OTHER = 3


class WriteOutcome(str, enum.Enum):
    LANDED = "landed"
    CORRUPTED = "corrupted"
    CRASHED = "crashed"


@dataclass(frozen=True)
class PageInfo:
    owner: Optional[int]
    in_use: bool
    type_tag: PageType
    # False for records synthesized from an out-of-bounds frame-table read.
    valid: bool = True


@dataclass(frozen=True)
class TypedIndex:
    """Location inside a hypervisor table, for corruption that has no VA."""

    table: str
    owner: Optional[int]
    index: int
    byte_offset: Optional[int] = None

    def to_dict(self):
        return {
            "table": self.table,
            "owner": self.owner,
            "index": self.index,
            "byte_offset": self.byte_offset,
        }


@dataclass(frozen=True)
class CorruptionRecord:
    address: Union[VirtAddr, TypedIndex]
    byte_count: int
    value_summary: str
    source_cve: str

    def to_dict(self):
        if isinstance(self.address, VirtAddr):
            addr = hex(self.address.value)
        else:
            addr = self.address.to_dict()
        return {
            "address": addr,
            "byte_count": self.byte_count,
            "value_summary": self.value_summary,
            "source_cve": self.source_cve,
        }
