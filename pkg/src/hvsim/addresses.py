"""Typed address spaces.

A guest virtual address, a pseudo-physical frame (GPFN), a guest machine
frame (GMFN) and a real machine frame (MFN) are all 64-bit integers in the
hypervisor, and mixing them up is exactly the class of bug the simulator is
about.  Each gets its own type here; none converts implicitly to another or to
``int`` (use ``.value``).
"""

from dataclasses import dataclass
from functools import total_ordering
from typing import List

U64_MAX = (1 << 64) - 1


@total_ordering
class _Typed:
    __slots__ = ("value",)

    def __init__(self, value: int):
        if isinstance(value, _Typed):
            raise TypeError(
                f"cannot build {type(self).__name__} from {type(value).__name__}"
            )
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{type(self).__name__} needs an int, got {value!r}")
        if not 0 <= value <= U64_MAX:
            raise ValueError(f"{type(self).__name__} out of 64-bit range: {value:#x}")
        object.__setattr__(self, "value", value)

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    def __reduce__(self):
        return (type(self), (self.value,))

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented if isinstance(other, _Typed) else False
        return self.value == other.value

    def __lt__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.value < other.value

    def __hash__(self):
        return hash((type(self).__name__, self.value))

    def __add__(self, offset):
        if isinstance(offset, bool) or not isinstance(offset, int):
            return NotImplemented
        return type(self)(self.value + offset)

    def __sub__(self, other):
        if type(other) is type(self):
            return self.value - other.value
        if isinstance(other, bool) or not isinstance(other, int):
            return NotImplemented
        return type(self)(self.value - other)

    def __repr__(self):
        return f"{type(self).__name__}({self.value:#x})"


class VirtAddr(_Typed):
    """Byte address in a guest's (or the hypervisor's) virtual address space."""

    __slots__ = ()


class Gpfn(_Typed):
    __slots__ = ()


class Gmfn(_Typed):
    __slots__ = ()


class Mfn(_Typed):
    __slots__ = ()


@dataclass(frozen=True)
class Extent:
    """``2**order`` contiguous machine frames starting at an aligned base."""

    base: Mfn
    order: int

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("extent order must be non-negative")
        if self.base.value % (1 << self.order):
            raise ValueError(f"{self.base!r} not aligned to order {self.order}")

    @property
    def nr_frames(self) -> int:
        return 1 << self.order

    def frames(self) -> List[Mfn]:
        return [self.base + i for i in range(self.nr_frames)]
