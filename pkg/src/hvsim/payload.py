"""Decoding of hypercall argument records from JSON-like trees, and back."""

import dataclasses
import enum
from typing import Any, Callable, Dict, Sequence

from .addresses import VirtAddr, _Typed
from .config import ConfigError, parse_int
from .errors import MalformedPayload


def as_int(value, where):
    try:
        return parse_int(value, where)
    except ConfigError as exc:
        raise MalformedPayload(str(exc)) from None


def as_u(bits: int) -> Callable:
    def conv(value, where):
        v = as_int(value, where)
        if not 0 <= v < (1 << bits):
            raise MalformedPayload(f"{where}: {v:#x} does not fit in {bits} unsigned bits")
        return v
    return conv


def as_s(bits: int) -> Callable:
    def conv(value, where):
        v = as_int(value, where)
        if not -(1 << (bits - 1)) <= v < (1 << (bits - 1)):
            raise MalformedPayload(f"{where}: {v} does not fit in {bits} signed bits")
        return v
    return conv


def as_bool(value, where):
    if not isinstance(value, bool):
        raise MalformedPayload(f"{where}: expected true/false")
    return value


def as_typed(cls) -> Callable:
    def conv(value, where):
        if isinstance(value, cls):
            return value
        return cls(as_u(64)(value, where))
    return conv


as_vaddr = as_typed(VirtAddr)


def as_enum(cls) -> Callable:
    def conv(value, where):
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(repr(m.value) for m in cls)
            raise MalformedPayload(f"{where}: {value!r} is not one of {names}") from None
    return conv


def decode(cls, data, fields: Dict[str, Callable], where: str, optional=()):
    """Build ``cls`` from a mapping, converting each field.

    Keys listed in ``optional`` may be absent and keep the dataclass default.
    """
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise MalformedPayload(f"{where}: expected an object for {cls.__name__}")
    unknown = set(data) - set(fields)
    if unknown:
        raise MalformedPayload(f"{where}: unknown field(s) {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, conv in fields.items():
        if name not in data:
            if name in optional:
                continue
            raise MalformedPayload(f"{where}: missing field '{name}'")
        kwargs[_attr(name)] = conv(data[name], f"{where}.{name}")
    return cls(**kwargs)


def _attr(name: str) -> str:
    # "in" is a keyword; dataclasses spell it in_
    return "in_" if name == "in" else name


def encode(obj: Any) -> Any:
    """Render argument records as a JSON-compatible tree."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {}
        for f in dataclasses.fields(obj):
            key = "in" if f.name == "in_" else f.name
            out[key] = encode(getattr(obj, f.name))
        return out
    if isinstance(obj, VirtAddr):
        return hex(obj.value)
    if isinstance(obj, _Typed):
        return obj.value
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [encode(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): encode(v) for k, v in obj.items()}
    return obj


def pack_elements(values: Sequence[int], size: int) -> bytes:
    mask = (1 << (8 * size)) - 1
    return b"".join((v & mask).to_bytes(size, "little") for v in values)
