"""Simulator configuration record.

Loadable from a JSON file and patchable with ``key=value`` overrides, which is
how the CLI builds it.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Sequence, Tuple

RESERVED_BASE = 0xFFFF800000000000
# Address used by the published CVE-2012-5513 trigger; the default critical
# region is placed relative to it.
RESERVED_EXAMPLE_BASE = 0xFFFF808000000000


class ConfigError(ValueError):
    pass


def _default_critical_regions() -> List[Tuple[int, int]]:
    return [(RESERVED_EXAMPLE_BASE + 0x48, 8)]


@dataclass(frozen=True)
class Config:
    page_size: int = 4096
    machine_frames: int = 4096
    guest_frames: int = 1024
    reserved_base: int = RESERVED_BASE
    # (start, length) byte ranges whose overwrite kills the hypervisor.
    critical_regions: Tuple[Tuple[int, int], ...] = field(
        default_factory=lambda: tuple(_default_critical_regions())
    )
    watchdog_max_iterations: int = 4096
    nr_pirqs_gsi: int = 72
    element_size_bytes: int = 8
    max_extent_order: int = 9
    guest_va_base: int = 0x400000
    hypervisor_bits: int = 64
    # "crash" or "corrupt": what consuming an over-read page_info does.
    invalid_page_info_outcome: str = "crash"

    def __post_init__(self):
        regions = tuple((int(s), int(n)) for s, n in self.critical_regions)
        object.__setattr__(self, "critical_regions", regions)
        self.validate()

    def validate(self):
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise ConfigError(f"page_size must be a power of two, got {self.page_size}")
        if self.machine_frames <= 0:
            raise ConfigError("machine_frames must be positive")
        if not 0 < self.guest_frames <= self.machine_frames:
            raise ConfigError("guest_frames must be in 1..machine_frames")
        if self.watchdog_max_iterations <= 0:
            raise ConfigError("watchdog_max_iterations must be positive")
        if self.nr_pirqs_gsi < 16:
            raise ConfigError("nr_pirqs_gsi must be at least 16")
        if self.element_size_bytes not in (4, 8):
            raise ConfigError("element_size_bytes must be 4 or 8")
        if self.hypervisor_bits not in (32, 64):
            raise ConfigError("hypervisor_bits must be 32 or 64")
        if self.invalid_page_info_outcome not in ("crash", "corrupt"):
            raise ConfigError("invalid_page_info_outcome must be 'crash' or 'corrupt'")
        for start, length in self.critical_regions:
            if length <= 0 or start < 0:
                raise ConfigError(f"bad critical region ({start:#x}, {length})")
        if self.guest_va_base + self.guest_frames * self.page_size > self.reserved_base:
            raise ConfigError("guest virtual range overlaps the reserved range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["critical_regions"] = [[hex(s), n] for s, n in self.critical_regions]
        d["reserved_base"] = hex(self.reserved_base)
        d["guest_va_base"] = hex(self.guest_va_base)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: _coerce(k, v) for k, v in data.items()})

    @classmethod
    def from_file(cls, path) -> "Config":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def with_overrides(self, pairs: Sequence[str]) -> "Config":
        changes = {}
        known = {f.name for f in fields(self)}
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ConfigError(f"bad override {pair!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            changes[key] = _coerce(key, value)
        return replace(self, **changes)


def _coerce(key, value):
    if key == "critical_regions":
        if not isinstance(value, (list, tuple)):
            raise ConfigError("critical_regions must be a list of [start, length]")
        out = []
        for item in value:
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise ConfigError("critical_regions entries must be [start, length]")
            out.append((parse_int(item[0], key), parse_int(item[1], key)))
        return tuple(out)
    if key == "invalid_page_info_outcome":
        return str(value)
    return parse_int(value, key)


def parse_int(value, where="value") -> int:
    """Accept ints and decimal or 0x-prefixed strings."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value.strip(), 0)
        except ValueError:
            pass
    raise ConfigError(f"{where}: expected an integer, got {value!r}")
