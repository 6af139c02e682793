"""Deterministic simulator of eight Xen hypercall vulnerabilities.

Each affected handler exists in a vulnerable and a patched form; scenarios
replay the published triggers against either and check the outcome.
"""

from .config import Config
from .core import Hypervisor
from .dispatch import CVE_IDS, Dispatcher, HandlerVariantConfig, HypercallRequest, HypercallResult
from .scenarios import builtin_scenarios, load_scenario, replay
from .states import CrashReason, Status, Variant

__version__ = "0.1.0"

__all__ = [
    "CVE_IDS",
    "Config",
    "CrashReason",
    "Dispatcher",
    "HandlerVariantConfig",
    "HypercallRequest",
    "HypercallResult",
    "Hypervisor",
    "Status",
    "Variant",
    "builtin_scenarios",
    "load_scenario",
    "replay",
]
