import sys

import pytest

from hvsim.config import Config
from hvsim.core import Bitness, Hypervisor


@pytest.fixture
def cfg():
    return Config()


@pytest.fixture
def small_cfg():
    return Config(machine_frames=256, guest_frames=64)


@pytest.fixture
def hv(small_cfg):
    return Hypervisor(small_cfg)


@pytest.fixture
def dom(hv):
    return hv.create_domain(1)


@pytest.fixture
def dom32(hv):
    return hv.create_domain(2, bitness=Bitness.BITS32)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
