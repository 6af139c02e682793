import json

import pytest

from hvsim.config import RESERVED_EXAMPLE_BASE, Config, ConfigError, parse_int


def test_defaults():
    cfg = Config()
    assert cfg.page_size == 4096
    assert cfg.watchdog_max_iterations == 4096
    assert cfg.nr_pirqs_gsi == 72
    assert cfg.critical_regions == ((RESERVED_EXAMPLE_BASE + 0x48, 8),)


def test_dict_round_trip():
    cfg = Config(nr_pirqs_gsi=24, critical_regions=((0xFFFF900000000000, 16),))
    assert Config.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_file_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"nr_pirqs_gsi": 24, "reserved_base": "0xffff800000000000"}')
    cfg = Config.from_file(p).with_overrides(["watchdog_max_iterations=100", "page_size=0x1000"])
    assert (cfg.nr_pirqs_gsi, cfg.watchdog_max_iterations, cfg.page_size) == (24, 100, 4096)
    cfg = cfg.with_overrides(['critical_regions=[["0xffff808000000100", 8]]'])
    assert cfg.critical_regions == ((0xFFFF808000000100, 8),)


@pytest.mark.parametrize("bad", [
    ["page_size=3000"],
    ["nr_pirqs_gsi=8"],
    ["nope=1"],
    ["page_size"],
    ["page_size=abc"],
    ["invalid_page_info_outcome=explode"],
])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        Config().with_overrides(bad)


def test_bad_file_reports_line(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{\n  "page_size": 4096,\n  oops\n}')
    with pytest.raises(ConfigError, match=":3:"):
        Config.from_file(p)
    with pytest.raises(ConfigError):
        Config.from_file(tmp_path / "absent.json")
    p.write_text('{"bogus": 1}')
    with pytest.raises(ConfigError, match="bogus"):
        Config.from_file(p)


def test_parse_int():
    assert parse_int("0x10") == 16
    assert parse_int(" 12 ") == 12
    with pytest.raises(ConfigError):
        parse_int(True)
    with pytest.raises(ConfigError):
        parse_int(1.5)
