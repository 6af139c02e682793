"""Command line front end: ``hvsim run|list|matrix|config-dump``.

Exit status is 0 when every replay's verdict passes, 1 when any fails and 2
for usage, scenario-parse or configuration errors.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .config import Config, ConfigError
from .scenarios import (
    ParseError,
    ScenarioSetupError,
    builtin_scenarios,
    find_scenario,
    replay,
    replay_matrix,
    report_document,
)
from .states import Variant

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

_MODES = {
    "vulnerable": (Variant.VULNERABLE,),
    "patched": (Variant.PATCHED,),
    "both": (Variant.VULNERABLE, Variant.PATCHED),
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hvsim", description="Replay Xen hypercall vulnerability scenarios.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--set", dest="overrides", metavar="KEY=VALUE", action="append", default=[],
                       help="override one config field (repeatable)")

    run = sub.add_parser("run", help="replay one scenario")
    run.add_argument("--scenario", required=True, metavar="ID|PATH", help="builtin CVE id or scenario file")
    run.add_argument("--mode", choices=sorted(_MODES), default="both")
    run.add_argument("--report", metavar="PATH", help="write the JSON report here")
    common(run)

    matrix = sub.add_parser("matrix", help="replay all builtin scenarios under both variants")
    matrix.add_argument("--report", metavar="PATH", help="write the JSON report here")
    common(matrix)

    sub.add_parser("list", help="list builtin scenarios")

    dump = sub.add_parser("config-dump", help="print the effective config as JSON")
    common(dump)
    return parser


def _load_config(args) -> Config:
    cfg = Config.from_file(args.config) if args.config else Config()
    return cfg.with_overrides(args.overrides)


def _write_report(path: str, reports, cfg: Config):
    text = json.dumps(report_document(reports, cfg), indent=2) + "\n"
    Path(path).write_text(text)


def _emit(reports, out) -> int:
    for r in reports:
        print(r.summary_line(), file=out)
        for failure in r.failures:
            print(f"  {failure}", file=out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def main(argv: Optional[List[str]] = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    try:
        if args.command == "list":
            for s in builtin_scenarios():
                print(f"{s.id}  {s.title}", file=out)
            return EXIT_OK

        cfg = _load_config(args)
        if args.command == "config-dump":
            print(json.dumps(cfg.to_dict(), indent=2), file=out)
            return EXIT_OK

        if args.command == "run":
            scenario = find_scenario(args.scenario)
            reports = [replay(scenario, v, cfg) for v in _MODES[args.mode]]
        else:
            reports = replay_matrix(cfg=cfg)
            print(f"{len(reports)} replays, {sum(r.passed for r in reports)} passed", file=out)
    except (ConfigError, ParseError, ScenarioSetupError) as exc:
        print(f"hvsim: {exc}", file=err)
        return EXIT_USAGE

    if args.report:
        try:
            _write_report(args.report, reports, cfg)
        except OSError as exc:
            print(f"hvsim: cannot write report: {exc.strerror}", file=err)
            return EXIT_USAGE
    return _emit(reports, out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
