"""Attack scenarios: file format, replay engine and outcome oracle.

A scenario builds a small world (domains, grants, guest memory contents),
runs a script of hypercalls and control actions through the dispatcher, and
compares the final hypervisor state against the outcome expected for the
handler variant under test.  Replays are pure functions of
``(scenario, variant, config)``; each one gets a fresh :class:`Hypervisor`.

Scenario files are JSON trees tagged ``"schema": "hvsim-scenario/1"``.
Numbers may be JSON integers or ``"0x..."`` strings; a numeric field may also
be ``{"expr": "nr_pirqs_gsi - 16 + 2"}`` (config names, + - * //) or, in
payloads, ``{"gmfn_of_gpfn": {"domain": 1, "gpfn": 5}}``.
"""

import ast
import json
import operator
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .addresses import Gpfn, Mfn, VirtAddr
from .config import Config
from .core import Bitness, CrashReason, Hypervisor, Status, Variant
from .dispatch import (
    CVE_IDS,
    Dispatcher,
    GnttabOp,
    HandlerVariantConfig,
    HypercallRequest,
    HypercallResult,
    MemoryOp,
    MmuextOp,
    PhysdevOp,
    SetDebugreg,
    _ROUTES,
    decode_call,
)
from .errors import ErrorCode, HvError, HypervisorCrash, MalformedPayload
from .grant_table import GrantEntry, GrantFlags, consume_heap_list, issue_grant, pin_grant, set_version
from .payload import encode, pack_elements

SCENARIO_SCHEMA = "hvsim-scenario/1"
REPORT_SCHEMA = "hvsim-report/1"


class ParseError(ValueError):
    def __init__(self, message, field=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.field = field
        self.line = line


class ScenarioSetupError(RuntimeError):
    pass


# -- symbolic values --------------------------------------------------------

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.FloorDiv: operator.floordiv,
}
_CONFIG_NAMES = frozenset(f.name for f in fields(Config))


@dataclass(frozen=True)
class Expr:
    """Integer expression over config fields, resolved at replay time."""

    text: str

    def __post_init__(self):
        try:
            tree = ast.parse(self.text, mode="eval")
        except SyntaxError as exc:
            raise ValueError(f"bad expression {self.text!r}: {exc.msg}") from None
        self._check(tree.body)

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            self._check(node.operand)
        elif isinstance(node, ast.Constant) and type(node.value) is int:
            pass
        elif isinstance(node, ast.Name) and node.id in _CONFIG_NAMES:
            pass
        else:
            raise ValueError(f"unsupported term in expression {self.text!r}")

    def resolve(self, cfg: Config) -> int:
        return self._eval(ast.parse(self.text, mode="eval").body, cfg)

    def _eval(self, node, cfg):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, cfg), self._eval(node.right, cfg))
        if isinstance(node, ast.UnaryOp):
            return -self._eval(node.operand, cfg)
        if isinstance(node, ast.Constant):
            return node.value
        return int(getattr(cfg, node.id))


@dataclass(frozen=True)
class GmfnRef:
    """The GMFN currently backing a domain's GPFN, looked up at replay time."""

    domain: int
    gpfn: int


Value = Union[int, str, bool, Expr, GmfnRef, list, dict, None]


def resolve(value: Value, cfg: Config, hv: Optional[Hypervisor] = None):
    if isinstance(value, Expr):
        return value.resolve(cfg)
    if isinstance(value, GmfnRef):
        if hv is None:
            raise ScenarioSetupError("GMFN reference outside a running world")
        return hv.translate_p2m(hv.domain(value.domain), Gpfn(value.gpfn)).value
    if isinstance(value, dict):
        return {k: resolve(v, cfg, hv) for k, v in value.items()}
    if isinstance(value, list):
        return [resolve(v, cfg, hv) for v in value]
    return value


# -- scenario model ---------------------------------------------------------

SETUP_ACTIONS = {
    "create_domain": ({"id"}, {"bitness", "paravirtualized", "translated_paging", "nr_frames"}),
    "issue_grants": ({"domain", "count", "grantee"}, {"first_gpfn", "flags"}),
    "issue_grant": ({"domain", "gref", "grantee"}, {"gpfn", "flags", "trans_domid", "trans_gref"}),
    "set_grant_version": ({"domain", "version"}, set()),
    "pin_grant": ({"owner", "gref", "by"}, set()),
    "write_guest": ({"domain", "addr", "elements"}, {"size"}),
    "write_gmfns": ({"domain", "addr", "first_gpfn", "count"}, set()),
    "alloc_pirqs": ({"domain", "count"}, set()),
}

CALL_KINDS = {
    "memory_op": MemoryOp,
    "gnttab_op": GnttabOp,
    "set_debugreg": SetDebugreg,
    "physdev_op": PhysdevOp,
    "mmuext_op": MmuextOp,
}

CONTROLS = ("consume_heap_list", "destroy_domain", "shutdown_domain")

OUTCOMES = ("running", "crashed", "corrupted", "caller_hung")


@dataclass
class SetupAction:
    action: str
    params: Dict[str, Value] = field(default_factory=dict)


@dataclass
class HypercallStep:
    caller: int
    call: str
    payload: Dict[str, Value] = field(default_factory=dict)
    op: Optional[str] = None
    count: int = 1
    label: Optional[str] = None


@dataclass
class ControlStep:
    control: str
    domain: Optional[int] = None
    label: Optional[str] = None


@dataclass
class RepeatStep:
    times: Union[int, Expr]
    steps: List["Step"] = field(default_factory=list)


Step = Union[HypercallStep, ControlStep, RepeatStep]


@dataclass
class ExpectedOutcome:
    status: str
    reason: Optional[str] = None
    min_records: int = 0
    hung_domain: Optional[int] = None
    # label -> return code of that step's last execution
    result_codes: Dict[str, int] = field(default_factory=dict)
    # label -> {out field: value}
    out_fields: Dict[str, Dict[str, Any]] = field(default_factory=dict)


@dataclass
class AttackScenario:
    id: str
    setup: List[SetupAction]
    steps: List[Step]
    expected_vulnerable: ExpectedOutcome
    expected_patched: ExpectedOutcome
    title: str = ""
    notes: List[str] = field(default_factory=list)

    def expected(self, variant) -> ExpectedOutcome:
        if Variant(variant) is Variant.VULNERABLE:
            return self.expected_vulnerable
        return self.expected_patched


# -- parsing ----------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.text = text

    def fail(self, message, path):
        raise ParseError(message, field=path, line=self._line_of(path))

    def _line_of(self, path):
        if not path:
            return None
        key = path.split(".")[-1].split("[")[0]
        pos = self.text.find(f'"{key}"')
        return self.text.count("\n", 0, pos) + 1 if pos >= 0 else None

    def obj(self, data, path, required, optional=()):
        if not isinstance(data, dict):
            self.fail("expected an object", path)
        for key in required:
            if key not in data:
                self.fail("missing required field", f"{path}.{key}" if path else key)
        extra = set(data) - set(required) - set(optional)
        if extra:
            self.fail(f"unknown field(s) {', '.join(sorted(extra))}", path or None)
        return data

    def int_(self, value, path, allow_expr=True):
        if isinstance(value, bool):
            self.fail("expected an integer", path)
        if isinstance(value, int):
            return value
        if isinstance(value, str) and value.lower().startswith(("0x", "-0x")):
            try:
                return int(value, 16)
            except ValueError:
                pass
        if allow_expr and isinstance(value, dict) and set(value) == {"expr"}:
            try:
                return Expr(value["expr"])
            except (ValueError, TypeError) as exc:
                self.fail(str(exc), path)
        self.fail(f"expected an integer, got {value!r}", path)

    def value(self, value, path):
        """Payload leaf or subtree: numbers normalized, symbols recognized."""
        if isinstance(value, dict):
            if set(value) == {"expr"}:
                return self.int_(value, path)
            if set(value) == {"gmfn_of_gpfn"}:
                ref = self.obj(value["gmfn_of_gpfn"], f"{path}.gmfn_of_gpfn", ("domain", "gpfn"))
                return GmfnRef(self.int_(ref["domain"], path, False), self.int_(ref["gpfn"], path, False))
            return {k: self.value(v, f"{path}.{k}") for k, v in value.items()}
        if isinstance(value, list):
            return [self.value(v, f"{path}[{i}]") for i, v in enumerate(value)]
        if isinstance(value, str) and value.lower().startswith(("0x", "-0x")):
            return self.int_(value, path)
        return value

    def scenario(self, data) -> AttackScenario:
        self.obj(data, "", ("schema", "id", "setup", "steps", "expected_vulnerable", "expected_patched"),
                 ("title", "notes"))
        if data["schema"] != SCENARIO_SCHEMA:
            self.fail(f"unsupported schema {data['schema']!r}", "schema")
        sid = data["id"]
        if not isinstance(sid, str) or sid.upper() not in CVE_IDS:
            self.fail(f"unknown CVE id {sid!r}", "id")
        notes = data.get("notes", [])
        if isinstance(notes, str):
            notes = [notes]
        return AttackScenario(
            id=sid.upper(),
            title=str(data.get("title", "")),
            notes=[str(n) for n in notes],
            setup=[self.setup(a, f"setup[{i}]") for i, a in enumerate(self.list_(data["setup"], "setup"))],
            steps=self.steps(data["steps"], "steps"),
            expected_vulnerable=self.expected(data["expected_vulnerable"], "expected_vulnerable"),
            expected_patched=self.expected(data["expected_patched"], "expected_patched"),
        )

    def list_(self, value, path):
        if not isinstance(value, list):
            self.fail("expected a list", path)
        return value

    def setup(self, data, path) -> SetupAction:
        if not isinstance(data, dict) or "action" not in data:
            self.fail("missing required field", f"{path}.action")
        action = data["action"]
        if action not in SETUP_ACTIONS:
            self.fail(f"unknown setup action {action!r}", f"{path}.action")
        required, optional = SETUP_ACTIONS[action]
        self.obj(data, path, {"action"} | required, optional)
        params = {k: self.value(v, f"{path}.{k}") for k, v in data.items() if k != "action"}
        return SetupAction(action, params)

    def steps(self, data, path) -> List[Step]:
        return [self.step(s, f"{path}[{i}]") for i, s in enumerate(self.list_(data, path))]

    def step(self, data, path) -> Step:
        if not isinstance(data, dict):
            self.fail("expected an object", path)
        if "repeat" in data:
            self.obj(data, path, ("repeat", "steps"))
            return RepeatStep(self.int_(data["repeat"], f"{path}.repeat"), self.steps(data["steps"], f"{path}.steps"))
        if "control" in data:
            self.obj(data, path, ("control",), ("domain", "label"))
            if data["control"] not in CONTROLS:
                self.fail(f"unknown control {data['control']!r}", f"{path}.control")
            if data["control"] != "consume_heap_list" and "domain" not in data:
                self.fail("missing required field", f"{path}.domain")
            dom = data.get("domain")
            return ControlStep(data["control"], None if dom is None else self.int_(dom, f"{path}.domain", False),
                               data.get("label"))
        self.obj(data, path, ("caller", "call"), ("op", "payload", "count", "label"))
        kind = data["call"]
        if kind not in CALL_KINDS:
            self.fail(f"unknown call kind {kind!r}", f"{path}.call")
        op = data.get("op")
        cls = CALL_KINDS[kind]
        if cls in (MemoryOp, GnttabOp, PhysdevOp):
            if (cls, op) not in _ROUTES:
                self.fail(f"unknown {kind} op {op!r}", f"{path}.op")
        elif op is not None:
            self.fail(f"{kind} takes no op", f"{path}.op")
        payload = self.value(data.get("payload", {}), f"{path}.payload")
        if not isinstance(payload, dict):
            self.fail("expected an object", f"{path}.payload")
        return HypercallStep(
            caller=self.int_(data["caller"], f"{path}.caller", False),
            call=kind,
            op=op,
            payload=payload,
            count=self.int_(data.get("count", 1), f"{path}.count", False),
            label=data.get("label"),
        )

    def expected(self, data, path) -> ExpectedOutcome:
        self.obj(data, path, ("status",), ("reason", "min_records", "hung_domain", "result_codes", "out_fields"))
        status = data["status"]
        if status not in OUTCOMES:
            self.fail(f"unknown status {status!r}", f"{path}.status")
        reason = data.get("reason")
        if status == "crashed":
            if reason not in {r.value for r in CrashReason}:
                self.fail(f"unknown crash reason {reason!r}", f"{path}.reason")
        elif reason is not None:
            self.fail("reason only applies to crashed", f"{path}.reason")
        if status == "caller_hung" and "hung_domain" not in data:
            self.fail("missing required field", f"{path}.hung_domain")
        codes = {}
        result_codes = data.get("result_codes", {})
        if not isinstance(result_codes, dict):
            self.fail("expected an object", f"{path}.result_codes")
        for label, code in result_codes.items():
            codes[label] = self.code(code, f"{path}.result_codes.{label}")
        out_fields = {}
        for label, fields_ in data.get("out_fields", {}).items():
            if not isinstance(fields_, dict):
                self.fail("expected an object", f"{path}.out_fields.{label}")
            out_fields[label] = {k: self.value(v, f"{path}.out_fields.{label}.{k}") for k, v in fields_.items()}
        hung = data.get("hung_domain")
        return ExpectedOutcome(
            status=status,
            reason=reason,
            min_records=self.int_(data.get("min_records", 1 if status == "corrupted" else 0),
                                  f"{path}.min_records", False),
            hung_domain=None if hung is None else self.int_(hung, f"{path}.hung_domain", False),
            result_codes=codes,
            out_fields=out_fields,
        )

    def code(self, value, path) -> int:
        if isinstance(value, str) and not value.lower().startswith("0x"):
            try:
                return int(ErrorCode[value])
            except KeyError:
                self.fail(f"unknown error name {value!r}", path)
        return self.int_(value, path, False)


def load_scenario(text: str) -> AttackScenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    return _Parser(text).scenario(data)


def load_scenario_file(path) -> AttackScenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    return load_scenario(text)


# -- serialization ----------------------------------------------------------

_HEX_FROM = 1 << 20
_ADDRESS_KEYS = {"addr", "extent_start", "frame_list", "value"}


def _dump_value(value, key=None):
    if isinstance(value, Expr):
        return {"expr": value.text}
    if isinstance(value, GmfnRef):
        return {"gmfn_of_gpfn": {"domain": value.domain, "gpfn": value.gpfn}}
    if isinstance(value, dict):
        return {k: _dump_value(v, k) for k, v in value.items()}
    if isinstance(value, list):
        return [_dump_value(v) for v in value]
    if isinstance(value, int) and not isinstance(value, bool) and (
        key in _ADDRESS_KEYS or abs(value) >= _HEX_FROM
    ):
        return hex(value)
    return value


def _dump_step(step: Step) -> dict:
    if isinstance(step, RepeatStep):
        return {"repeat": _dump_value(step.times), "steps": [_dump_step(s) for s in step.steps]}
    if isinstance(step, ControlStep):
        out = {"control": step.control}
        if step.domain is not None:
            out["domain"] = step.domain
        if step.label is not None:
            out["label"] = step.label
        return out
    out = {"caller": step.caller, "call": step.call}
    if step.op is not None:
        out["op"] = step.op
    out["payload"] = _dump_value(step.payload)
    if step.count != 1:
        out["count"] = step.count
    if step.label is not None:
        out["label"] = step.label
    return out


def _code_name(code: int):
    try:
        return ErrorCode(code).name
    except ValueError:
        return code


def _dump_expected(e: ExpectedOutcome) -> dict:
    out = {"status": e.status}
    if e.reason is not None:
        out["reason"] = e.reason
    if e.status == "corrupted" or e.min_records:
        out["min_records"] = e.min_records
    if e.hung_domain is not None:
        out["hung_domain"] = e.hung_domain
    if e.result_codes:
        out["result_codes"] = {k: _code_name(v) for k, v in e.result_codes.items()}
    if e.out_fields:
        out["out_fields"] = _dump_value(e.out_fields)
    return out


def scenario_to_dict(s: AttackScenario) -> dict:
    return {
        "schema": SCENARIO_SCHEMA,
        "id": s.id,
        "title": s.title,
        "notes": list(s.notes),
        "setup": [dict(action=a.action, **_dump_value(a.params)) for a in s.setup],
        "steps": [_dump_step(st) for st in s.steps],
        "expected_vulnerable": _dump_expected(s.expected_vulnerable),
        "expected_patched": _dump_expected(s.expected_patched),
    }


def dump_scenario(s: AttackScenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=2) + "\n"


# -- library ----------------------------------------------------------------


def builtin_scenarios() -> List[AttackScenario]:
    """The eight published triggers, ordered by CVE id."""
    lib = resources.files("hvsim") / "library"
    out = []
    for cve in CVE_IDS:
        out.append(load_scenario((lib / f"{cve.lower()}.json").read_text()))
    return out


def find_scenario(ref: str) -> AttackScenario:
    """Resolve a builtin id (any case) or a path to a scenario file."""
    if ref.upper() in CVE_IDS:
        return next(s for s in builtin_scenarios() if s.id == ref.upper())
    return load_scenario_file(ref)


# -- replay -----------------------------------------------------------------


def _run_setup(hv: Hypervisor, action: SetupAction, variant: Variant):
    cfg = hv.config
    p = resolve(action.params, cfg, hv)
    a = action.action
    if a == "create_domain":
        hv.create_domain(
            p["id"],
            paravirtualized=p.get("paravirtualized", True),
            translated_paging=p.get("translated_paging"),
            bitness=Bitness(str(p.get("bitness", "64"))),
            nr_frames=p.get("nr_frames"),
        )
    elif a == "issue_grants":
        d = hv.domain(p["domain"])
        flags = GrantFlags(p.get("flags", "readwrite"))
        first = p.get("first_gpfn", 1)
        start = max(d.grant_table.entries) + 1
        nr_ram = len(d.p2m)
        for k in range(p["count"]):
            # large tables share frames once the domain's RAM runs out
            frame = hv.translate_p2m(d, Gpfn((first + k) % nr_ram))
            issue_grant(hv, d, GrantEntry.normal(start + k, p["grantee"], _mfn(frame), flags))
    elif a == "issue_grant":
        d = hv.domain(p["domain"])
        if "trans_domid" in p:
            entry = GrantEntry.transitive(p["gref"], p["grantee"], p["trans_domid"], p["trans_gref"])
        else:
            frame = hv.translate_p2m(d, Gpfn(p["gpfn"]))
            entry = GrantEntry.normal(p["gref"], p["grantee"], _mfn(frame), GrantFlags(p.get("flags", "readwrite")))
        issue_grant(hv, d, entry)
    elif a == "set_grant_version":
        set_version(hv, hv.domain(p["domain"]), p["version"], variant)
    elif a == "pin_grant":
        pin_grant(hv, p["owner"], p["gref"], p["by"], variant)
    elif a == "write_guest":
        size = p.get("size", cfg.element_size_bytes)
        hv.guest_write(hv.domain(p["domain"]), VirtAddr(p["addr"]), pack_elements(p["elements"], size))
    elif a == "write_gmfns":
        d = hv.domain(p["domain"])
        values = [hv.translate_p2m(d, Gpfn(p["first_gpfn"] + k)).value for k in range(p["count"])]
        hv.write_elements(d, VirtAddr(p["addr"]), values, cfg.element_size_bytes)
    elif a == "alloc_pirqs":
        pirqs = hv.domain(p["domain"]).pirqs
        for _ in range(p["count"]):
            slot = pirqs.get_free_pirq()
            if slot < 0:
                raise ScenarioSetupError("PIRQ table exhausted during setup")
            pirqs.store(slot, -1)


def _mfn(gmfn):
    return Mfn(gmfn.value)


def _build_call(step: HypercallStep, payload: dict):
    cls = CALL_KINDS[step.call]
    if cls is SetDebugreg:
        missing = {"reg_nr", "value"} - set(payload)
        if missing:
            raise MalformedPayload(f"set_debugreg payload missing {', '.join(sorted(missing))}")
        return SetDebugreg(payload["reg_nr"], payload["value"])
    if cls is MmuextOp:
        return MmuextOp(payload)
    if cls is GnttabOp:
        return GnttabOp(step.op, payload, step.count)
    return cls(step.op, payload)


def _flatten(steps: List[Step], cfg: Config):
    for step in steps:
        if isinstance(step, RepeatStep):
            times = resolve(step.times, cfg)
            if times < 0:
                raise ScenarioSetupError(f"negative repeat count {times}")
            for _ in range(times):
                yield from _flatten(step.steps, cfg)
        else:
            yield step


def build_world(s: AttackScenario, variant, cfg: Optional[Config] = None) -> Hypervisor:
    cfg = cfg or Config()
    hv = Hypervisor(cfg)
    for action in s.setup:
        try:
            _run_setup(hv, action, Variant(variant))
        except (HvError, HypervisorCrash, ValueError, KeyError) as exc:
            raise ScenarioSetupError(f"{s.id} setup '{action.action}': {exc}") from exc
    return hv


def validate_templates(s: AttackScenario, cfg: Optional[Config] = None):
    """Check that every hypercall step decodes against the dispatcher."""
    cfg = cfg or Config()
    hv = build_world(s, Variant.PATCHED, cfg)
    for step in _flatten(s.steps, cfg):
        if isinstance(step, HypercallStep):
            try:
                decode_call(_build_call(step, resolve(step.payload, cfg, hv)))
            except HvError as exc:
                raise ParseError(str(exc), field=step.label) from exc


@dataclass
class StepRecord:
    index: int
    label: Optional[str]
    kind: str
    caller: Optional[int]
    return_code: int
    error: Optional[str]
    out: Any = None

    def to_dict(self):
        return {
            "index": self.index,
            "label": self.label,
            "kind": self.kind,
            "caller": self.caller,
            "return_code": self.return_code,
            "error": self.error,
            "out": self.out,
        }


@dataclass
class ReplayReport:
    scenario: str
    variant: str
    steps: List[StepRecord]
    final_status: str
    crash_reason: Optional[str]
    corruption_log: List[dict]
    hung_domains: List[int]
    invariants: Dict[str, bool]
    failures: List[str]
    step_count: int
    state_digest: str

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    @property
    def status_label(self) -> str:
        if self.final_status == Status.CRASHED.value:
            return f"crashed({self.crash_reason})"
        if self.hung_domains:
            return "running-hung"
        if self.corruption_log:
            return "running-corrupted"
        return "running"

    def summary_line(self) -> str:
        return f"{self.scenario} {self.variant} {self.status_label} {self.verdict}"

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "variant": self.variant,
            "verdict": self.verdict,
            "final_status": self.final_status,
            "crash_reason": self.crash_reason,
            "hung_domains": self.hung_domains,
            "corruption_log": self.corruption_log,
            "invariants": self.invariants,
            "failures": self.failures,
            "step_count": self.step_count,
            "state_digest": self.state_digest,
            "steps": [r.to_dict() for r in self.steps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def replay(s: AttackScenario, variant, cfg: Optional[Config] = None) -> ReplayReport:
    return execute(s, variant, cfg)[0]


def execute(s: AttackScenario, variant, cfg: Optional[Config] = None, after_setup=None):
    """Replay ``s`` and return ``(report, final hypervisor)``.

    ``after_setup(hv)``, if given, runs once the world is built and before
    the first step; tests use it to snapshot state.
    """
    cfg = cfg or Config()
    variant = Variant(variant)
    hv = build_world(s, variant, cfg)
    if after_setup is not None:
        after_setup(hv)
    dispatcher = Dispatcher(hv, HandlerVariantConfig.uniform(variant))
    records: List[StepRecord] = []
    last: Dict[str, StepRecord] = {}
    total_steps = 0
    watchdog_ok = True
    death_ok = True
    dead_digest = None

    for index, step in enumerate(_flatten(s.steps, cfg)):
        if isinstance(step, HypercallStep):
            try:
                call = _build_call(step, resolve(step.payload, cfg, hv))
                result = dispatcher.dispatch(HypercallRequest(step.caller, call))
            except HvError as exc:
                result = HypercallResult(exc.code, exc.code)
            record = StepRecord(index, step.label, step.call, step.caller, int(result.return_code),
                                result.error.name if result.error is not None else None, encode(result.out))
            total_steps += result.steps
            watchdog_ok &= result.steps <= cfg.watchdog_max_iterations
        else:
            rc, err = _run_control(hv, step)
            record = StepRecord(index, step.label, step.control, step.domain, rc, err)
        records.append(record)
        if step.label:
            last[step.label] = record
        if dead_digest is not None:
            death_ok &= record.error == ErrorCode.HYPERVISOR_DEAD.name and hv.digest() == dead_digest
        elif not hv.running:
            dead_digest = hv.digest()

    expected = s.expected(variant)
    invariants = {
        "frame_conservation": hv.conservation_ok(),
        "translation_round_trip": hv.translation_ok(),
        "monotone_death": death_ok,
        "watchdog_bound": watchdog_ok,
    }
    failures = check_outcome(hv, expected, last)
    failures += [f"invariant {name} violated" for name, ok in invariants.items() if not ok]
    report = ReplayReport(
        scenario=s.id,
        variant=variant.value,
        steps=records,
        final_status=hv.status.value,
        crash_reason=hv.crash_reason.value if hv.crash_reason else None,
        corruption_log=[r.to_dict() for r in hv.corruption_log],
        hung_domains=sorted(d.id for d in hv.domains.values() if d.hung),
        invariants=invariants,
        failures=failures,
        step_count=total_steps,
        state_digest=hv.digest(),
    )
    return report, hv


def _run_control(hv: Hypervisor, step: ControlStep):
    try:
        if step.control == "consume_heap_list":
            consume_heap_list(hv)
        elif step.control == "destroy_domain":
            hv.destroy_domain(step.domain)
        else:
            hv.shutdown_domain(step.domain)
    except HypervisorCrash:
        return int(ErrorCode.HYPERVISOR_DEAD), ErrorCode.HYPERVISOR_DEAD.name
    except HvError as exc:
        return int(exc.code), exc.code.name
    return 0, None


def check_outcome(hv: Hypervisor, expected: ExpectedOutcome, last: Dict[str, StepRecord]) -> List[str]:
    """Oracle: list of mismatches between the final state and ``expected``."""
    failures = []
    hung = sorted(d.id for d in hv.domains.values() if d.hung)
    nrec = len(hv.corruption_log)
    if expected.status == "crashed":
        if hv.status is not Status.CRASHED:
            failures.append(f"expected crash ({expected.reason}), hypervisor is running")
        elif hv.crash_reason.value != expected.reason:
            failures.append(f"expected crash reason {expected.reason}, got {hv.crash_reason.value}")
    elif hv.status is Status.CRASHED:
        failures.append(f"unexpected crash ({hv.crash_reason.value})")
    elif expected.status == "running":
        if nrec:
            failures.append(f"expected clean state, {nrec} corruption record(s)")
        if hung:
            failures.append(f"expected no hung domains, got {hung}")
    elif expected.status == "corrupted":
        if nrec < expected.min_records:
            failures.append(f"expected >= {expected.min_records} corruption record(s), got {nrec}")
    elif expected.status == "caller_hung":
        if expected.hung_domain not in hung:
            failures.append(f"expected domain {expected.hung_domain} hung, hung: {hung}")

    for label, code in expected.result_codes.items():
        rec = last.get(label)
        if rec is None:
            failures.append(f"step '{label}' never ran")
        elif rec.return_code != code:
            failures.append(f"step '{label}' returned {rec.return_code}, expected {code}")
    for label, want in expected.out_fields.items():
        rec = last.get(label)
        out = rec.out if rec is not None and isinstance(rec.out, dict) else {}
        for key, value in want.items():
            got = out.get(key)
            if isinstance(value, int) and isinstance(got, str):
                got = int(got, 0)
            if got != value:
                failures.append(f"step '{label}' out.{key} = {got!r}, expected {value!r}")
    return failures


def replay_matrix(scenarios=None, cfg: Optional[Config] = None, variants=(Variant.VULNERABLE, Variant.PATCHED)):
    scenarios = builtin_scenarios() if scenarios is None else scenarios
    return [replay(s, v, cfg) for s in sorted(scenarios, key=lambda s: s.id) for v in variants]


def report_document(reports: List[ReplayReport], cfg: Config) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "config": cfg.to_dict(),
        "replays": [r.to_dict() for r in reports],
    }
