"""Replayable attack scenarios.

A scenario file is a list of ``actor call(args)`` lines, optionally bound to
a name with ``name = actor call(args)``. Arguments are Python literals or
names bound earlier. ``expect`` lines judge the outcome of the line before::

    config hooks("legacy_ns_map")
    rid = hyp launch(shared_pages=1)
    host write_shared(rid, 0, b"\\x1f\\x20\\x03\\xd5")
    guest exec(rid, 0x80000000)
    expect blocked("PermissionFault")

``config`` lines must come first; they shape the machine the script runs on.
Every step is followed by the invariant checker, and any violation fails the
scenario even if every expectation matched.
"""
from __future__ import annotations

import ast
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .. import actions as act
from ..errors import SimError
from ..hooks import Hooks
from ..manifest import PAGE, Manifest, load_allow_list
from ..memory import PasValue
from ..realm_monitor import BootPolicy, ExitReason, RecExit
from ..root_monitor import LEGAL_STATES, Layout
from ..system import System
from ..trace import EventKind, EventTrace
from ..normal_world.channel import SecureChannel, flip_bit
from ..normal_world.transport import Descriptor, RpcFrame, Virtqueue, vq_push
from .invariants import InvariantChecker


class ScenarioError(Exception):
    """Malformed scenario text."""


@dataclass(frozen=True)
class Step:
    lineno: int
    target: str | None
    actor: str
    call: str
    args: tuple
    kwargs: tuple   # (key, node) pairs
    text: str


@dataclass
class AttackScenario:
    name: str
    steps: list[Step]
    expected: str = ""
    source: str | None = None

    @classmethod
    def parse(cls, text: str, name: str = "scenario", source: str | None = None):
        steps, expected = [], ""
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if line.startswith("# expected:"):
                expected = line.split(":", 1)[1].strip()
            line = _strip_comment(line)
            if not line:
                continue
            steps.append(_parse_line(line, lineno))
        return cls(name, steps, expected, source)

    @classmethod
    def load(cls, path: str | Path) -> "AttackScenario":
        p = Path(path)
        return cls.parse(p.read_text(), name=p.stem, source=str(p))


def _strip_comment(line: str) -> str:
    """Drop a trailing ``#`` comment that is not inside a string literal."""
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote and line[i - 1] != "\\":
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i].strip()
    return line.strip()


def _parse_line(line: str, lineno: int) -> Step:
    target = None
    head, eq, rest = line.partition("=")
    if eq and head.strip().isidentifier() and not rest.startswith("="):
        target, line = head.strip(), rest.strip()
    actor, _, expr = line.partition(" ")
    expr = expr.strip()
    try:
        node = ast.parse(expr, mode="eval").body
    except SyntaxError as exc:
        raise ScenarioError(f"line {lineno}: {exc.msg}: {expr!r}") from None
    if not isinstance(node, ast.Call) or not isinstance(node.func, ast.Name):
        raise ScenarioError(f"line {lineno}: expected 'actor call(args)', got {line!r}")
    kwargs = tuple((k.arg, k.value) for k in node.keywords)
    return Step(lineno, target, actor, node.func.id, tuple(node.args), kwargs, line)


def _value(node, env: dict):
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise ScenarioError(f"unbound name {node.id!r}")
        return env[node.id]
    if isinstance(node, (ast.List, ast.Tuple)):
        vals = [_value(n, env) for n in node.elts]
        return vals if isinstance(node, ast.List) else tuple(vals)
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub, ast.Mult)):
        a, b = _value(node.left, env), _value(node.right, env)
        return {ast.Add: a.__add__, ast.Sub: a.__sub__, ast.Mult: a.__mul__}[type(node.op)](b)
    return ast.literal_eval(node)


# -- outcomes ---------------------------------------------------------------


@dataclass
class Outcome:
    label: str
    value: object = None
    error: SimError | None = None


def _label(value) -> str:
    if isinstance(value, RecExit):
        if value.reason is ExitReason.BOOT_REJECTED:
            return f"Detected(validate_boot:{value.detail})"
        return value.reason.value
    if isinstance(value, str):
        return value
    if value is None:
        return "ok"
    return str(value) if hasattr(value, "emulate") else "ok"


@dataclass
class Verdict:
    name: str
    passed: bool
    step: int | None = None
    detail: str = ""
    outcomes: list[str] = field(default_factory=list)
    violations: list = field(default_factory=list)
    elapsed: float = 0.0

    def __str__(self):
        status = "Pass" if self.passed else f"Fail(line {self.step}: {self.detail})"
        return f"{self.name}\t{status}"


# -- runner -----------------------------------------------------------------


class ScenarioRunner:
    """Executes scenario steps against a :class:`System`.

    A runner can be handed an existing system (the CLI restores one from a
    snapshot); otherwise one is built when the first non-config line runs.
    """

    def __init__(self, system: System | None = None, trace: EventTrace | None = None,
                 base_dir: Path | None = None):
        self.system = system
        self.trace = trace
        self.base_dir = base_dir
        self.env: dict = {}
        self.cfg = {"hooks": [], "allow_list": None, "layout": None, "cores": 2}
        self.checker = InvariantChecker(system) if system else None
        self.last: Outcome | None = None

    # -- machine setup -------------------------------------------------

    def _ensure_system(self) -> System:
        if self.system is None:
            cfg = self.cfg
            hooks = Hooks(**{h: True for h in cfg["hooks"]})
            layout = cfg["layout"] or Layout.load()
            self.system = System(layout, n_cores=cfg["cores"], hooks=hooks,
                                 policy=BootPolicy(allow_list=cfg["allow_list"]),
                                 trace=self.trace)
            self.checker = InvariantChecker(self.system)
        if "last" not in self.env and self.system.hyp.sbs:
            self.env["last"] = max(self.system.hyp.sbs)
        return self.system

    def _path(self, name: str) -> Path:
        p = Path(name)
        for base in (self.base_dir, Path.cwd()):
            if base is not None and (base / p).exists():
                return base / p
        data = resources.files("ccasim") / "data" / "manifests" / p.name
        if data.is_file():
            return Path(str(data))
        raise ScenarioError(f"cannot find {name!r}")

    def _manifest(self, source=None, **fields) -> Manifest:
        if isinstance(source, Manifest):
            base = source
        elif isinstance(source, str):
            base = Manifest.load(str(self._path(source)))
        else:
            base = Manifest()
        if "devices" in fields:
            fields["devices"] = tuple(fields["devices"])
        return base.with_(**fields) if fields else base

    # -- actor calls ---------------------------------------------------

    def call(self, actor: str, name: str, args: list, kw: dict):
        if actor == "config":
            return self._config(name, *args, **kw)
        if actor == "expect":
            return self._expect(name, *args, **kw)
        s = self._ensure_system()
        fn = getattr(self, f"_{actor}_{name}", None)
        if fn is None:
            raise ScenarioError(f"unknown call {actor} {name}")
        return fn(s, *args, **kw)

    def _config(self, name, *args, **kw):
        if self.system is not None:
            raise ScenarioError("config lines must come before the machine starts")
        if name == "hooks":
            self.cfg["hooks"] = list(args)
        elif name == "allow_list":
            digests = args[0]
            if isinstance(digests, str):
                digests = load_allow_list(str(self._path(digests)))
            self.cfg["allow_list"] = {d.lower() for d in digests}
        elif name == "layout":
            self.cfg["layout"] = Layout.load(str(self._path(args[0])))
        elif name == "cores":
            self.cfg["cores"] = int(args[0])
        else:
            raise ScenarioError(f"unknown config {name!r}")

    # hypervisor

    def _hyp_launch(self, s, manifest=None, core=0, **fields):
        rid, ex = s.hyp.launch(self._manifest(manifest, **fields), core=core)
        self._pending_label = _label(ex)
        return rid

    def _hyp_create(self, s, manifest=None, core=0, activate=True, steal=None, **fields):
        m = self._manifest(manifest, **fields)
        granules = None
        if steal is not None:
            victim = sorted(s.hyp.sbs[steal].data.values())
            granules = s.hyp.allocate(m.memory_pages + m.shared_pages)
            s.hyp.release(granules[:1])
            granules[0] = victim[0]
        try:
            return s.hyp.create_sbs(m, granules=granules, core=core, activate=activate)
        finally:
            if granules:
                s.hyp.release([g for g in granules if g not in s.hyp.delegated])

    def _hyp_activate(self, s, rid, core=0):
        return s.hyp.activate(rid, core=core)

    def _hyp_run(self, s, rid, core=0):
        return s.hyp.run(rid, core=core)

    def _hyp_destroy(self, s, rid, core=0):
        return s.hyp.destroy_sbs(rid, core=core)

    def _hyp_alloc(self, s):
        return s.hyp.allocate(1)[0]

    def _hyp_delegate(self, s, g, core=0):
        return s.hyp.delegate(g, core=core)

    def _hyp_undelegate(self, s, g, core=0):
        return s.hyp.undelegate(g, core=core)

    def _hyp_map_unprotected(self, s, rid, g, ipa, core=0):
        s.rmi("rmi_rtt_map_unprotected", core=core, realm_id=rid, granule=g, ipa=ipa)
        s.hyp.sbs[rid].shared[ipa] = g

    def _hyp_rmi(self, s, name, core=0, **kw):
        return s.rmi(name, core=core, **kw)

    def _hyp_interrupt(self, s, rid, source, device=None, core=0):
        return s.hyp.inject_interrupt(rid, source, device, core=core)

    def _hyp_forge_mmio(self, s, rid, ipa, access="read", core=0):
        return s.hyp.forge_mmio(rid, ipa, access, core=core)

    def _hyp_vq_push(self, s, rid, addr, length, core=0):
        return vq_push(s, "host", rid, Descriptor(addr, length), core=core)

    def _hyp_vq_push_raw(self, s, rid, addr, length, core=0):
        """Write a descriptor straight into the ring, skipping host-side checks."""
        Virtqueue(s, rid).push("host", Descriptor(addr, length), core=core, validate=False)

    def _hyp_vq_pop(self, s, rid, core=0):
        d = Virtqueue(s, rid).pop("host", core=core)
        return None if d is None else (d.addr, d.length)

    # normal-world memory

    def _host_read(self, s, g, offset=0, length=8, core=0):
        return s.host_read(g * PAGE + offset, length, core=core)

    def _host_write(self, s, g, offset, data, core=0):
        return s.host_write(g * PAGE + offset, data, core=core)

    def _host_read_shared(self, s, rid, offset=0, length=8, core=0):
        base = s.hyp.sbs[rid].manifest.shared_base_ipa
        return s.host_read(s.hyp.shared_pa(rid, base + offset), length, core=core)

    def _host_write_shared(self, s, rid, offset, data, core=0):
        base = s.hyp.sbs[rid].manifest.shared_base_ipa
        return s.host_write(s.hyp.shared_pa(rid, base + offset), data, core=core)

    def _host_read_private(self, s, rid, ipa=0, length=8, core=0):
        g = s.hyp.sbs[rid].data[ipa - ipa % PAGE]
        return s.host_read(g * PAGE + ipa % PAGE, length, core=core)

    def _secure_read(self, s, g, offset=0, length=8, core=0):
        return s.secure_read(g * PAGE + offset, length, core=core)

    def _secure_read_shared(self, s, rid, offset=0, length=8, core=0):
        base = s.hyp.sbs[rid].manifest.shared_base_ipa
        return s.secure_read(s.hyp.shared_pa(rid, base + offset), length, core=core)

    def _secure_read_private(self, s, rid, ipa=0, length=8, core=0):
        g = s.hyp.sbs[rid].data[ipa - ipa % PAGE]
        return s.secure_read(g * PAGE + ipa % PAGE, length, core=core)

    # app

    def _app_add(self, s, rid, a, b, core=0):
        return s.app.add(rid, a, b, core=core)

    def _app_otp_register(self, s, rid, secret, core=0):
        if isinstance(secret, str):
            secret = secret.encode()
        return s.app.otp_register(rid, secret, core=core)

    def _app_otp(self, s, rid, core=0):
        return s.app.otp(rid, core=core)

    def _app_post(self, s, rid, command, payload=b"", declared_length=None, core=0):
        return s.app.post(rid, RpcFrame(command, payload, declared_length=declared_length),
                          core=core)

    def _app_collect(self, s, rid, core=0):
        return s.app.collect(rid, core=core).payload

    def _app_rpc(self, s, rid, command, payload=b"", declared_length=None, core=0):
        frame = RpcFrame(command, payload, declared_length=declared_length)
        return s.app.rpc_call(rid, frame, core=core).payload

    # guest (one-shot actions on the realm's REC)

    def _guest_read(self, s, rid, ipa, length=8, core=0):
        return s.guest_op(rid, act.ReadMem(ipa, length), core=core)

    def _guest_write(self, s, rid, ipa, data, core=0):
        return s.guest_op(rid, act.WriteMem(ipa, data), core=core)

    def _guest_exec(self, s, rid, ipa, core=0):
        return s.guest_op(rid, act.Execute(ipa), core=core)

    def _guest_ex_access(self, s, rid, pages, enable=True, core=0):
        return s.guest_op(rid, act.Rsi("ex_access", {"pages": list(pages), "enable": enable}),
                          core=core)

    def _guest_mmio_mark(self, s, rid, pages, core=0):
        return s.guest_op(rid, act.Rsi("mmio", {"pages": list(pages)}), core=core)

    def _guest_vq_push(self, s, rid, addr, length, core=0):
        return vq_push(s, "guest", rid, Descriptor(addr, length), core=core)

    def _guest_vq_pop(self, s, rid, core=0):
        d = Virtqueue(s, rid).pop("guest", core=core)
        return None if d is None else (d.addr, d.length)

    def _guest_attest(self, s, rid, core=0):
        return s.guest_op(rid, act.Rsi("attestation_token", {}), core=core).realm_measurement

    # encrypted device channel

    def _channel_send(self, s, rid, dev, payload, tamper=False, core=0):
        ch = SecureChannel(s, rid, dev)
        try:
            out = ch.guest_send(payload, core=core, tamper=flip_bit if tamper else None)
        except SimError as exc:
            if exc.kind == "TamperDetected":
                return "Detected(integrity)"
            raise
        return "Delivered" if out == payload else "Corrupted"

    def _channel_receive(self, s, rid, dev, payload, tamper=False, core=0):
        ch = SecureChannel(s, rid, dev)
        try:
            out = ch.device_to_guest(payload, core=core, tamper=flip_bit if tamper else None)
        except SimError as exc:
            if exc.kind == "TamperDetected":
                return "Detected(integrity)"
            raise
        return "Delivered" if out == payload else "Corrupted"

    def _channel_spurious(self, s, rid, dev, core=0):
        try:
            SecureChannel(s, rid, dev).spurious_interrupt(core=core)
        except SimError as exc:
            if exc.kind == "TamperDetected":
                return "Detected(integrity)"
            raise
        return "Accepted"

    # realm-world firmware acting without a hypervisor request

    def _smc_rogue(self, s, kind, g, core=0, **kw):
        return s.rogue_smc(kind, g, core=core, **kw)

    # direct checks

    def _check_legal(self, s, g):
        pair = s.machine.pair(g)
        if pair not in LEGAL_STATES:
            raise ScenarioError(f"granule {g} in illegal state {pair}")
        return f"{pair[0].name},{pair[1].name}"

    def _check_views(self, s, g):
        """Every core that cached ``g`` agrees with the GPT it is bound to."""
        m = s.machine
        for c in m.cores:
            cached = c.tlb.get(g)
            if cached is not None and c.active_gpt is not None:
                if cached != PasValue(int(m.gpt[c.active_gpt, g])):
                    raise ScenarioError(f"core {c.core_id} holds a stale view of granule {g}")
        return "consistent"

    def _check_zero(self, s, g):
        if not s.machine.is_zero(g):
            raise ScenarioError(f"granule {g} not scrubbed")
        return "zero"

    def _check_state(self, s, g):
        a, b = s.machine.pair(g)
        return f"{a.name},{b.name}"

    # -- expectations --------------------------------------------------

    def _expect(self, name, *args, **kw):
        last = self.last
        if last is None:
            raise ScenarioError("expect with nothing before it")
        if name == "blocked":
            ok = args[0] in last.label
        elif name == "detected":
            ok = last.label.startswith("Detected(") and (not args or args[0] in last.label)
        elif name == "ok":
            ok = last.error is None
        elif name == "value":
            ok = last.error is None and last.value == args[-1]
        elif name == "exit":
            ok = last.label == args[0]
        elif name == "label":
            ok = last.label == args[0]
        else:
            raise ScenarioError(f"unknown expectation {name!r}")
        return ok

    # -- driver --------------------------------------------------------

    def run_step(self, step: Step) -> tuple[Outcome, bool | None]:
        args = [_value(a, self.env) for a in step.args]
        kw = {k: _value(v, self.env) for k, v in step.kwargs}
        self._pending_label = None
        if step.actor == "expect":
            return self.last, self.call("expect", step.call, args, kw)
        try:
            value = self.call(step.actor, step.call, args, kw)
        except SimError as exc:
            out = Outcome(exc.kind, None, exc)
        else:
            out = Outcome(self._pending_label or _label(value), value)
            if step.target:
                self.env[step.target] = value
        self.last = out
        return out, None

    def run(self, scenario: AttackScenario) -> Verdict:
        t0 = time.perf_counter()
        verdict = Verdict(scenario.name, True)
        if self.system is not None:
            self._ensure_system()
        for step in scenario.steps:
            try:
                out, judged = self.run_step(step)
            except ScenarioError as exc:
                verdict.passed, verdict.step, verdict.detail = False, step.lineno, str(exc)
                break
            if judged is None:
                verdict.outcomes.append(f"{step.lineno}\t{step.text}\t{out.label}")
                if step.actor != "config" and self.system is not None:
                    self.system.trace.emit(EventKind.NOTE, "scenario_step",
                                           outcome=out.label, scenario=scenario.name,
                                           line=step.lineno)
            elif not judged:
                verdict.passed, verdict.step = False, step.lineno
                verdict.detail = f"{step.text}: observed {out.label}"
                break
            elif step.call in ("blocked", "detected"):
                self.system.trace.emit(EventKind.ATTACK_BLOCKED, scenario.name,
                                       outcome=out.label, line=step.lineno)
            if self.checker is not None:
                found = self.checker.check(step.lineno, f"{step.actor} {step.call}")
                if found:
                    verdict.violations += found
                    verdict.passed, verdict.step = False, step.lineno
                    verdict.detail = "; ".join(f"{v.invariant}: {v.detail}" for v in found)
                    break
        verdict.elapsed = time.perf_counter() - t0
        return verdict


def run_scenario(scenario: AttackScenario, system: System | None = None,
                 trace: EventTrace | None = None) -> Verdict:
    base = Path(scenario.source).parent if scenario.source else None
    return ScenarioRunner(system, trace, base).run(scenario)


# -- built-in attack catalog -----------------------------------------------


def catalog() -> dict[str, AttackScenario]:
    """Attack scenarios shipped with the package, keyed by name."""
    root = resources.files("ccasim") / "data" / "attacks"
    out = {}
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".scenario"):
            name = entry.name[:-len(".scenario")]
            out[name] = AttackScenario.parse(entry.read_text(), name=name)
    return out


def run_attacks(names=None, trace_factory=None) -> list[Verdict]:
    cat = catalog()
    chosen = sorted(cat) if names in (None, "all") else list(names)
    verdicts = []
    for name in chosen:
        if name not in cat:
            raise ScenarioError(f"unknown attack {name!r}; known: {', '.join(sorted(cat))}")
        trace = trace_factory(name) if trace_factory else None
        verdicts.append(run_scenario(cat[name], trace=trace))
    return verdicts

