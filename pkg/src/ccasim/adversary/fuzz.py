"""Seeded random interleaving of every actor's calls, with the oracle after each step."""
from __future__ import annotations

import random
import time
from collections import Counter
from dataclasses import dataclass, field

from .. import actions as act
from ..errors import SimError
from ..hooks import Hooks
from ..manifest import DEVICE_KINDS, PAGE, UNPROTECTED_BASE, Manifest
from ..realm_monitor import RealmState, Ripas
from ..root_monitor import DYNAMIC_STATES, Layout
from ..system import System
from ..trace import EventKind, EventTrace
from .invariants import InvariantChecker, Violation

FUZZ_LAYOUT = "granules 64\nroot 0-1\nrealm 2-3\nnormal 4-59\nsecure 60-63\n"
MAX_LIVE = 4
SCRIPTS = ("idle", "add_responder", "otp_responder", "virtio_driver",
           "unguarded_responder", "shellcode_runner")

CALLS = (
    "create_sbs", "create_overlap", "destroy_sbs", "run", "rpc_add", "delegate",
    "undelegate", "rogue_smc", "host_read", "host_write", "secure_read",
    "guest_read", "guest_write", "guest_exec", "guest_ex_access", "guest_mmio_mark",
    "guest_mmio", "forge_mmio", "interrupt", "map_after_activate", "set_ripas",
    "attest",
)
WEIGHTS = (8, 3, 4, 8, 6, 4, 3, 6, 6, 4, 4, 5, 4, 3, 5, 3, 3, 4, 3, 2, 2, 2)


@dataclass(frozen=True)
class FuzzConfig:
    seed: int = 1
    steps: int = 10_000
    cores: int = 2
    layout: str = FUZZ_LAYOUT
    calls: tuple[str, ...] = CALLS
    mutation: str | None = None
    stop_on_violation: bool = False


@dataclass
class FuzzReport:
    config: FuzzConfig
    steps_run: int = 0
    violations: list[Violation] = field(default_factory=list)
    coverage: Counter = field(default_factory=Counter)
    outcomes: Counter = field(default_factory=Counter)
    states_reached: set = field(default_factory=set)
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations

    def format(self) -> str:
        lines = [f"# fuzz seed={self.config.seed} steps={self.steps_run} "
                 f"cores={self.config.cores} mutation={self.config.mutation or 'none'}",
                 f"# violations {len(self.violations)}"]
        lines += [v.to_line() for v in self.violations]
        lines.append("# coverage")
        lines += [f"{k}\t{self.coverage[k]}" for k in sorted(self.coverage)]
        lines.append("# states")
        lines += [f"{a.name},{b.name}" for a, b in sorted(self.states_reached)]
        return "\n".join(lines) + "\n"


class Fuzzer:
    def __init__(self, cfg: FuzzConfig, trace: EventTrace | None = None):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        hooks = Hooks.mutant(cfg.mutation) if cfg.mutation else Hooks()
        self.system = System(Layout.parse(cfg.layout), n_cores=cfg.cores, hooks=hooks,
                             trace=trace)
        self.checker = InvariantChecker(self.system)
        self.n = self.system.machine.n_granules
        self.calls = [c for c in CALLS if c in cfg.calls]
        self.weights = [w for c, w in zip(CALLS, WEIGHTS) if c in cfg.calls]

    # -- random parameters -------------------------------------------------

    def granule(self) -> int:
        """Mostly plausible granules, sometimes out of range or static."""
        r = self.rng.random()
        if r < 0.1:
            return self.rng.randrange(self.n, self.n + 8)
        hyp = self.system.hyp
        if r < 0.45 and hyp.delegated:
            return self.rng.choice(sorted(hyp.delegated))
        return self.rng.randrange(0, self.n)

    def realm(self):
        live = sorted(self.system.hyp.sbs)
        return self.rng.choice(live) if live else None

    def active_realm(self):
        rmm = self.system.rmm
        live = [r for r in sorted(self.system.hyp.sbs)
                if rmm.realms[r].state is RealmState.ACTIVE]
        return self.rng.choice(live) if live else None

    def ipa(self, rid: int) -> int:
        m = self.system.hyp.sbs[rid].manifest
        r = self.rng.random()
        if r < 0.4 and m.shared_pages:
            return m.shared_base_ipa + self.rng.randrange(m.shared_pages) * PAGE
        if r < 0.8:
            return self.rng.randrange(m.memory_pages + 1) * PAGE
        return self.rng.choice([0x0A00_0000, UNPROTECTED_BASE - PAGE,
                                m.shared_base_ipa + 16 * PAGE])

    def manifest(self) -> Manifest:
        rng = self.rng
        devices = tuple(d for d in DEVICE_KINDS if rng.random() < 0.25)
        shared = rng.choice((0, 1, 2, 2))
        return Manifest(memory_pages=rng.randint(1, 3), shared_pages=shared,
                        devices=devices, entry_script=rng.choice(SCRIPTS),
                        vq_offset=PAGE if shared == 2 else 0,
                        vq_size=8 if shared else 0,
                        name=f"f{rng.randrange(1 << 16)}")

    # -- calls ---------------------------------------------------------------

    def do(self, call: str, core: int):
        s, rng, hyp = self.system, self.rng, self.system.hyp
        if call == "create_sbs":
            if len(hyp.sbs) >= MAX_LIVE:
                return hyp.destroy_sbs(self.realm(), core=core)
            idle = sorted(hyp.delegated - set(s.rmm.owner))
            if len(hyp.free) < 8 and idle:
                # return a stray delegation so the pool does not drain
                return hyp.undelegate(rng.choice(idle), core=core)
            return hyp.create_sbs(self.manifest(), core=core)
        if call == "create_overlap":
            owned = sorted(s.rmm.owner)
            if not owned or len(hyp.sbs) >= MAX_LIVE:
                return None
            m = self.manifest().with_(shared_pages=0, vq_size=0, vq_offset=0)
            picks = hyp.allocate(m.memory_pages)
            picks[rng.randrange(len(picks))] = rng.choice(owned)
            try:
                return hyp.create_sbs(m, granules=picks, core=core)
            finally:
                hyp.release([g for g in picks if g not in hyp.delegated])
        rid = self.realm()
        if call == "destroy_sbs":
            return None if rid is None else hyp.destroy_sbs(rid, core=core)
        if call == "run":
            return None if rid is None else hyp.run(rid, core=core)
        if call == "rpc_add":
            rid = self.active_realm()
            if rid is None or hyp.sbs[rid].manifest.entry_script != "add_responder":
                return None
            a, b = rng.randrange(-1000, 1000), rng.randrange(-1000, 1000)
            got = s.app.add(rid, a, b, core=core)
            if got != a + b:
                self.checker._flag("S3", f"rpc add({a},{b}) returned {got}")
            return got
        if call == "delegate":
            return hyp.delegate(self.granule(), core=core)
        if call == "undelegate":
            return hyp.undelegate(self.granule(), core=core)
        if call == "rogue_smc":
            kind = rng.choice(("delegate", "undelegate", "share", "ex_access"))
            kw = {"enable": rng.random() < 0.5} if kind == "ex_access" else {}
            if kind in ("undelegate", "share"):
                kw["realm_id"] = rid
            return s.rogue_smc(kind, self.granule(), core=core, **kw)
        if call in ("host_read", "host_write", "secure_read"):
            pa = self.granule() * PAGE + rng.randrange(0, PAGE, 8)
            if call == "host_read":
                return s.host_read(pa, 8, core=core)
            if call == "host_write":
                return s.host_write(pa, rng.randbytes(8), core=core)
            return s.secure_read(pa, 8, core=core)
        rid = self.active_realm()
        if rid is None:
            return None
        if call == "guest_read":
            return s.guest_op(rid, act.ReadMem(self.ipa(rid), 8), core=core)
        if call == "guest_write":
            return s.guest_op(rid, act.WriteMem(self.ipa(rid), rng.randbytes(8)), core=core)
        if call == "guest_exec":
            return s.guest_op(rid, act.Execute(self.ipa(rid)), core=core)
        if call == "guest_ex_access":
            pages = [self.ipa(rid) for _ in range(rng.randint(1, 2))]
            return s.guest_op(rid, act.Rsi("ex_access", {"pages": pages,
                                                         "enable": rng.random() < 0.6}),
                              core=core)
        if call == "guest_mmio_mark":
            return s.guest_op(rid, act.Rsi("mmio", {"pages": [0x0A00_0000]}), core=core)
        if call == "guest_mmio":
            return s.guest_op(rid, act.MmioRead(rng.choice((0x0A00_0000, 0x0A00_1000))),
                              core=core)
        if call == "forge_mmio":
            return hyp.forge_mmio(rid, rng.choice((0x0A00_0000, 0x0A00_1000, 0x0B00_0000)),
                                  rng.choice(("read", "write")), core=core)
        if call == "interrupt":
            src = rng.choice(("Timer", "Device", "Exception"))
            return hyp.inject_interrupt(rid, src, rng.choice(DEVICE_KINDS), core=core)
        if call == "map_after_activate":
            return s.rmi("rmi_rtt_map_unprotected", core=core, realm_id=rid,
                         granule=self.granule(), ipa=UNPROTECTED_BASE + PAGE * rng.randrange(4))
        if call == "set_ripas":
            return s.rmi("rmi_rtt_set_ripas", core=core, realm_id=rid, ipa_start=0,
                         ipa_end=PAGE, state=Ripas.RAM)
        if call == "attest":
            return s.rmm.get_attestation_report(rid)
        raise ValueError(call)

    def run(self) -> FuzzReport:
        report = FuzzReport(self.cfg)
        t0 = time.perf_counter()
        trace = self.system.trace
        report.violations += self.checker.check(0, "boot")
        for step in range(1, self.cfg.steps + 1):
            call = self.rng.choices(self.calls, self.weights)[0]
            core = self.rng.randrange(self.cfg.cores)
            report.coverage[call] += 1
            try:
                self.do(call, core)
                outcome = "ok"
            except SimError as exc:
                outcome = exc.kind
            report.outcomes[f"{call}:{outcome}"] += 1
            trace.emit(EventKind.NOTE, "fuzz_step", core=core, outcome=outcome,
                       step=step, call=call)
            found = self.checker.check(step, call)
            report.violations += found
            report.steps_run = step
            if found and self.cfg.stop_on_violation:
                break
        report.states_reached = self.checker.legal_states_seen()
        report.elapsed = time.perf_counter() - t0
        return report


def fuzz(cfg: FuzzConfig, trace: EventTrace | None = None) -> FuzzReport:
    return Fuzzer(cfg, trace).run()


def dynamic_pairs(report: FuzzReport) -> set:
    return {p for p in report.states_reached if p in DYNAMIC_STATES}

