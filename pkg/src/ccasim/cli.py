"""Command-line driver.

Exit status: 0 success, 1 invariant violation or unexpected attack outcome,
2 usage error. State carries between invocations through ``--state``; the
trace file is appended to and the summary file holds this run's counters.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import snapshot
from .adversary.fuzz import FuzzConfig, fuzz
from .adversary.scenarios import (AttackScenario, ScenarioError, ScenarioRunner,
                                  catalog, run_attacks)
from .errors import LayoutInvalid, ManifestInvalid, SimError
from .hooks import MUTATIONS
from .manifest import Manifest, load_allow_list
from .realm_monitor import BootPolicy
from .replay import verify
from .root_monitor import LAYOUT_ENV, Layout
from .system import System
from .trace import CounterReport, EventTrace

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--state", help="snapshot file carried between commands")
    common.add_argument("--trace", help="append events here, one per line")
    common.add_argument("--summary", help="write this run's counter report here")
    common.add_argument("--layout", help=f"machine layout file (default ${LAYOUT_ENV})")
    common.add_argument("--allow-list", help="bootloader allow-list of image digests")

    p = _Parser(prog="ccasim", description="two-GPT sandboxed-service simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("boot", parents=[common], help="create a fresh machine")
    sp = sub.add_parser("launch", parents=[common], help="create and boot an SBS")
    sp.add_argument("manifest")
    sp = sub.add_parser("scenario", parents=[common], help="run a scenario file")
    sp.add_argument("file")
    sp = sub.add_parser("attack", parents=[common], help="run built-in attacks")
    sp.add_argument("name", help="attack name or 'all'")
    sp = sub.add_parser("fuzz", parents=[common], help="seeded random interleaving")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--steps", type=int, default=10_000)
    sp.add_argument("--cores", type=int, default=2)
    sp.add_argument("--mutation", choices=MUTATIONS)
    sp.add_argument("--report", help="write the fuzz report here")
    sub.add_parser("dump-state", parents=[common], help="print the saved machine state")
    sp = sub.add_parser("report", parents=[common],
                        help="recompute counters from a trace file")
    sp.add_argument("--verify", action="store_true",
                    help="replay the trace and compare with --state")
    return p


def _resolve(path: str) -> str:
    p = Path(path)
    if p.exists():
        return str(p)
    from importlib import resources
    data = resources.files("ccasim") / "data"
    for sub in ("manifests", "scenarios", "attacks"):
        cand = data / sub / p.name
        if cand.is_file():
            return str(cand)
    raise UsageError(f"no such file: {path}")


class Session:
    def __init__(self, args):
        self.args = args
        self.sink = open(args.trace, "a") if args.trace else None
        self.trace = EventTrace(sink=self.sink, keep=False)

    def close(self):
        if self.args.summary:
            Path(self.args.summary).write_text(self.trace.counters.format() + "\n")
        if self.sink:
            self.sink.close()

    def policy(self) -> BootPolicy:
        if self.args.allow_list:
            return BootPolicy(allow_list=load_allow_list(_resolve(self.args.allow_list)))
        return BootPolicy()

    def layout(self) -> Layout:
        path = self.args.layout or os.environ.get(LAYOUT_ENV)
        return Layout.load(_resolve(path)) if path else Layout.simple()

    def fresh(self) -> System:
        return System(self.layout(), policy=self.policy(), trace=self.trace)

    def system(self) -> System:
        st = self.args.state
        if st and Path(st).exists():
            s = snapshot.load(st, trace=self.trace)
            if self.args.allow_list:
                s.rmm.policy = self.policy()
            return s
        return self.fresh()

    def save(self, system: System) -> None:
        if self.args.state:
            snapshot.save(system, self.args.state)


def cmd_boot(ses: Session) -> int:
    s = ses.fresh()
    ses.save(s)
    print(f"booted {s.layout.n_granules} granules, {s.n_cores} cores")
    return EXIT_OK


def cmd_launch(ses: Session) -> int:
    s = ses.system()
    m = Manifest.load(_resolve(ses.args.manifest))
    rid, ex = s.hyp.launch(m)
    rd = s.rmm.realm(rid)
    print(f"realm {rid}\t{m.name}\texit={ex.reason.value}"
          + (f"\treject={ex.detail}" if ex.detail else ""))
    print(f"measurement {rd.measurement.hex()}")
    ses.save(s)
    return EXIT_OK


def cmd_scenario(ses: Session) -> int:
    path = _resolve(ses.args.file)
    sc = AttackScenario.load(path)
    system = ses.system() if ses.args.state and Path(ses.args.state).exists() else None
    runner = ScenarioRunner(system, ses.trace, Path(path).parent)
    if ses.args.layout:
        runner.cfg["layout"] = ses.layout()
    if ses.args.allow_list:
        runner.cfg["allow_list"] = ses.policy().allow_list
    v = runner.run(sc)
    for line in v.outcomes:
        print(line)
    print(v)
    if runner.system is not None:
        ses.save(runner.system)
    return EXIT_OK if v.passed else EXIT_VIOLATION


def cmd_attack(ses: Session) -> int:
    name = ses.args.name
    names = None if name == "all" else [name]
    if names and name not in catalog():
        raise UsageError(f"unknown attack {name!r}; known: {', '.join(sorted(catalog()))}")
    verdicts = run_attacks(names, trace_factory=lambda _: ses.trace)
    for v in verdicts:
        print(v)
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_VIOLATION


def cmd_fuzz(ses: Session) -> int:
    a = ses.args
    if a.steps < 0 or a.cores < 1:
        raise UsageError("steps must be >= 0 and cores >= 1")
    cfg = FuzzConfig(seed=a.seed, steps=a.steps, cores=a.cores, mutation=a.mutation,
                     **({"layout": Path(_resolve(a.layout)).read_text()} if a.layout else {}))
    rep = fuzz(cfg, trace=ses.trace)
    text = rep.format()
    if a.report:
        Path(a.report).write_text(text)
    print(text, end="")
    return EXIT_OK if rep.ok else EXIT_VIOLATION


def cmd_dump_state(ses: Session) -> int:
    if not ses.args.state or not Path(ses.args.state).exists():
        raise UsageError("dump-state needs an existing --state file")
    s = snapshot.load(ses.args.state, trace=EventTrace(keep=False))
    m = s.machine
    print(f"granules {m.n_granules} cores {s.n_cores} hooks {','.join(s.hooks.active()) or '-'}")
    for g in range(m.n_granules):
        a, b = m.pair(g)
        if s.tf.dynamic[g] and (a.name, b.name) != ("NORMAL", "NOT_ACCESSIBLE"):
            print(f"granule {g}\t{a.name},{b.name}\tzero={m.is_zero(g)}")
    for rid, rd in sorted(s.rmm.realms.items()):
        print(f"realm {rid}\t{rd.params.name}\t{rd.state.value}\tmeasurement "
              f"{rd.measurement.hex()}")
        for ipa, (g, perms) in sorted(rd.s2.items()):
            print(f"  s2 {ipa:#010x} -> granule {g} {perms}")
    return EXIT_OK


def cmd_report(ses: Session) -> int:
    if not ses.args.trace or not Path(ses.args.trace).exists():
        raise UsageError("report needs an existing --trace file")
    ses.sink.close()
    ses.sink = None
    with open(ses.args.trace) as fh:
        lines = fh.readlines()
    counters = CounterReport.from_lines(lines)
    print(counters.format())
    status = EXIT_OK
    if ses.args.verify:
        if not ses.args.state or not Path(ses.args.state).exists():
            raise UsageError("--verify needs an existing --state file")
        s = snapshot.load(ses.args.state, trace=EventTrace(keep=False))
        diffs = verify(s, lines)
        print("replay\t" + ("identical" if not diffs else "; ".join(diffs)))
        status = EXIT_OK if not diffs else EXIT_VIOLATION
    ses.trace.counters = counters
    return status


COMMANDS = {"boot": cmd_boot, "launch": cmd_launch, "scenario": cmd_scenario,
            "attack": cmd_attack, "fuzz": cmd_fuzz, "dump-state": cmd_dump_state,
            "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ccasim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    ses = Session(args)
    try:
        return COMMANDS[args.command](ses)
    except (UsageError, ScenarioError, snapshot.SnapshotError, OSError,
            ManifestInvalid, LayoutInvalid) as exc:
        print(f"ccasim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimError as exc:
        print(f"ccasim: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    finally:
        ses.close()


if __name__ == "__main__":
    sys.exit(main())
