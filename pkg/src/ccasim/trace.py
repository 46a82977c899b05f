"""Ordered event log and the per-run counter report derived from it.

Every trace line is tab separated with a fixed field order::

    step  core  kind  name  args  outcome

``args`` is compact JSON with sorted keys so that two runs with the same
inputs produce byte-identical files.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, TextIO


class EventKind(enum.Enum):
    BOOT = "Boot"
    SMC = "Smc"
    RMI = "Rmi"
    RSI = "Rsi"
    CONTEXT_SWITCH = "ContextSwitch"
    GPF = "Gpf"
    TLB_FLUSH = "TlbFlush"
    GPT_UPDATE = "GptUpdate"
    S2_UPDATE = "S2Update"
    MEM = "Mem"
    REC_EXIT = "RecExit"
    INTERRUPT = "Interrupt"
    INTERRUPT_FILTERED = "InterruptFiltered"
    MMIO = "Mmio"
    ATTACK_BLOCKED = "AttackBlocked"
    NOTE = "Note"


@dataclass(frozen=True)
class Event:
    step: int
    core: int
    kind: EventKind
    name: str
    args: dict = field(default_factory=dict)
    outcome: str = "ok"

    def to_line(self) -> str:
        args = json.dumps(self.args, sort_keys=True, separators=(",", ":"))
        return "\t".join(
            [str(self.step), str(self.core), self.kind.value, self.name, args,
             self.outcome])

    @classmethod
    def from_line(cls, line: str) -> "Event":
        step, core, kind, name, args, outcome = line.rstrip("\n").split("\t")
        return cls(int(step), int(core), EventKind(kind), name, json.loads(args),
                   outcome)


@dataclass
class CounterReport:
    """Per-run totals of world switches, firmware calls and protection faults."""

    context_switches: int = 0
    hyp_vm_calls: int = 0
    smcs: int = 0
    rmis: int = 0
    rsis: int = 0
    gpfs: int = 0

    def count(self, ev: Event) -> None:
        k = ev.kind
        if k is EventKind.CONTEXT_SWITCH:
            self.context_switches += 1
        elif k is EventKind.SMC:
            self.smcs += 1
        elif k is EventKind.RMI:
            self.rmis += 1
            if ev.name == "rmi_rec_enter":
                self.hyp_vm_calls += 1
        elif k is EventKind.REC_EXIT:
            self.hyp_vm_calls += 1
        elif k is EventKind.RSI:
            self.rsis += 1
        elif k is EventKind.GPF:
            self.gpfs += 1

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "CounterReport":
        rep = cls()
        for ev in events:
            rep.count(ev)
        return rep

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "CounterReport":
        return cls.from_events(Event.from_line(l) for l in lines if l.strip())

    def as_dict(self) -> dict[str, int]:
        return asdict(self)

    def is_empty(self) -> bool:
        return not any(self.as_dict().values())

    def format(self) -> str:
        return "\n".join(f"{k}\t{v}" for k, v in self.as_dict().items())


class EventTrace:
    """Append-only event record with online counters.

    ``sink`` (an open text file) receives each line as it is emitted. Setting
    ``keep=False`` drops the in-memory list, which the exhaustive state
    exploration uses to stay fast.
    """

    def __init__(self, start_step: int = 0, sink: TextIO | None = None,
                 keep: bool = True):
        self.next_step = start_step
        self.sink = sink
        self.keep = keep
        self.events: list[Event] = []
        self.counters = CounterReport()
        self.listeners: list = []

    def emit(self, kind: EventKind, name: str, core: int = -1,
             outcome: str = "ok", **args: Any) -> Event:
        ev = Event(self.next_step, core, kind, name, args, outcome)
        self.next_step += 1
        self.counters.count(ev)
        if self.keep:
            self.events.append(ev)
        if self.sink is not None:
            self.sink.write(ev.to_line() + "\n")
        for fn in self.listeners:
            fn(ev)
        return ev

    def lines(self) -> list[str]:
        return [ev.to_line() for ev in self.events]

    def of_kind(self, kind: EventKind, name: str | None = None) -> list[Event]:
        return [e for e in self.events
                if e.kind is kind and (name is None or e.name == name)]
