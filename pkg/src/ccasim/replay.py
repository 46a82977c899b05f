"""Rebuild GPT and stage-2 state from a trace file alone.

The verifier starts from the boot layout, applies every ``GptUpdate`` and
``S2Update`` event in order and compares the result with a live system. It
shares no code with the monitors beyond the enum names in the trace.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .memory import GptId, PasValue, World
from .realm_monitor import RealmState
from .root_monitor import Layout
from .trace import Event, EventKind


@dataclass
class ReplayState:
    gpt: np.ndarray
    s2: dict[int, dict[int, tuple[int, str]]] = field(default_factory=dict)
    events: int = 0

    def s2_of_live(self) -> dict[int, dict[int, tuple[int, str]]]:
        return {rid: t for rid, t in self.s2.items() if t}


def boot_gpts(layout: Layout) -> np.ndarray:
    gpt = np.empty((2, layout.n_granules), dtype=np.int8)
    for world, ranges in layout.regions.items():
        pas = PasValue[World(world).name]
        for r in ranges:
            gpt[GptId.N, r.start:r.stop] = pas
            gpt[GptId.RS, r.start:r.stop] = (PasValue.NOT_ACCESSIBLE
                                             if world == World.NORMAL else pas)
    return gpt


def replay(layout: Layout, lines) -> ReplayState:
    st = ReplayState(boot_gpts(layout))
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        ev = Event.from_line(line)
        st.events += 1
        a = ev.args
        if ev.kind is EventKind.GPT_UPDATE:
            st.gpt[GptId[ev.name], a["granule"]] = PasValue[a["pas"]]
        elif ev.kind is EventKind.S2_UPDATE:
            table = st.s2.setdefault(a["realm"], {})
            if ev.name == "map":
                table[a["ipa"]] = (a["granule"], a["perms"])
            else:
                table.pop(a["ipa"], None)
    return st


def verify(system, lines) -> list[str]:
    """Differences between a replayed trace and ``system``; empty when equal."""
    st = replay(system.layout, lines)
    diffs = []
    bad = np.flatnonzero((st.gpt != system.machine.gpt).any(axis=0))
    for g in bad[:16]:
        diffs.append(f"granule {g}: replay {st.gpt[:, g].tolist()} "
                     f"live {system.machine.gpt[:, g].tolist()}")
    live = {rid: dict(rd.s2) for rid, rd in system.rmm.realms.items()
            if rd.state is not RealmState.DESTROYED and rd.s2}
    if st.s2_of_live() != live:
        diffs.append("stage-2 tables differ")
    return diffs
