"""Exhaustive exploration of the granule state machine on a tiny machine.

Every call the normal world or a realm can cause at the firmware interface is
tried from every reachable GPT configuration, breadth first. The firmware's
request log is empty between calls, so a configuration is fully described by
the two GPT rows and the search can deduplicate on them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SimError
from ..hooks import Hooks
from ..memory import Machine, PasValue, World
from ..root_monitor import Layout, TrustedFirmware
from ..trace import EventTrace

REALM_ID = 1


def _calls(n: int):
    """(label, granule) pairs; one granule past the end probes range checks."""
    kinds = ("delegate", "undelegate", "share", "ex_on", "ex_off",
             "rogue_delegate", "rogue_undelegate", "rogue_share")
    return [(k, g) for g in range(n + 1) for k in kinds]


@dataclass
class ExploreResult:
    depth: int
    configurations: set = field(default_factory=set)
    pairs: set = field(default_factory=set)
    transitions: int = 0
    rejected: int = 0
    per_depth: list[int] = field(default_factory=list)

    def pair_names(self) -> list[str]:
        return sorted(f"{a.name},{b.name}" for a, b in self.pairs)


class Explorer:
    def __init__(self, n_granules: int = 4, hooks: Hooks | None = None):
        self.n = n_granules
        self.machine = Machine(n_granules, n_cores=1, trace=EventTrace(keep=False))
        self.tf = TrustedFirmware(self.machine, hooks or Hooks())
        self.tf.boot_create_gpts(Layout(n_granules, {World.NORMAL: [range(n_granules)]}))

    def _key(self) -> bytes:
        return self.machine.gpt.tobytes()

    def _restore(self, key: bytes) -> None:
        self.machine.gpt[:] = np.frombuffer(key, dtype=np.int8).reshape(2, self.n)
        self.machine.flush_all_gpc_tlbs()
        self.tf.pending.clear()

    def apply(self, kind: str, g: int) -> None:
        tf = self.tf
        logged = {"delegate": ("rmi_granule_delegate", None),
                  "undelegate": ("rmi_granule_undelegate", None),
                  "share": ("rmi_rtt_map_unprotected", REALM_ID)}
        if kind in logged:
            rmi, realm = logged[kind]
            key = tf.log_rmi(rmi, g, realm)
            try:
                self._smc(kind, g, realm)
            finally:
                tf.retire(key)
        elif kind.startswith("rogue_"):
            self._smc(kind[6:], g, REALM_ID)
        else:
            tf.smc_2gpt_ex_access(g, kind == "ex_on", core=0)

    def _smc(self, kind: str, g: int, realm) -> None:
        tf = self.tf
        if kind == "delegate":
            tf.smc_delegate(g, core=0)
        elif kind == "undelegate":
            tf.smc_undelegate(g, realm, core=0)
        else:
            tf.smc_2gpt_ns_share(g, realm, core=0)

    def run(self, depth: int = 6) -> ExploreResult:
        res = ExploreResult(depth)
        start = self._key()
        res.configurations.add(start)
        frontier = [start]
        calls = _calls(self.n)
        for _ in range(depth):
            nxt = []
            for key in frontier:
                for kind, g in calls:
                    self._restore(key)
                    try:
                        self.apply(kind, g)
                    except SimError:
                        res.rejected += 1
                        continue
                    res.transitions += 1
                    k2 = self._key()
                    if k2 not in res.configurations:
                        res.configurations.add(k2)
                        nxt.append(k2)
            res.per_depth.append(len(nxt))
            frontier = nxt
        for key in res.configurations:
            gpt = np.frombuffer(key, dtype=np.int8).reshape(2, self.n)
            for g in range(self.n):
                res.pairs.add((PasValue(int(gpt[0, g])), PasValue(int(gpt[1, g]))))
        return res


def explore(n_granules: int = 4, depth: int = 6, hooks: Hooks | None = None) -> ExploreResult:
    return Explorer(n_granules, hooks).run(depth)
