"""Independent oracle for the four security primitives.

The checker never trusts the monitors' own bookkeeping where it can avoid it.
Ownership comes from the stage-2 tables, the isolation matrix is evaluated
straight off the GPT arrays, the MMIO gate is judged from the RSI stream in
the trace, and measurements are refolded from the RMIs the checker saw.

Invariant ids:

``S0``  every granule's (GptN, GptRs) pair is a legal state, static regions unchanged
``S1``  no granule is mapped by two realms; the hypervisor's delegation
        ledger agrees with the GPTs
``S2``  post-flush isolation matrix and TLB coherence
``S3``  shared region non-executable, contiguous, sealed at activation;
        MMIO emulated only for pages the guest marked
``S4``  realm measurement equals an independent refold
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..manifest import PAGE, UNPROTECTED_BASE
from ..memory import GptId, PasValue, World, permits
from ..realm_monitor import RealmState
from ..root_monitor import DYNAMIC_STATES, LEGAL_STATES
from ..trace import Event, EventKind


@dataclass(frozen=True)
class Violation:
    step: int
    call: str
    invariant: str
    detail: str

    def to_line(self) -> str:
        return f"{self.step}\t{self.call}\t{self.invariant}\t{self.detail}"


def _h(b: bytes) -> bytes:
    return hashlib.sha256(b).digest()


class ShadowMeasurement:
    """Refolds each realm's measurement from the RMIs that built it."""

    def __init__(self, bootloader: bytes):
        self.bootloader = bootloader
        self.values: dict[int, bytes] = {}

    def _fold(self, rid: int, kind: str, blob: bytes) -> None:
        ev = _h(kind.encode() + b"\x00" + blob)
        self.values[rid] = _h(self.values[rid] + ev)

    def observe(self, name: str, kw: dict, result, outcome: str) -> None:
        if outcome != "ok":
            return
        if name == "rmi_realm_create":
            self.values[result] = bytes(32)
            self._fold(result, "RealmCreate", kw["params"].canonical())
            self._fold(result, "Bootloader", _h(self.bootloader))
        elif name == "rmi_data_create":
            page = bytes(kw["src_content"]).ljust(PAGE, b"\0")
            self._fold(kw["realm_id"], "DataCreate",
                       kw["ipa"].to_bytes(8, "little") + _h(page))
        elif name == "rmi_rtt_map_unprotected":
            self._fold(kw["realm_id"], "MapUnprotected", kw["ipa"].to_bytes(8, "little"))
        elif name == "extend_measurement":
            self._fold(kw["realm_id"], kw["kind"], kw["blob"])


class InvariantChecker:
    def __init__(self, system):
        self.system = system
        m = system.machine
        self.boot_gpt = m.gpt.copy()
        self.static = ~system.tf.dynamic.copy()
        self.violations: list[Violation] = []
        self.shadow = ShadowMeasurement(system.rmm.firmware.bootloader)
        self.marked: dict[int, set[int]] = {}
        self.sealed: set[int] = set()
        self.pending: list[tuple[str, str]] = []
        self.states_seen: set[tuple[int, int]] = set()
        self.step = 0
        self.call = "boot"
        system.trace.listeners.append(self._on_event)
        system.rmi_observers.append(self._on_rmi)
        m.access_observers.append(self._on_access)
        self._note_states()

    # -- online observers --------------------------------------------------

    def _flag(self, inv: str, detail: str) -> None:
        self.pending.append((inv, detail))

    def _on_rmi(self, name, kw, result, outcome) -> None:
        self.shadow.observe(name, kw, result, outcome)
        if name == "rmi_realm_activate" and outcome == "ok":
            self.sealed.add(kw["realm_id"])

    def _on_event(self, ev: Event) -> None:
        a = ev.args
        if ev.kind is EventKind.RSI and ev.name == "rsi_mmio" and ev.outcome == "ok":
            self.marked.setdefault(a["realm"], set()).update(a["pages"])
        elif ev.kind is EventKind.MMIO and ev.outcome.startswith("Emulate"):
            page = a["ipa"] - a["ipa"] % PAGE
            if page not in self.marked.get(a["realm"], ()):
                self._flag("S3", f"MMIO emulated at unmarked ipa {a['ipa']:#x} "
                                 f"of realm {a['realm']}")
        elif (ev.kind is EventKind.S2_UPDATE and ev.name == "map"
              and a["ipa"] >= UNPROTECTED_BASE and a["realm"] in self.sealed):
            self._flag("S3", f"unprotected mapping {a['ipa']:#x} added to active "
                             f"realm {a['realm']}")

    def _on_access(self, core, g, access, pas, allowed) -> None:
        if core.sec_state is World.ROOT:
            return
        truth = PasValue(int(self.system.machine.gpt[core.active_gpt, g]))
        if allowed != permits(core.sec_state, truth):
            self._flag("S2", f"core {core.core_id} {core.sec_state.name} {access.name} "
                             f"granule {g}: GPC said {allowed}, GPT says {truth.name}")

    # -- per-step checks -------------------------------------------------

    def _note_states(self) -> None:
        m = self.system.machine
        pairs = m.gpt[0].astype(np.int16) * 8 + m.gpt[1]
        for code in np.unique(pairs):
            self.states_seen.add((int(code) // 8, int(code) % 8))

    def check(self, step: int, call: str) -> list[Violation]:
        """Run every invariant; returns the violations found at this barrier."""
        self.step, self.call = step, call
        found = [Violation(step, call, inv, d) for inv, d in self.pending]
        self.pending.clear()
        for inv, d in self._structural():
            found.append(Violation(step, call, inv, d))
        self._note_states()
        self.violations.extend(found)
        return found

    def _structural(self):
        sysm = self.system
        m = sysm.machine
        n_g, rs_g = m.gpt[GptId.N], m.gpt[GptId.RS]

        # S0: state closure
        if (m.gpt[:, self.static] != self.boot_gpt[:, self.static]).any():
            yield "S0", "static region GPT entry changed"
        for g in np.flatnonzero(~self.static):
            pair = (PasValue(int(n_g[g])), PasValue(int(rs_g[g])))
            if pair not in DYNAMIC_STATES:
                yield "S0", f"granule {g} in illegal state {pair[0].name},{pair[1].name}"
        for g in np.flatnonzero(self.static):
            pair = (PasValue(int(n_g[g])), PasValue(int(rs_g[g])))
            if pair not in LEGAL_STATES:
                yield "S0", f"static granule {g} in illegal state"

        # S1: ownership from the stage-2 tables
        private: dict[int, int] = {}
        shared: dict[int, int] = {}
        live = [rd for rd in sysm.rmm.realms.values() if rd.state is not RealmState.DESTROYED]
        for rd in live:
            for ipa, (g, _) in rd.s2.items():
                table = shared if ipa >= UNPROTECTED_BASE else private
                other = private.get(g, shared.get(g))
                if other is not None and other != rd.realm_id:
                    yield "S1", f"granule {g} mapped by realms {other} and {rd.realm_id}"
                table[g] = rd.realm_id
        ledger = sysm.hyp.delegated
        for g in np.flatnonzero(~self.static):
            g = int(g)
            undelegated = n_g[g] == PasValue.NORMAL and rs_g[g] == PasValue.NOT_ACCESSIBLE
            if undelegated == (g in ledger):
                yield "S1", (f"granule {g} hypervisor ledger says "
                             f"{'delegated' if g in ledger else 'normal'}, GPT disagrees")

        # S2: isolation matrix evaluated straight off the GPT arrays
        normal_ok = (n_g == PasValue.NORMAL) | (n_g == PasValue.ALL_ACCESSIBLE)
        realm_ok = (rs_g == PasValue.REALM) | (rs_g == PasValue.ALL_ACCESSIBLE)
        secure_ok = (rs_g == PasValue.SECURE) | (rs_g == PasValue.ALL_ACCESSIBLE)
        for g, rid in private.items():
            if normal_ok[g] or secure_ok[g]:
                yield "S2", f"private granule {g} of realm {rid} reachable from outside"
            if not realm_ok[g]:
                yield "S2", f"private granule {g} of realm {rid} not reachable by its realm"
        legacy = sysm.hooks.legacy_ns_map
        for g, rid in shared.items():
            if legacy and g not in ledger:
                # stock-CCA mapping of a normal granule: GptRs alone guards it
                continue
            if secure_ok[g]:
                yield "S2", f"shared granule {g} of realm {rid} reachable by secure world"
            if not realm_ok[g]:
                yield "S2", f"shared granule {g} of realm {rid} lost its realm mapping"
        for g in np.flatnonzero(~self.static):
            g = int(g)
            if g not in ledger and (realm_ok[g] or secure_ok[g]):
                yield "S2", f"normal granule {g} reachable from realm or secure world"
        for c in m.cores:
            if c.active_gpt is None:
                continue
            for g, pas in c.tlb.items():
                if int(m.gpt[c.active_gpt, g]) != pas:
                    yield "S2", (f"core {c.core_id} TLB holds {pas.name} for granule {g}, "
                                 f"GPT has {PasValue(int(m.gpt[c.active_gpt, g])).name}")

        # S3: shared-region shape
        for rd in live:
            ipas = sorted(i for i in rd.s2 if i >= UNPROTECTED_BASE)
            for i in ipas:
                if "X" in rd.s2[i][1]:
                    yield "S3", f"shared ipa {i:#x} of realm {rd.realm_id} is executable"
            if ipas and ipas != list(range(ipas[0], ipas[0] + PAGE * len(ipas), PAGE)):
                yield "S3", f"shared region of realm {rd.realm_id} not contiguous"

        # S4: measurement refold
        for rd in live:
            want = self.shadow.values.get(rd.realm_id)
            if want is not None and want != rd.measurement.value:
                yield "S4", f"realm {rd.realm_id} measurement differs from refold"

    # -- reporting -----------------------------------------------------

    def dynamic_states_seen(self) -> set[tuple[PasValue, PasValue]]:
        out = set()
        for a, b in self.states_seen:
            pair = (PasValue(a), PasValue(b))
            if pair in DYNAMIC_STATES:
                out.add(pair)
        return out

    def legal_states_seen(self) -> set[tuple[PasValue, PasValue]]:
        return {(PasValue(a), PasValue(b)) for a, b in self.states_seen
                if (PasValue(a), PasValue(b)) in LEGAL_STATES}

