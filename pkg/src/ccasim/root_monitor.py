"""Trusted-firmware model: owns both GPTs and authorizes every change to them.

The firmware records the granule arguments of hypervisor RMIs as they pass
through on their way to the RMM. When the RMM later asks for a GPT change it
must find a matching record, otherwise the request is denied. That keeps the
normal world's and the realm world's views of memory in agreement.
"""
from __future__ import annotations

import contextlib
import os
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import AddressOutOfRange, Denied, LayoutInvalid, ScrubViolation
from .hooks import Hooks
from .memory import GptId, Machine, PasValue, World
from .trace import EventKind

LAYOUT_ENV = "CCASIM_LAYOUT"

# the four states a dynamic (normal-region) granule can occupy
UNDELEGATED = (PasValue.NORMAL, PasValue.NOT_ACCESSIBLE)
DELEGATED = (PasValue.REALM, PasValue.REALM)
SHARED = (PasValue.NORMAL, PasValue.REALM)
EXCLUSIVE = (PasValue.NOT_ACCESSIBLE, PasValue.REALM)
DYNAMIC_STATES = frozenset({UNDELEGATED, DELEGATED, SHARED, EXCLUSIVE})
STATIC_STATES = frozenset({(PasValue.ROOT, PasValue.ROOT),
                           (PasValue.SECURE, PasValue.SECURE),
                           (PasValue.REALM, PasValue.REALM)})
LEGAL_STATES = DYNAMIC_STATES | STATIC_STATES

# RMIs whose granule arguments the firmware records
LOGGED_RMIS = ("rmi_granule_delegate", "rmi_granule_undelegate",
               "rmi_rtt_map_unprotected")


@dataclass
class Layout:
    """Assignment of every granule to the world that owns it at boot."""

    n_granules: int
    regions: dict[World, list[range]] = field(default_factory=dict)

    def validate(self) -> None:
        seen = np.zeros(self.n_granules, dtype=np.int16)
        for world, ranges in self.regions.items():
            for r in ranges:
                if r.start < 0 or r.stop > self.n_granules or r.start >= r.stop:
                    raise LayoutInvalid(f"{world.name} region {r.start}-{r.stop - 1} "
                                        f"outside machine of {self.n_granules}")
                seen[r.start:r.stop] += 1
        if (seen > 1).any():
            g = int(np.argmax(seen > 1))
            raise LayoutInvalid(f"granule {g} assigned to more than one world")
        if (seen == 0).any():
            g = int(np.argmax(seen == 0))
            raise LayoutInvalid(f"granule {g} not assigned to any world")

    def world_of(self) -> np.ndarray:
        out = np.full(self.n_granules, -1, dtype=np.int8)
        for world, ranges in self.regions.items():
            for r in ranges:
                out[r.start:r.stop] = world
        return out

    def granules(self, world: World) -> list[int]:
        return [g for r in self.regions.get(world, []) for g in r]

    @classmethod
    def simple(cls, root: int = 4, realm: int = 4, normal: int = 1008,
               secure: int = 8) -> "Layout":
        """Contiguous root | realm | normal | secure blocks."""
        regions = {}
        pos = 0
        for world, n in ((World.ROOT, root), (World.REALM, realm),
                         (World.NORMAL, normal), (World.SECURE, secure)):
            if n:
                regions[world] = [range(pos, pos + n)]
            pos += n
        return cls(pos, regions)

    @classmethod
    def parse(cls, text: str) -> "Layout":
        """Parse ``granules N`` plus ``<world> A-B`` (inclusive) lines."""
        n = None
        regions: dict[World, list[range]] = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, rest = line.partition(" ")
            rest = rest.strip()
            if key == "granules":
                n = int(rest, 0)
                continue
            try:
                world = World[key.upper()]
            except KeyError:
                raise LayoutInvalid(f"unknown world {key!r}") from None
            m = re.fullmatch(r"(\w+)\s*(?:-\s*(\w+))?", rest)
            if not m:
                raise LayoutInvalid(f"bad range {rest!r}")
            lo = int(m.group(1), 0)
            hi = int(m.group(2), 0) if m.group(2) else lo
            regions.setdefault(world, []).append(range(lo, hi + 1))
        if n is None:
            raise LayoutInvalid("layout missing 'granules N' line")
        return cls(n, regions)

    def format(self) -> str:
        lines = [f"granules {self.n_granules}"]
        for world in World:
            for r in self.regions.get(world, []):
                lines.append(f"{world.name.lower()} {r.start}-{r.stop - 1}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path: str | None = None) -> "Layout":
        path = path or os.environ.get(LAYOUT_ENV)
        if not path:
            return cls.simple()
        with open(path) as fh:
            return cls.parse(fh.read())


class GptLock:
    """Spinlock stand-in. The scheduler is single threaded, so contention
    shows up as a re-entrant acquire, which is a modelling bug."""

    def __init__(self):
        self.held_by: int | None = None
        self.acquisitions = 0

    @contextlib.contextmanager
    def held(self, core: int):
        if self.held_by is not None:
            raise RuntimeError(f"GPT lock already held by core {self.held_by}")
        self.held_by = core
        self.acquisitions += 1
        try:
            yield
        finally:
            self.held_by = None


class TrustedFirmware:
    def __init__(self, machine: Machine, hooks: Hooks | None = None):
        self.machine = machine
        self.hooks = hooks or Hooks()
        self.pending: Counter = Counter()
        self.lock = GptLock()
        self.dynamic = np.zeros(machine.n_granules, dtype=bool)
        self.booted = False

    @property
    def trace(self):
        return self.machine.trace

    # -- boot --------------------------------------------------------------

    def boot_create_gpts(self, layout: Layout) -> None:
        if self.booted:
            raise RuntimeError("GPTs already created")
        if layout.n_granules != self.machine.n_granules:
            raise LayoutInvalid(f"layout covers {layout.n_granules} granules, "
                                f"machine has {self.machine.n_granules}")
        layout.validate()
        world = layout.world_of()
        gpt_n = world.astype(np.int8)  # World and PasValue share numbering
        gpt_rs = gpt_n.copy()
        gpt_rs[world == World.NORMAL] = PasValue.NOT_ACCESSIBLE
        self.machine.gpt[GptId.N] = gpt_n
        self.machine.gpt[GptId.RS] = gpt_rs
        self.dynamic = world == World.NORMAL
        self.booted = True
        self.machine.flush_all_gpc_tlbs()
        self.trace.emit(EventKind.BOOT, "boot_create_gpts",
                        granules=layout.n_granules,
                        normal=int(self.dynamic.sum()))

    # -- request log -------------------------------------------------------

    def log_rmi(self, rmi: str, granule: int | None, realm_id: int | None = None):
        """Record a granule-bearing RMI. Returns the key, or None if not logged."""
        if rmi not in LOGGED_RMIS or granule is None:
            return None
        key = (rmi, int(granule), realm_id)
        self.pending[key] += 1
        return key

    def retire(self, key) -> None:
        """Drop one unconsumed instance of ``key`` when its RMI returns."""
        if key is not None and self.pending[key] > 0:
            self.pending[key] -= 1
            if not self.pending[key]:
                del self.pending[key]

    def _authorize(self, key) -> bool:
        if self.hooks.skip_log_check:
            return True
        if self.pending[key] > 0:
            self.pending[key] -= 1
            if not self.pending[key]:
                del self.pending[key]
            return True
        self.pending.pop(key, None)
        return False

    # -- helpers -----------------------------------------------------------

    def _dynamic_pair(self, granule: int):
        try:
            g = self.machine.check_granule(granule)
        except AddressOutOfRange as exc:
            raise Denied(str(exc)) from None
        if not self.dynamic[g]:
            raise Denied(f"granule {g} is not in the normal-world pool")
        return g, self.machine.pair(g)

    def _write(self, g: int, n: PasValue | None, rs: PasValue | None, core: int):
        if n is not None:
            self.machine.set_gpt_entry(GptId.N, g, n)
        if rs is not None:
            self.machine.set_gpt_entry(GptId.RS, g, rs)
        if not self.hooks.skip_flush:
            self.machine.flush_all_gpc_tlbs(core)

    def _smc(self, name: str, core: int, fn, **args):
        try:
            with self.lock.held(core):
                fn()
        except (Denied, ScrubViolation) as exc:
            self.trace.emit(EventKind.SMC, name, core=core, outcome=exc.kind, **args)
            raise
        self.trace.emit(EventKind.SMC, name, core=core, **args)

    # -- SMCs from the RMM -------------------------------------------------

    def smc_delegate(self, granule: int, core: int = -1) -> None:
        def body():
            g, pair = self._dynamic_pair(granule)
            if pair != UNDELEGATED:
                raise Denied(f"delegate of granule {g} in state {_fmt(pair)}")
            if not self._authorize(("rmi_granule_delegate", g, None)):
                raise Denied(f"delegate of granule {g} not requested by hypervisor")
            self._write(g, PasValue.REALM, PasValue.REALM, core)
        self._smc("smc_delegate", core, body, granule=int(granule))

    def smc_undelegate(self, granule: int, realm_id: int | None = None,
                       core: int = -1) -> None:
        def body():
            g, pair = self._dynamic_pair(granule)
            if pair not in (DELEGATED, SHARED):
                raise Denied(f"undelegate of granule {g} in state {_fmt(pair)}")
            if not self.machine.is_zero(g):
                raise ScrubViolation(f"granule {g} not scrubbed before undelegate")
            if not self._authorize(("rmi_granule_undelegate", g, realm_id)):
                raise Denied(f"undelegate of granule {g} not requested by hypervisor")
            if pair == SHARED:
                # tear sharing down first so no step skips a legal state
                self._write(g, PasValue.REALM, None, core)
            self._write(g, PasValue.NORMAL, PasValue.NOT_ACCESSIBLE, core)
        self._smc("smc_undelegate", core, body, granule=int(granule), realm=realm_id)

    def smc_2gpt_ns_share(self, granule: int, realm_id: int | None = None,
                          core: int = -1) -> None:
        def body():
            g, pair = self._dynamic_pair(granule)
            if pair != DELEGATED:
                raise Denied(f"share of granule {g} in state {_fmt(pair)}")
            if not self._authorize(("rmi_rtt_map_unprotected", g, realm_id)):
                raise Denied(f"share of granule {g} not requested by hypervisor")
            self._write(g, PasValue.NORMAL, PasValue.REALM, core)
        self._smc("smc_2gpt_ns_share", core, body, granule=int(granule), realm=realm_id)

    def smc_2gpt_ex_access(self, granule: int, enable: bool, core: int = -1) -> None:
        def body():
            g, pair = self._dynamic_pair(granule)
            want = SHARED if enable else EXCLUSIVE
            if pair != want:
                raise Denied(f"ex_access({enable}) on granule {g} in state {_fmt(pair)}")
            self._write(g, PasValue.NOT_ACCESSIBLE if enable else PasValue.NORMAL,
                        None, core)
        self._smc("smc_2gpt_ex_access", core, body, granule=int(granule),
                  enable=bool(enable))


def _fmt(pair) -> str:
    return f"({pair[0].name},{pair[1].name})"
