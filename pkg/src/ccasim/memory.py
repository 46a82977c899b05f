"""Physical machine model: granules, worlds, cores, the two GPTs and the GPC."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import AddressOutOfRange, GranuleProtectionFault
from .trace import EventKind, EventTrace

GRANULE_SIZE = 4096
DEFAULT_GRANULES = 1024


class PasValue(enum.IntEnum):
    ROOT = 0
    REALM = 1
    NORMAL = 2
    SECURE = 3
    NOT_ACCESSIBLE = 4
    ALL_ACCESSIBLE = 5


class World(enum.IntEnum):
    ROOT = 0
    REALM = 1
    NORMAL = 2
    SECURE = 3


class Access(enum.Enum):
    READ = "R"
    WRITE = "W"
    EXECUTE = "X"


class GptId(enum.IntEnum):
    N = 0
    RS = 1


_HOME_PAS = {
    World.REALM: PasValue.REALM,
    World.NORMAL: PasValue.NORMAL,
    World.SECURE: PasValue.SECURE,
}


def permits(world: World, pas: PasValue) -> bool:
    """World-vs-PAS access matrix. The access kind does not matter here."""
    if world is World.ROOT:
        return True
    if pas is PasValue.ALL_ACCESSIBLE:
        return True
    return _HOME_PAS[world] is pas


def gpt_for(world: World) -> GptId | None:
    if world is World.ROOT:
        return None
    if world is World.NORMAL:
        return GptId.N
    return GptId.RS


@dataclass
class Core:
    core_id: int
    sec_state: World = World.NORMAL
    active_gpt: GptId | None = GptId.N
    tlb: dict[int, PasValue] = field(default_factory=dict)


class Machine:
    """Granule store plus per-core GPC state.

    GPT contents live in ``gpt`` (shape ``(2, n_granules)``). Only the root
    monitor is supposed to call :meth:`set_gpt_entry`.
    """

    def __init__(self, n_granules: int = DEFAULT_GRANULES, n_cores: int = 2,
                 granule_size: int = GRANULE_SIZE,
                 trace: EventTrace | None = None):
        if n_granules <= 0 or n_cores <= 0:
            raise ValueError("machine needs at least one granule and one core")
        self.n_granules = n_granules
        self.granule_size = granule_size
        self.content = np.zeros((n_granules, granule_size), dtype=np.uint8)
        self.gpt = np.full((2, n_granules), PasValue.NOT_ACCESSIBLE, dtype=np.int8)
        self.cores = [Core(i) for i in range(n_cores)]
        self.trace = trace if trace is not None else EventTrace()
        # fn(core, granule, access, pas, allowed) after every check
        self.access_observers: list = []

    # -- GPT entries -------------------------------------------------------

    def check_granule(self, granule: int) -> int:
        g = int(granule)
        if not 0 <= g < self.n_granules:
            raise AddressOutOfRange(f"granule {granule} outside [0, {self.n_granules})")
        return g

    def entry(self, gpt: GptId, granule: int) -> PasValue:
        return PasValue(int(self.gpt[gpt, self.check_granule(granule)]))

    def pair(self, granule: int) -> tuple[PasValue, PasValue]:
        g = self.check_granule(granule)
        return PasValue(int(self.gpt[0, g])), PasValue(int(self.gpt[1, g]))

    def set_gpt_entry(self, gpt: GptId, granule: int, pas: PasValue) -> None:
        g = self.check_granule(granule)
        self.gpt[gpt, g] = pas
        self.trace.emit(EventKind.GPT_UPDATE, gpt.name, granule=g, pas=pas.name)

    # -- granule protection check ----------------------------------------

    def lookup(self, core: Core, granule: int) -> PasValue:
        """PAS as the core's GPC sees it: TLB hit, else fill from the bound GPT."""
        pas = core.tlb.get(granule)
        if pas is None:
            pas = PasValue(int(self.gpt[core.active_gpt, granule]))
            core.tlb[granule] = pas
        return pas

    def gpc_check(self, core_id: int, granule: int, access: Access) -> None:
        """Raise :class:`GranuleProtectionFault` unless the access is allowed."""
        g = self.check_granule(granule)
        core = self.cores[core_id]
        if core.sec_state is World.ROOT:
            pas = PasValue(int(self.gpt[GptId.N, g]))
            allowed = True
        else:
            pas = self.lookup(core, g)
            allowed = permits(core.sec_state, pas)
        for fn in self.access_observers:
            fn(core, g, access, pas, allowed)
        if not allowed:
            self.trace.emit(EventKind.GPF, access.name, core=core_id, outcome="fault",
                            granule=g, world=core.sec_state.name, pas=pas.name)
            raise GranuleProtectionFault(core_id, g, core.sec_state, pas, access)

    def flush_all_gpc_tlbs(self, core: int = -1) -> None:
        for c in self.cores:
            c.tlb.clear()
        self.trace.emit(EventKind.TLB_FLUSH, "all", core=core)

    def context_switch(self, core_id: int, to: World) -> None:
        core = self.cores[core_id]
        frm = core.sec_state
        core.sec_state = to
        core.active_gpt = gpt_for(to)
        core.tlb.clear()
        self.trace.emit(EventKind.CONTEXT_SWITCH, f"{frm.name}->{to.name}", core=core_id)

    # -- byte access through the GPC -------------------------------------

    def _spans(self, pa: int, length: int):
        end = pa + length
        while pa < end:
            g, off = divmod(pa, self.granule_size)
            n = min(end - pa, self.granule_size - off)
            yield g, off, n
            pa += n

    def load(self, core_id: int, pa: int, length: int) -> bytes:
        out = bytearray()
        for g, off, n in self._spans(pa, length):
            self.gpc_check(core_id, g, Access.READ)
            out += self.content[g, off:off + n].tobytes()
        return bytes(out)

    def store(self, core_id: int, pa: int, data: bytes) -> None:
        spans = list(self._spans(pa, len(data)))
        # check every granule first so a fault leaves content untouched
        for g, _, _ in spans:
            self.gpc_check(core_id, g, Access.WRITE)
        pos = 0
        for g, off, n in spans:
            self.content[g, off:off + n] = np.frombuffer(data[pos:pos + n], dtype=np.uint8)
            pos += n

    def fetch(self, core_id: int, pa: int) -> None:
        g, _ = divmod(pa, self.granule_size)
        self.gpc_check(core_id, g, Access.EXECUTE)

    # -- trusted raw access (root/realm firmware only) --------------------

    def raw_read(self, granule: int, offset: int = 0, length: int | None = None) -> bytes:
        g = self.check_granule(granule)
        end = self.granule_size if length is None else offset + length
        return self.content[g, offset:end].tobytes()

    def raw_write(self, granule: int, data: bytes, offset: int = 0) -> None:
        g = self.check_granule(granule)
        self.content[g, offset:offset + len(data)] = np.frombuffer(data, dtype=np.uint8)

    def scrub(self, granule: int) -> None:
        self.content[self.check_granule(granule)] = 0

    def is_zero(self, granule: int) -> bool:
        return not self.content[self.check_granule(granule)].any()
