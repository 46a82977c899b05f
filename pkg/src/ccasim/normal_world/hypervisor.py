"""Untrusted hypervisor / VMM.

It owns the normal-world free pool, decides which granules back each SBS and
drives the RMIs that build, run and destroy it. Nothing here is trusted: the
adversary harness calls the same methods with hostile arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import RangeInvalid, SimError, WrongState
from ..manifest import PAGE, Manifest
from ..memory import World
from ..realm_monitor import RTT_BLOCK, ExitReason, RecExit
from ..trace import EventKind
from .transport import RING_HEADER

MAX_EXITS = 64
# value a virtio device returns from its magic register
VIRTIO_MAGIC = 0x7472_6976


@dataclass
class SbsRecord:
    realm_id: int
    manifest: Manifest
    rec_id: int | None = None
    data: dict[int, int] = field(default_factory=dict)     # ipa -> granule
    shared: dict[int, int] = field(default_factory=dict)   # ipa -> granule
    granules: list[int] = field(default_factory=list)


class Hypervisor:
    def __init__(self, system):
        self.system = system
        self.free: list[int] = sorted(system.layout.granules(World.NORMAL), reverse=True)
        self.delegated: set[int] = set()
        self.sbs: dict[int, SbsRecord] = {}
        self.device_regs: dict[tuple[int, int], int] = {}
        self.mmio_log: list[tuple[int, int, str, int | None]] = []

    @property
    def trace(self):
        return self.system.trace

    def rmi(self, name, core=0, **kw):
        return self.system.rmi(name, core=core, **kw)

    # -- granule pool ----------------------------------------------------

    def allocate(self, n: int) -> list[int]:
        if n > len(self.free):
            raise RangeInvalid(f"need {n} granules, {len(self.free)} free")
        return [self.free.pop() for _ in range(n)]

    def release(self, granules) -> None:
        for g in granules:
            if g not in self.delegated and g not in self.free:
                self.free.append(g)
        self.free.sort(reverse=True)

    def delegate(self, granule: int, core: int = 0) -> None:
        self.rmi("rmi_granule_delegate", core=core, granule=granule)
        self.delegated.add(granule)
        if granule in self.free:
            self.free.remove(granule)

    def undelegate(self, granule: int, core: int = 0) -> None:
        self.rmi("rmi_granule_undelegate", core=core, granule=granule)
        self.delegated.discard(granule)
        self.release([granule])

    # -- SBS lifecycle -----------------------------------------------------

    def create_sbs(self, manifest: Manifest, payload_pages=None, granules=None,
                   core: int = 0, activate: bool = True) -> int:
        """Build and activate an SBS; returns its realm id.

        ``granules`` lets a caller pick the backing granules (data pages first,
        then shared pages) instead of drawing from the free pool. On any
        failure the partial realm is destroyed and the error re-raised. With
        ``activate=False`` the realm is left New for :meth:`activate`.
        """
        manifest.validate()
        pages = list(payload_pages) if payload_pages is not None else manifest.payload_pages()
        pages += [b""] * (manifest.memory_pages - len(pages))
        n = manifest.memory_pages + manifest.shared_pages
        chosen = list(granules) if granules is not None else self.allocate(n)
        if len(chosen) != n:
            raise RangeInvalid(f"manifest needs {n} granules, got {len(chosen)}")
        fresh = [g for g in chosen if g not in self.delegated]
        if granules is not None:
            for g in fresh:
                if g in self.free:
                    self.free.remove(g)
        rid = self.rmi("rmi_realm_create", core=core, params=manifest)
        rec = self.sbs[rid] = SbsRecord(rid, manifest, granules=chosen)
        try:
            for g in fresh:
                self.delegate(g, core)
            self.rmi("rmi_rtt_create", core=core, realm_id=rid, ipa_start=0,
                     ipa_end=_round_up(manifest.memory_pages * PAGE))
            if manifest.shared_pages:
                lo = manifest.shared_base_ipa
                self.rmi("rmi_rtt_create", core=core, realm_id=rid, ipa_start=lo,
                         ipa_end=_round_up(lo + manifest.shared_bytes))
            for i, g in enumerate(chosen[:manifest.memory_pages]):
                ipa = i * PAGE
                self.rmi("rmi_data_create", core=core, realm_id=rid, granule=g,
                         ipa=ipa, src_content=pages[i])
                rec.data[ipa] = g
            for i, g in enumerate(chosen[manifest.memory_pages:]):
                ipa = manifest.shared_base_ipa + i * PAGE
                self.rmi("rmi_rtt_map_unprotected", core=core, realm_id=rid,
                         granule=g, ipa=ipa)
                rec.shared[ipa] = g
            rec.rec_id = self.rmi("rmi_rec_create", core=core, realm_id=rid)
            if activate:
                self.rmi("rmi_realm_activate", core=core, realm_id=rid)
        except SimError:
            self._unwind(rid, fresh, core)
            raise
        if manifest.has_virtqueue() and rec.shared:
            base = manifest.shared_base_ipa + manifest.vq_offset
            self.system.host_write(self.shared_pa(rid, base), bytes(RING_HEADER.size), core=core)
        return rid

    def activate(self, realm_id: int, core: int = 0) -> None:
        self.rmi("rmi_realm_activate", core=core, realm_id=realm_id)

    def _unwind(self, rid: int, fresh: list[int], core: int) -> None:
        """Destroy a half-built realm and give back what this attempt delegated."""
        self.destroy_sbs(rid, core=core, only=fresh)
        for g in fresh:
            if g in self.delegated:
                try:
                    self.undelegate(g, core)
                except SimError:
                    pass

    def destroy_sbs(self, realm_id: int, core: int = 0, only=None) -> list[int]:
        rec = self.sbs.pop(realm_id, None)
        if rec is None:
            raise WrongState(f"hypervisor has no SBS {realm_id}")
        wanted = rec.granules if only is None else [g for g in rec.granules if g in only]
        returned = self.rmi("rmi_destroy_realm", core=core, realm_id=realm_id,
                            granules=wanted)
        for g in returned:
            self.delegated.discard(g)
        self.release(returned)
        return returned

    def launch(self, manifest: Manifest, core: int = 0, **kw) -> tuple[int, RecExit]:
        """Create an SBS and run it to its first pause (boot validation included)."""
        rid = self.create_sbs(manifest, core=core, **kw)
        return rid, self.run(rid, core=core)

    # -- running -----------------------------------------------------------

    def run(self, realm_id: int, core: int = 0) -> RecExit:
        """Enter the SBS, servicing MMIO and RIPAS exits until it yields back."""
        rec = self.sbs[realm_id]
        ex = self.system.rec_enter(rec.rec_id, core=core)
        for _ in range(MAX_EXITS):
            if ex.reason is ExitReason.MMIO:
                value = self._device(realm_id, ex)
                ex = self.system.rec_enter(rec.rec_id, core=core, mmio_value=value)
            elif ex.reason is ExitReason.RIPAS:
                rd = self.system.rmm.realm(realm_id)
                start, end, state = rd.ripas_request
                self.rmi("rmi_rtt_set_ripas", core=core, realm_id=realm_id,
                         ipa_start=start, ipa_end=end, state=state)
                ex = self.system.rec_enter(rec.rec_id, core=core)
            else:
                return ex
        return ex

    def _device(self, realm_id: int, ex: RecExit) -> int | None:
        self.mmio_log.append((realm_id, ex.ipa, ex.access, ex.value))
        if ex.access == "write":
            self.device_regs[(realm_id, ex.ipa)] = ex.value
            return None
        return self.device_regs.get((realm_id, ex.ipa), VIRTIO_MAGIC)

    def shared_pa(self, realm_id: int, ipa: int) -> int:
        rec = self.sbs.get(realm_id)
        page = ipa - ipa % PAGE
        if rec is None or page not in rec.shared:
            raise RangeInvalid(f"ipa {ipa:#x} is not shared by realm {realm_id}")
        return rec.shared[page] * PAGE + ipa % PAGE

    def inject_interrupt(self, realm_id: int, source: str, device: str | None = None,
                         core: int = 0) -> str:
        return self.rmi("inject_interrupt", core=core, realm_id=realm_id,
                        source=source, device=device)

    def forge_mmio(self, realm_id: int, ipa: int, access: str = "read",
                   value: int | None = 0xdead, core: int = 0):
        """Claim an MMIO abort the guest never took, hoping for emulation."""
        rec = self.sbs.get(realm_id)
        out = self.rmi("handle_mmio_exit", core=core, realm_id=realm_id, fault_ipa=ipa,
                       access=access, value=value,
                       rec_id=rec.rec_id if rec else None)
        if not out.emulate:
            self.trace.emit(EventKind.ATTACK_BLOCKED, "forged_mmio", core=core,
                            outcome="Refuse", realm=realm_id, ipa=ipa)
        return out


def _round_up(x: int) -> int:
    return -(-x // RTT_BLOCK) * RTT_BLOCK
