"""Whole-platform wiring: machine, firmware, RMM and the normal-world actors.

Every call an actor makes on a core is routed the way the hardware would:
an RMI enters the root world (where the firmware records its granule
arguments), continues to the realm world for the RMM, and returns the same
way. The context switches show up in the trace and in the counters.
"""
from __future__ import annotations

from .errors import SimError
from .hooks import Hooks
from .manifest import Manifest
from .memory import Access, Machine, World
from .realm_monitor import (BootPolicy, PlatformFirmware, RealmManagementMonitor,
                            RecExit, ExitReason)
from .root_monitor import Layout, TrustedFirmware
from .trace import EventKind, EventTrace


def _log_keys(name: str, kw: dict) -> list:
    """(rmi, granule, realm) tuples the firmware records for this RMI."""
    if name in ("rmi_granule_delegate", "rmi_granule_undelegate"):
        return [(name, kw["granule"], None)]
    if name == "rmi_rtt_map_unprotected":
        return [(name, kw["granule"], kw["realm_id"])]
    if name == "rmi_destroy_realm":
        return [("rmi_granule_undelegate", g, kw["realm_id"]) for g in kw.get("granules", ())]
    return []


def _trace_args(kw: dict) -> dict:
    out = {}
    for k, v in kw.items():
        if isinstance(v, (bool, int, str)) or v is None:
            out[k] = v
        elif isinstance(v, (bytes, bytearray)):
            out[k + "_len"] = len(v)
        elif isinstance(v, Manifest):
            out[k] = v.name
        elif isinstance(v, (list, tuple)) and all(isinstance(x, int) for x in v):
            out[k] = list(v)
        elif hasattr(v, "value"):
            out[k] = v.value
    return out


class GuestFault(SimError):
    pass


class System:
    def __init__(self, layout: Layout | None = None, n_cores: int = 2,
                 hooks: Hooks | None = None, policy: BootPolicy | None = None,
                 firmware: PlatformFirmware | None = None,
                 trace: EventTrace | None = None):
        from .normal_world.app import App
        from .normal_world.guest import build_program
        from .normal_world.hypervisor import Hypervisor

        self.layout = layout or Layout.simple()
        self.trace = trace if trace is not None else EventTrace()
        self.hooks = hooks or Hooks()
        self.machine = Machine(self.layout.n_granules, n_cores, trace=self.trace)
        self.tf = TrustedFirmware(self.machine, self.hooks)
        self.rmm = RealmManagementMonitor(self.machine, self.tf, self.hooks, policy, firmware)
        self.rmm.program_factory = build_program
        self.tf.boot_create_gpts(self.layout)
        self.hyp = Hypervisor(self)
        self.app = App(self)
        # fn(name, kwargs, result, outcome) after every RMI returns
        self.rmi_observers: list = []

    @property
    def n_cores(self) -> int:
        return len(self.machine.cores)

    # -- world transitions ---------------------------------------------

    def _enter(self, core: int, world: World) -> None:
        """Move a core to ``world`` through the root monitor if needed."""
        c = self.machine.cores[core]
        if c.sec_state is world:
            return
        if c.sec_state is not World.ROOT:
            self.machine.context_switch(core, World.ROOT)
        if world is not World.ROOT:
            self.machine.context_switch(core, world)

    # -- RMI dispatch ----------------------------------------------------

    def rmi(self, name: str, core: int = 0, **kw):
        self._enter(core, World.NORMAL)
        self.machine.context_switch(core, World.ROOT)
        keys = [self.tf.log_rmi(*k) for k in _log_keys(name, kw)]
        self.machine.context_switch(core, World.REALM)
        self.rmm.core = core
        outcome, result = "ok", None
        try:
            result = getattr(self.rmm, name)(**kw)
            return result
        except SimError as exc:
            outcome = exc.kind
            raise
        finally:
            self.machine.context_switch(core, World.ROOT)
            for k in keys:
                self.tf.retire(k)
            self.machine.context_switch(core, World.NORMAL)
            self.trace.emit(EventKind.RMI, name, core=core, outcome=outcome,
                            **_trace_args(kw))
            for fn in self.rmi_observers:
                fn(name, kw, result, outcome)

    def rec_enter(self, rec_id: int, core: int = 0, mmio_value: int | None = None,
                  program=None) -> RecExit:
        return self.rmi("rmi_rec_enter", core=core, rec_id=rec_id,
                        mmio_value=mmio_value, program=program)

    def rogue_smc(self, kind: str, granule: int, core: int = 0, **kw) -> None:
        """An SMC the RMM issues without any hypervisor request behind it."""
        fn = {"delegate": self.tf.smc_delegate,
              "undelegate": self.tf.smc_undelegate,
              "share": self.tf.smc_2gpt_ns_share,
              "ex_access": self.tf.smc_2gpt_ex_access}[kind]
        self._enter(core, World.REALM)
        self.rmm.core = core
        try:
            self.rmm._smc(fn, granule, **kw)
        finally:
            self._enter(core, World.NORMAL)

    # -- actor memory access ---------------------------------------------

    def _access(self, world: World, label: str, core: int, pa: int, access: Access,
                data: bytes | None = None, length: int = 8):
        self._enter(core, world)
        try:
            if access is Access.READ:
                out = self.machine.load(core, pa, length)
            elif access is Access.WRITE:
                out = self.machine.store(core, pa, data)
            else:
                out = self.machine.fetch(core, pa)
        except SimError as exc:
            self.trace.emit(EventKind.MEM, f"{label}_{access.name.lower()}", core=core,
                            outcome=exc.kind, pa=pa)
            raise
        finally:
            self._enter(core, World.NORMAL)
        self.trace.emit(EventKind.MEM, f"{label}_{access.name.lower()}", core=core, pa=pa)
        return out

    def host_read(self, pa: int, length: int = 8, core: int = 0) -> bytes:
        return self._access(World.NORMAL, "host", core, pa, Access.READ, length=length)

    def host_write(self, pa: int, data: bytes, core: int = 0) -> None:
        self._access(World.NORMAL, "host", core, pa, Access.WRITE, data=bytes(data))

    def secure_read(self, pa: int, length: int = 8, core: int = 0) -> bytes:
        return self._access(World.SECURE, "secure", core, pa, Access.READ, length=length)

    def secure_write(self, pa: int, data: bytes, core: int = 0) -> None:
        self._access(World.SECURE, "secure", core, pa, Access.WRITE, data=bytes(data))

    # -- guest helpers ---------------------------------------------------

    def guest_run(self, realm_id: int, program, core: int = 0) -> RecExit:
        rec_id = self.rmm.realm(realm_id).recs[0]
        return self.rec_enter(rec_id, core=core, program=program)

    def guest_op(self, realm_id: int, action, core: int = 0):
        """Run a single guest action; re-raise the guest-visible fault if any."""
        box = {}

        def prog():
            box["result"] = yield action
        ex = self.guest_run(realm_id, prog(), core=core)
        if ex.reason is ExitReason.FAULT:
            raise ex.error
        if ex.reason is ExitReason.BOOT_REJECTED:
            raise GuestFault(f"boot rejected: {ex.detail}")
        return box.get("result")
