"""Realm Management Monitor model.

Owns per-SBS stage-2 tables and lifecycle, the global granule ownership
index (sandboxing), the fixed contiguous shared region, exclusive access,
MMIO gating, interrupt filtering, measurements and the trusted bootloader's
launch validation. Every GPT effect goes through :class:`TrustedFirmware`.
"""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable

from . import actions as act
from .errors import (Denied, NotContiguous, NotShared, OverlapViolation,
                     PermissionFault, RangeInvalid, SharingSealed, SimError,
                     StageTwoFault, WrongState)
from .hooks import Hooks
from .manifest import PAGE, UNPROTECTED_BASE, Manifest
from .memory import Access, Machine, World
from .root_monitor import DELEGATED, EXCLUSIVE, TrustedFirmware
from .trace import EventKind

IPA_LIMIT = 1 << 32
RTT_BLOCK = 1 << 21
REC_REGS = 8
ALLOWED_DEVICES = frozenset({"VirtioBlock", "VirtioNet"})
GUEST_STEP_LIMIT = 10_000


class RealmState(enum.Enum):
    NEW = "New"
    ACTIVE = "Active"
    DESTROYED = "Destroyed"


class Ripas(enum.Enum):
    EMPTY = "Empty"
    RAM = "Ram"
    UNPROTECTED = "Unprotected"


class ExitReason(enum.Enum):
    HALT = "Halt"
    PAUSE = "Pause"
    MMIO = "Mmio"
    RIPAS = "RipasChange"
    FAULT = "Fault"
    BUDGET = "Budget"
    BOOT_REJECTED = "BootRejected"


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class Measurement:
    """Hash chain: ``value' = H(value || H(kind || 0x00 || blob))``."""

    def __init__(self):
        self.value = bytes(32)
        self.log: list[tuple[str, bytes]] = []

    def extend(self, kind: str, blob: bytes) -> bytes:
        ev = digest(kind.encode() + b"\x00" + blob)
        self.log.append((kind, ev))
        self.value = digest(self.value + ev)
        return self.value

    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class PlatformFirmware:
    tf: bytes = b"trusted-firmware v2.10"
    rmm: bytes = b"rmm v1.0-eac5"
    bootloader: bytes = b"sbs trusted bootloader v1"

    def measurement(self) -> str:
        value = bytes(32)
        for image in (self.tf, self.rmm, self.bootloader):
            value = digest(value + digest(image))
        return value.hex()


@dataclass
class BootPolicy:
    """Bootloader validation rules. ``allow_list=None`` skips the digest check."""

    allow_list: set[str] | None = None
    allowed_devices: frozenset[str] = ALLOWED_DEVICES


@dataclass(frozen=True)
class Report:
    realm_id: int
    platform_measurement: str
    realm_measurement: str
    metadata: dict


@dataclass(frozen=True)
class BootVerdict:
    passed: bool
    reason: str = ""

    def __str__(self):
        return "Pass" if self.passed else f"Reject({self.reason})"


@dataclass(frozen=True)
class MmioOutcome:
    emulate: bool
    ipa: int
    access: str
    payload: int | None = None

    def __str__(self):
        return f"Emulate({self.payload})" if self.emulate else "Refuse"


@dataclass(frozen=True)
class RecExit:
    reason: ExitReason
    ipa: int | None = None
    access: str | None = None
    value: int | None = None
    detail: str = ""
    error: object = field(default=None, compare=False, repr=False)

    def __str__(self):
        return self.reason.value


@dataclass
class Rec:
    rec_id: int
    realm_id: int
    regs: list[int] = field(default_factory=lambda: [0] * REC_REGS)
    program: object = None
    awaiting: object = None   # pending MMIO read/write or ripas request
    halted: bool = False
    started: bool = False     # entry program already booted once


@dataclass
class RealmDescriptor:
    realm_id: int
    params: Manifest
    state: RealmState = RealmState.NEW
    s2: dict[int, tuple[int, str]] = field(default_factory=dict)
    ripas: dict[int, Ripas] = field(default_factory=dict)
    shared_region: tuple[int, int] | None = None   # (base ipa, pages)
    mmio_regions: set[int] = field(default_factory=set)
    measurement: Measurement = field(default_factory=Measurement)
    recs: list[int] = field(default_factory=list)
    devices: list[str] = field(default_factory=list)
    rtts: set[int] = field(default_factory=set)
    granules: set[int] = field(default_factory=set)
    released: set[int] = field(default_factory=set)
    validated: bool = False
    ripas_request: tuple | None = None

    def shared_pages(self) -> list[int]:
        if self.shared_region is None:
            return []
        base, n = self.shared_region
        return [base + i * PAGE for i in range(n)]

    def in_shared(self, ipa: int) -> bool:
        if self.shared_region is None:
            return False
        base, n = self.shared_region
        return base <= ipa < base + n * PAGE


def _page(ipa: int) -> int:
    return ipa - ipa % PAGE


class RealmManagementMonitor:
    def __init__(self, machine: Machine, tf: TrustedFirmware,
                 hooks: Hooks | None = None, policy: BootPolicy | None = None,
                 firmware: PlatformFirmware | None = None):
        self.machine = machine
        self.tf = tf
        self.hooks = hooks or tf.hooks
        self.policy = policy or BootPolicy()
        self.firmware = firmware or PlatformFirmware()
        self.realms: dict[int, RealmDescriptor] = {}
        self.recs: dict[int, Rec] = {}
        self.owner: dict[int, int] = {}      # granule -> realm id
        self.delegated: set[int] = set()
        self.next_realm_id = 1
        self.next_rec_id = 1
        self.core = 0
        # builds the entry program for a realm's REC; installed by System
        self.program_factory: Callable | None = None

    @property
    def trace(self):
        return self.machine.trace

    # -- plumbing ----------------------------------------------------------

    def _smc(self, fn, *args, **kwargs):
        core = self.machine.cores[self.core]
        prev = core.sec_state
        self.machine.context_switch(self.core, World.ROOT)
        try:
            return fn(*args, core=self.core, **kwargs)
        finally:
            self.machine.context_switch(self.core, prev)

    def realm(self, realm_id: int, *states: RealmState) -> RealmDescriptor:
        rd = self.realms.get(realm_id)
        if rd is None:
            raise WrongState(f"no realm {realm_id}")
        if states and rd.state not in states:
            raise WrongState(f"realm {realm_id} is {rd.state.value}, "
                             f"need {'/'.join(s.value for s in states)}")
        return rd

    def _s2_set(self, rd: RealmDescriptor, ipa: int, granule: int, perms: str):
        rd.s2[ipa] = (granule, perms)
        self.trace.emit(EventKind.S2_UPDATE, "map", core=self.core, realm=rd.realm_id,
                        ipa=ipa, granule=granule, perms=perms)

    def _check_rtt(self, rd: RealmDescriptor, ipa: int):
        if ipa % PAGE or not 0 <= ipa < IPA_LIMIT:
            raise RangeInvalid(f"ipa {ipa:#x} not a page in the IPA space")
        if ipa // RTT_BLOCK not in rd.rtts:
            raise RangeInvalid(f"no translation table covers ipa {ipa:#x}")
        if ipa in rd.s2:
            raise RangeInvalid(f"ipa {ipa:#x} already mapped")

    def _claim(self, rd: RealmDescriptor, granule: int):
        g = int(granule)
        if g not in self.delegated:
            raise WrongState(f"granule {g} is not delegated")
        other = self.owner.get(g)
        if other is not None and not self.hooks.skip_overlap_check:
            raise OverlapViolation(f"granule {g} already assigned to realm {other}")
        return g

    # -- granule delegation --------------------------------------------

    def rmi_granule_delegate(self, granule: int) -> None:
        self._smc(self.tf.smc_delegate, granule)
        self.delegated.add(int(granule))

    def rmi_granule_undelegate(self, granule: int) -> None:
        g = int(granule)
        if g in self.owner:
            raise WrongState(f"granule {g} still assigned to realm {self.owner[g]}")
        if g not in self.delegated:
            raise WrongState(f"granule {g} is not delegated")
        self.machine.scrub(g)
        self._smc(self.tf.smc_undelegate, g)
        self.delegated.discard(g)

    # -- lifecycle ---------------------------------------------------------

    def rmi_realm_create(self, params: Manifest) -> int:
        rid = self.next_realm_id
        self.next_realm_id += 1
        rd = RealmDescriptor(rid, params, devices=list(params.devices))
        rd.measurement.extend("RealmCreate", params.canonical())
        # the bootloader is copied into SBS memory and becomes its entry point
        rd.measurement.extend("Bootloader", digest(self.firmware.bootloader))
        self.realms[rid] = rd
        return rid

    def rmi_rec_create(self, realm_id: int) -> int:
        rd = self.realm(realm_id, RealmState.NEW)
        rec = Rec(self.next_rec_id, realm_id)
        self.next_rec_id += 1
        self.recs[rec.rec_id] = rec
        rd.recs.append(rec.rec_id)
        return rec.rec_id

    def rmi_realm_activate(self, realm_id: int) -> None:
        rd = self.realm(realm_id, RealmState.NEW)
        rd.state = RealmState.ACTIVE

    def rmi_rtt_create(self, realm_id: int, ipa_start: int, ipa_end: int) -> None:
        rd = self.realm(realm_id, RealmState.NEW, RealmState.ACTIVE)
        if ipa_start % PAGE or ipa_end % PAGE or not 0 <= ipa_start < ipa_end <= IPA_LIMIT:
            raise RangeInvalid(f"bad IPA range [{ipa_start:#x}, {ipa_end:#x})")
        first, last = ipa_start // RTT_BLOCK, (ipa_end - 1) // RTT_BLOCK
        rd.rtts.update(range(first, last + 1))

    def rmi_rtt_set_ripas(self, realm_id: int, ipa_start: int, ipa_end: int,
                          state: Ripas) -> None:
        rd = self.realm(realm_id, RealmState.NEW, RealmState.ACTIVE)
        if rd.ripas_request != (ipa_start, ipa_end, state):
            raise WrongState("RIPAS change not requested by the guest")
        if ipa_start % PAGE or ipa_end % PAGE or not 0 <= ipa_start < ipa_end <= UNPROTECTED_BASE:
            raise RangeInvalid(f"bad protected range [{ipa_start:#x}, {ipa_end:#x})")
        for ipa in range(ipa_start, ipa_end, PAGE):
            rd.ripas[ipa] = state
        rd.ripas_request = None

    def rmi_data_create(self, realm_id: int, granule: int, ipa: int,
                        src_content: bytes) -> None:
        rd = self.realm(realm_id, RealmState.NEW)
        if ipa >= UNPROTECTED_BASE:
            raise RangeInvalid(f"data ipa {ipa:#x} is in the unprotected window")
        self._check_rtt(rd, ipa)
        if len(src_content) > PAGE:
            raise RangeInvalid("source content larger than a granule")
        g = self._claim(rd, granule)
        if self.machine.pair(g) != DELEGATED:
            raise WrongState(f"granule {g} is not private realm memory")
        self.owner[g] = realm_id
        rd.granules.add(g)
        page = bytes(src_content) + bytes(PAGE - len(src_content))
        self.machine.raw_write(g, page)
        rd.ripas[ipa] = Ripas.RAM
        self._s2_set(rd, ipa, g, "RWX")
        rd.measurement.extend("DataCreate", ipa.to_bytes(8, "little") + digest(page))

    def rmi_rtt_map_unprotected(self, realm_id: int, granule: int, ipa: int) -> None:
        rd = self.realm(realm_id)
        if rd.state is RealmState.ACTIVE:
            raise SharingSealed(f"realm {realm_id} is active; shared region is fixed")
        if rd.state is not RealmState.NEW:
            raise WrongState(f"realm {realm_id} is {rd.state.value}")
        if ipa < UNPROTECTED_BASE:
            raise RangeInvalid(f"ipa {ipa:#x} not in the unprotected window")
        self._check_rtt(rd, ipa)
        if rd.shared_region is not None:
            base, n = rd.shared_region
            if ipa not in (base + n * PAGE, base - PAGE):
                raise NotContiguous(f"ipa {ipa:#x} not adjacent to shared region "
                                    f"[{base:#x}, {base + n * PAGE:#x})")
        g = int(granule)
        if self.hooks.legacy_ns_map and g not in self.delegated:
            # stock CCA: map a normal-world granule without any GPT change
            self.machine.check_granule(g)
        else:
            g = self._claim(rd, g)
            self._smc(self.tf.smc_2gpt_ns_share, g, realm_id)
            self.owner[g] = realm_id
            rd.granules.add(g)
        perms = "RWX" if self.hooks.skip_nx else "RW"
        self._s2_set(rd, ipa, g, perms)
        if rd.shared_region is None:
            rd.shared_region = (ipa, 1)
        else:
            base, n = rd.shared_region
            rd.shared_region = (min(base, ipa), n + 1)
        rd.measurement.extend("MapUnprotected", ipa.to_bytes(8, "little"))

    def rmi_destroy_realm(self, realm_id: int, granules=()) -> list[int]:
        """Tear the realm down and undelegate the listed granules it released.

        Returns the granules that went back to the normal world.
        """
        rd = self.realm(realm_id)
        if rd.state is not RealmState.DESTROYED:
            self._teardown(rd)
        returned = []
        for g in granules:
            g = int(g)
            if g not in rd.released or g in self.owner or g not in self.delegated:
                continue
            if self.machine.pair(g) == EXCLUSIVE:
                self._smc(self.tf.smc_2gpt_ex_access, g, False)
            # a shared granule stays host-writable until this point
            self.machine.scrub(g)
            self._smc(self.tf.smc_undelegate, g, realm_id)
            self.delegated.discard(g)
            rd.released.discard(g)
            returned.append(g)
        return returned

    def _teardown(self, rd: RealmDescriptor) -> None:
        for rid in rd.recs:
            rec = self.recs[rid]
            rec.halted = True
            rec.program = None
            rec.awaiting = None
        for ipa in sorted(rd.s2):
            self.trace.emit(EventKind.S2_UPDATE, "unmap", core=self.core,
                            realm=rd.realm_id, ipa=ipa)
        rd.s2.clear()
        rd.ripas.clear()
        for g in sorted(rd.granules):
            self.machine.scrub(g)
            if self.owner.get(g) == rd.realm_id:
                del self.owner[g]
            if g in self.delegated:
                rd.released.add(g)
        rd.granules.clear()
        rd.state = RealmState.DESTROYED

    # -- measurement and attestation -------------------------------------

    def extend_measurement(self, realm_id: int, kind: str, blob: bytes) -> bytes:
        rd = self.realm(realm_id, RealmState.NEW)
        return rd.measurement.extend(kind, blob)

    def get_attestation_report(self, realm_id: int) -> Report:
        rd = self.realm(realm_id, RealmState.ACTIVE)
        return Report(
            realm_id=realm_id,
            platform_measurement=self.firmware.measurement(),
            realm_measurement=rd.measurement.hex(),
            metadata={
                "devices": list(rd.devices),
                "shared_region": list(rd.shared_region) if rd.shared_region else None,
                "entry_script": rd.params.entry_script,
            })

    def validate_boot(self, realm_id: int, device_tree=None) -> BootVerdict:
        """Trusted-bootloader check run before the guest payload.

        A rejected realm is torn down; its memory stays delegated until the
        hypervisor asks for it back.
        """
        rd = self.realm(realm_id, RealmState.ACTIVE)
        devices = list(rd.devices if device_tree is None else device_tree)
        allow = self.policy.allow_list
        if allow is not None and rd.measurement.hex() not in allow:
            verdict = BootVerdict(False, "BadMeasurement")
        elif any(d not in self.policy.allowed_devices for d in devices):
            verdict = BootVerdict(False, "DisallowedDevice")
        else:
            verdict = BootVerdict(True)
        self.trace.emit(EventKind.NOTE, "validate_boot", core=self.core,
                        outcome=str(verdict), realm=realm_id)
        if verdict.passed:
            rd.validated = True
        else:
            self._teardown(rd)
        return verdict

    # -- RSIs --------------------------------------------------------------

    def _rsi(self, name: str, rd: RealmDescriptor, fn, **args):
        try:
            out = fn()
        except SimError as exc:
            self.trace.emit(EventKind.RSI, name, core=self.core, outcome=exc.kind,
                            realm=rd.realm_id, **args)
            raise
        self.trace.emit(EventKind.RSI, name, core=self.core, realm=rd.realm_id, **args)
        return out

    def rsi_ex_access(self, realm_id: int, ipa_pages, enable: bool) -> None:
        rd = self.realm(realm_id, RealmState.ACTIVE)
        pages = [int(p) for p in ipa_pages]

        def body():
            for p in pages:
                if p % PAGE or not rd.in_shared(p):
                    raise NotShared(f"ipa {p:#x} is not a shared page of realm {realm_id}")
            done = []
            try:
                for p in pages:
                    self._smc(self.tf.smc_2gpt_ex_access, rd.s2[p][0], enable)
                    done.append(p)
            except Denied:
                for p in reversed(done):
                    self._smc(self.tf.smc_2gpt_ex_access, rd.s2[p][0], not enable)
                raise
        self._rsi("rsi_ex_access", rd, body, pages=pages, enable=bool(enable))

    def rsi_mmio(self, realm_id: int, ipa_pages) -> None:
        rd = self.realm(realm_id, RealmState.ACTIVE)
        pages = [int(p) for p in ipa_pages]

        def body():
            for p in pages:
                if p % PAGE or not 0 <= p < IPA_LIMIT:
                    raise RangeInvalid(f"ipa {p:#x} is not a page")
            rd.mmio_regions.update(pages)
        self._rsi("rsi_mmio", rd, body, pages=pages)

    def rsi_attestation_token(self, realm_id: int) -> Report:
        rd = self.realm(realm_id, RealmState.ACTIVE)
        return self._rsi("rsi_attestation_token", rd,
                         lambda: self.get_attestation_report(realm_id))

    def rsi_ipa_state_set(self, realm_id: int, ipa_start: int, ipa_end: int,
                          state: Ripas) -> tuple:
        rd = self.realm(realm_id, RealmState.ACTIVE)

        def body():
            rd.ripas_request = (ipa_start, ipa_end, state)
            return rd.ripas_request
        return self._rsi("rsi_ipa_state_set", rd, body, start=ipa_start, end=ipa_end,
                         state=state.value)

    def _dispatch_rsi(self, realm_id: int, call: str, args: dict):
        if call == "ex_access":
            return self.rsi_ex_access(realm_id, args["pages"], args["enable"])
        if call == "mmio":
            return self.rsi_mmio(realm_id, args["pages"])
        if call == "attestation_token":
            return self.rsi_attestation_token(realm_id)
        if call == "ipa_state_set":
            return self.rsi_ipa_state_set(realm_id, args["start"], args["end"],
                                          Ripas(args["state"]))
        raise WrongState(f"unknown RSI {call!r}")

    # -- MMIO and interrupts --------------------------------------------

    def handle_mmio_exit(self, realm_id: int, fault_ipa: int, access: str,
                         value: int | None = None, rec_id: int | None = None) -> MmioOutcome:
        """Emulate an MMIO abort only if the guest marked the page with rsi_mmio.

        For a read, ``value`` is what the hypervisor supplies and it lands in
        the REC's register 0. For a write, the payload forwarded is ``value``.
        """
        rd = self.realm(realm_id)
        marked = _page(fault_ipa) in rd.mmio_regions
        if marked or self.hooks.skip_mmio_gate:
            out = MmioOutcome(True, fault_ipa, access, value)
            if access == "read" and rec_id is not None:
                self.recs[rec_id].regs[0] = int(value or 0)
        else:
            out = MmioOutcome(False, fault_ipa, access)
        self.trace.emit(EventKind.MMIO, access, core=self.core, outcome=str(out),
                        realm=realm_id, ipa=fault_ipa, marked=marked)
        return out

    def inject_interrupt(self, realm_id: int, source: str, device: str | None = None) -> str:
        rd = self.realm(realm_id, RealmState.ACTIVE)
        if source == "Timer":
            result = "Delivered"
        elif source == "Device":
            result = "Delivered" if device in rd.devices else "Filtered"
        else:
            # hardware exceptions are raised internally and cannot be faked
            result = "Filtered"
        kind = EventKind.INTERRUPT if result == "Delivered" else EventKind.INTERRUPT_FILTERED
        self.trace.emit(kind, source, core=self.core, outcome=result, realm=realm_id,
                        device=device)
        return result

    # -- guest execution ---------------------------------------------------

    def guest_access(self, realm_id: int, ipa: int, access: Access,
                     data: bytes | None = None, length: int = 8):
        """One guest load/store/fetch: stage-2 walk, permission check, then GPC."""
        rd = self.realm(realm_id, RealmState.ACTIVE)
        span = len(data) if access is Access.WRITE else (1 if access is Access.EXECUTE else length)
        try:
            if _page(ipa) != _page(ipa + max(span, 1) - 1):
                raise RangeInvalid("guest access crosses a page boundary")
            entry = rd.s2.get(_page(ipa))
            if entry is None:
                raise StageTwoFault(f"ipa {ipa:#x} unmapped in realm {realm_id}")
            granule, perms = entry
            if access.value not in perms:
                raise PermissionFault(f"{access.name} not permitted at ipa {ipa:#x} ({perms})")
            pa = granule * self.machine.granule_size + ipa % PAGE
            if access is Access.READ:
                out = self.machine.load(self.core, pa, length)
            elif access is Access.WRITE:
                out = self.machine.store(self.core, pa, data)
            else:
                out = self.machine.fetch(self.core, pa)
        except SimError as exc:
            self.trace.emit(EventKind.MEM, f"guest_{access.name.lower()}", core=self.core,
                            outcome=exc.kind, realm=realm_id, ipa=ipa)
            raise
        self.trace.emit(EventKind.MEM, f"guest_{access.name.lower()}", core=self.core,
                        realm=realm_id, ipa=ipa)
        return out

    def rmi_rec_enter(self, rec_id: int, mmio_value: int | None = None,
                      program=None) -> RecExit:
        rec = self.recs.get(rec_id)
        if rec is None:
            raise WrongState(f"no REC {rec_id}")
        rd = self.realm(rec.realm_id, RealmState.ACTIVE)
        if not rd.validated:
            verdict = self.validate_boot(rd.realm_id)
            if not verdict.passed:
                return self._exit(rec, RecExit(ExitReason.BOOT_REJECTED, detail=verdict.reason))
        if program is not None:
            gen = _as_generator(program)
            send = None
        else:
            if rec.halted:
                return self._exit(rec, RecExit(ExitReason.HALT))
            if rec.program is None:
                if self.program_factory is None:
                    return self._exit(rec, RecExit(ExitReason.HALT))
                rec.program = _as_generator(self.program_factory(rd, rec))
                rec.started = True
                rec.awaiting = ("start",)
            gen = rec.program
            send = self._resume_value(rec, mmio_value)
        return self._run(rd, rec, gen, send, persistent=program is None)

    def _resume_value(self, rec: Rec, mmio_value):
        waiting, rec.awaiting = rec.awaiting, None
        if waiting and waiting[0] == "mmio_read":
            rec.regs[0] = int(mmio_value or 0)
            return rec.regs[0]
        return None

    def _exit(self, rec: Rec, ex: RecExit) -> RecExit:
        self.trace.emit(EventKind.REC_EXIT, ex.reason.value, core=self.core,
                        rec=rec.rec_id, realm=rec.realm_id, detail=ex.detail)
        return ex

    def _run(self, rd, rec, gen, send, persistent: bool) -> RecExit:
        throw = None
        for _ in range(GUEST_STEP_LIMIT):
            try:
                action = gen.throw(throw) if throw is not None else gen.send(send)
            except StopIteration:
                if persistent:
                    rec.halted, rec.program = True, None
                return self._exit(rec, RecExit(ExitReason.HALT))
            except SimError as exc:
                if persistent:
                    rec.halted, rec.program = True, None
                return self._exit(rec, RecExit(ExitReason.FAULT, detail=exc.kind, error=exc))
            throw, send = None, None
            if isinstance(action, act.Pause):
                return self._exit(rec, RecExit(ExitReason.PAUSE))
            if isinstance(action, act.Halt):
                if persistent:
                    rec.halted, rec.program = True, None
                return self._exit(rec, RecExit(ExitReason.HALT))
            if isinstance(action, (act.MmioRead, act.MmioWrite)):
                ex, throw, send = self._mmio_action(rd, rec, action, persistent)
                if ex is not None:
                    return self._exit(rec, ex)
                continue
            try:
                send = self._perform(rd, action)
            except SimError as exc:
                throw = exc
                continue
            if isinstance(action, act.Rsi) and action.call == "ipa_state_set":
                if persistent:
                    rec.awaiting = ("ripas",)
                return self._exit(rec, RecExit(ExitReason.RIPAS, detail=repr(send)))
        return self._exit(rec, RecExit(ExitReason.BUDGET))

    def _perform(self, rd: RealmDescriptor, action):
        rid = rd.realm_id
        if isinstance(action, act.ReadMem):
            return self.guest_access(rid, action.ipa, Access.READ, length=action.length)
        if isinstance(action, act.WriteMem):
            return self.guest_access(rid, action.ipa, Access.WRITE, data=bytes(action.data))
        if isinstance(action, act.Execute):
            return self.guest_access(rid, action.ipa, Access.EXECUTE)
        if isinstance(action, act.Rsi):
            return self._dispatch_rsi(rid, action.call, dict(action.args))
        raise WrongState(f"unknown guest action {action!r}")

    def _mmio_action(self, rd, rec, action, persistent):
        """Returns (exit or None, exception to throw, value to send)."""
        ipa = action.ipa
        if _page(ipa) in rd.s2:
            # ordinary memory: no abort, no emulation
            if isinstance(action, act.MmioRead):
                raw = self.guest_access(rd.realm_id, ipa, Access.READ, length=8)
                return None, None, int.from_bytes(raw, "little")
            self.guest_access(rd.realm_id, ipa, Access.WRITE,
                              data=int(action.value).to_bytes(8, "little"))
            return None, None, None
        access = "read" if isinstance(action, act.MmioRead) else "write"
        value = None if access == "read" else int(action.value)
        out = self.handle_mmio_exit(rd.realm_id, ipa, access, value)
        if not out.emulate:
            return None, StageTwoFault(f"unmarked MMIO access at {ipa:#x}"), None
        if access == "write":
            rec.regs[1] = value
        if not persistent:
            # one-shot scripts do not resume; reads see zero
            return None, None, (0 if access == "read" else None)
        rec.awaiting = ("mmio_" + access, ipa)
        return RecExit(ExitReason.MMIO, ipa=ipa, access=access, value=value), None, None


def _as_generator(program):
    if isinstance(program, (list, tuple)):
        return act.run_script(program)
    return program
