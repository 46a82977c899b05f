import hashlib

import pytest

from ccasim import actions as act
from ccasim.errors import (NotContiguous, NotShared, OverlapViolation, PermissionFault,
                           RangeInvalid, SharingSealed, StageTwoFault, WrongState)
from ccasim.manifest import PAGE, UNPROTECTED_BASE
from ccasim.memory import PasValue as P
from ccasim.realm_monitor import BootPolicy, ExitReason, RealmState
from ccasim.root_monitor import DELEGATED, EXCLUSIVE, SHARED, UNDELEGATED
from ccasim.system import System
from ccasim.trace import EventKind


def sha(b):
    return hashlib.sha256(b).digest()


def fold(events):
    value = bytes(32)
    for kind, blob in events:
        value = sha(value + sha(kind.encode() + b"\x00" + blob))
    return value.hex()


def expected_add_measurement():
    canonical = (b"memory_pages=2|shared_base_ipa=0x80000000|shared_pages=1|devices=|"
                 b"entry_script=add_responder|vq=0x1000/8")
    page0 = (sha(b"add_responder") * 4).ljust(PAGE, b"\0")
    page1 = bytes(PAGE)
    return fold([
        ("RealmCreate", canonical),
        ("Bootloader", sha(b"sbs trusted bootloader v1")),
        ("DataCreate", (0).to_bytes(8, "little") + sha(page0)),
        ("DataCreate", PAGE.to_bytes(8, "little") + sha(page1)),
        ("MapUnprotected", UNPROTECTED_BASE.to_bytes(8, "little")),
    ])


# Produced by the fold above and frozen here.
ADD_MEASUREMENT = "826cf026fa63fa2c33d6c6de38ccd46b7e8cdf79b50bb971f28077b6aaa3c615"


def test_measurement_matches_independent_fold(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    assert system.rmm.realm(rid).measurement.hex() == expected_add_measurement()


def test_measurement_frozen(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    assert system.rmm.realm(rid).measurement.hex() == ADD_MEASUREMENT


def test_measurement_depends_on_payload(system, add_manifest):
    a = system.hyp.create_sbs(add_manifest)
    b = system.hyp.create_sbs(add_manifest.with_(payload=b"other"))
    assert system.rmm.realm(a).measurement.hex() != system.rmm.realm(b).measurement.hex()


def test_extend_only_before_activate(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest, activate=False)
    system.rmm.extend_measurement(rid, "Extra", b"x")
    system.hyp.activate(rid)
    with pytest.raises(WrongState):
        system.rmm.extend_measurement(rid, "Extra", b"y")


def test_attestation_report(system, otp_manifest):
    rid = system.hyp.create_sbs(otp_manifest)
    rep = system.rmm.get_attestation_report(rid)
    plat = bytes(32)
    for image in (b"trusted-firmware v2.10", b"rmm v1.0-eac5", b"sbs trusted bootloader v1"):
        plat = sha(plat + sha(image))
    assert rep.platform_measurement == plat.hex()
    assert rep.realm_measurement == system.rmm.realm(rid).measurement.hex()
    assert rep.metadata["devices"] == ["VirtioNet"]
    assert rep.metadata["shared_region"] == [UNPROTECTED_BASE, 2]


def test_create_leaves_expected_gpt_states(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    rec = system.hyp.sbs[rid]
    for g in rec.data.values():
        assert system.machine.pair(g) == DELEGATED
    for g in rec.shared.values():
        assert system.machine.pair(g) == SHARED
    assert system.rmm.realm(rid).state is RealmState.ACTIVE


def test_overlap_refused(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    stolen = system.hyp.sbs[rid].granules[0]
    fresh = system.hyp.allocate(2)
    with pytest.raises(OverlapViolation):
        system.hyp.create_sbs(add_manifest, granules=[stolen] + fresh)
    # the victim keeps its page and the attempt's own granules come back
    assert system.rmm.owner[stolen] == rid
    for g in fresh:
        assert system.machine.pair(g) == UNDELEGATED


def test_sharing_sealed_after_activate(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    g = system.hyp.allocate(1)[0]
    system.hyp.delegate(g)
    with pytest.raises(SharingSealed):
        system.rmi("rmi_rtt_map_unprotected", realm_id=rid, granule=g,
                   ipa=UNPROTECTED_BASE + PAGE)


def test_shared_region_contiguous(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest.with_(shared_pages=0), activate=False)
    system.rmi("rmi_rtt_create", realm_id=rid, ipa_start=UNPROTECTED_BASE,
               ipa_end=UNPROTECTED_BASE + (1 << 21))
    a, b = system.hyp.allocate(2)
    system.hyp.delegate(a)
    system.hyp.delegate(b)
    system.rmi("rmi_rtt_map_unprotected", realm_id=rid, granule=a, ipa=UNPROTECTED_BASE)
    with pytest.raises(NotContiguous):
        system.rmi("rmi_rtt_map_unprotected", realm_id=rid, granule=b,
                   ipa=UNPROTECTED_BASE + 2 * PAGE)


def test_data_must_be_protected_ipa(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest.with_(shared_pages=0), activate=False)
    g = system.hyp.allocate(1)[0]
    system.hyp.delegate(g)
    with pytest.raises(RangeInvalid):
        system.rmi("rmi_data_create", realm_id=rid, granule=g, ipa=UNPROTECTED_BASE,
                   src_content=b"")


def test_shared_pages_are_not_executable(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    system.guest_op(rid, act.WriteMem(UNPROTECTED_BASE, b"\x90"))
    with pytest.raises(PermissionFault):
        system.guest_op(rid, act.Execute(UNPROTECTED_BASE))
    assert system.guest_op(rid, act.Execute(0)) is None


def test_unmapped_ipa_faults(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    with pytest.raises(StageTwoFault):
        system.guest_op(rid, act.ReadMem(16 * PAGE))


def test_ex_access_blocks_host_and_only_on_shared(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    g = system.hyp.sbs[rid].shared[UNPROTECTED_BASE]
    system.guest_op(rid, act.Rsi("ex_access", {"pages": [UNPROTECTED_BASE], "enable": True}))
    assert system.machine.pair(g) == EXCLUSIVE
    from ccasim.errors import GranuleProtectionFault
    with pytest.raises(GranuleProtectionFault):
        system.host_read(g * PAGE)
    system.guest_op(rid, act.WriteMem(UNPROTECTED_BASE, b"guest"))
    system.guest_op(rid, act.Rsi("ex_access", {"pages": [UNPROTECTED_BASE], "enable": False}))
    assert system.host_read(g * PAGE, 5) == b"guest"
    with pytest.raises(NotShared):
        system.guest_op(rid, act.Rsi("ex_access", {"pages": [0], "enable": True}))


def test_secure_world_sees_nothing_of_a_realm(system, add_manifest):
    from ccasim.errors import GranuleProtectionFault
    rid = system.hyp.create_sbs(add_manifest)
    for g in system.hyp.sbs[rid].granules:
        with pytest.raises(GranuleProtectionFault):
            system.secure_read(g * PAGE)


def test_mmio_gate(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    dev = 0x0A00_0000
    assert not system.rmm.handle_mmio_exit(rid, dev, "read", 7).emulate
    system.guest_op(rid, act.Rsi("mmio", {"pages": [dev]}))
    assert system.rmm.handle_mmio_exit(rid, dev + 8, "read", 7).emulate


def test_unmarked_guest_mmio_faults(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    with pytest.raises(StageTwoFault):
        system.guest_op(rid, act.MmioRead(0x0A00_0000))


def test_interrupt_filtering(system, otp_manifest):
    rid = system.hyp.create_sbs(otp_manifest)
    hyp = system.hyp
    assert hyp.inject_interrupt(rid, "Timer") == "Delivered"
    assert hyp.inject_interrupt(rid, "Device", "VirtioNet") == "Delivered"
    assert hyp.inject_interrupt(rid, "Device", "VirtioBlock") == "Filtered"
    assert hyp.inject_interrupt(rid, "Exception") == "Filtered"
    assert len(system.trace.of_kind(EventKind.INTERRUPT_FILTERED)) == 2


def test_boot_validation_allow_list(layout, add_manifest):
    s = System(layout, policy=BootPolicy(allow_list={"00" * 32}))
    rid, ex = s.hyp.launch(add_manifest)
    assert ex.reason is ExitReason.BOOT_REJECTED and ex.detail == "BadMeasurement"
    assert s.rmm.realm(rid).state is RealmState.DESTROYED


def test_boot_validation_devices(system, add_manifest):
    _, ex = system.hyp.launch(add_manifest.with_(devices=["Gpu"]))
    assert ex.detail == "DisallowedDevice"


def test_allowed_measurement_boots(layout, add_manifest):
    s = System(layout, policy=BootPolicy(allow_list={expected_add_measurement()}))
    _, ex = s.hyp.launch(add_manifest)
    assert ex.reason is ExitReason.PAUSE


def test_destroy_scrubs_and_returns(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    granules = list(system.hyp.sbs[rid].granules)
    system.guest_op(rid, act.WriteMem(8, b"secret"))
    returned = system.hyp.destroy_sbs(rid)
    assert sorted(returned) == sorted(granules)
    for g in granules:
        assert system.machine.pair(g) == UNDELEGATED
        assert system.machine.is_zero(g)
        assert system.host_read(g * PAGE, 16) == bytes(16)
    assert not system.rmm.delegated & set(granules)


def test_destroy_returns_host_dirtied_shared_page(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    g = system.hyp.sbs[rid].shared[UNPROTECTED_BASE]
    system.rmi("rmi_destroy_realm", realm_id=rid)      # teardown only
    system.host_write(g * PAGE, b"dirty")
    system.rmi("rmi_destroy_realm", realm_id=rid, granules=[g])
    assert system.machine.pair(g) == UNDELEGATED and system.machine.is_zero(g)


def test_ripas_change_needs_guest_request(system, add_manifest):
    from ccasim.realm_monitor import Ripas
    rid = system.hyp.create_sbs(add_manifest)
    with pytest.raises(WrongState):
        system.rmi("rmi_rtt_set_ripas", realm_id=rid, ipa_start=0, ipa_end=PAGE,
                   state=Ripas.EMPTY)


def test_static_realm_granules_untouched(system, add_manifest):
    system.hyp.create_sbs(add_manifest)
    assert system.machine.pair(2) == (P.REALM, P.REALM)
