import pytest
from hypothesis import given, settings, strategies as st

from ccasim import actions as act
from ccasim.errors import FrameInvalid, PointerEscape, RangeInvalid, TamperDetected, WrongState
from ccasim.manifest import PAGE, UNPROTECTED_BASE, Manifest
from ccasim.normal_world import (Descriptor, RpcFrame, SecureChannel, Virtqueue,
                                 encrypted_channel, flip_bit, hotp)
from ccasim.normal_world.transport import CMD_ECHO, MAX_PAYLOAD
from ccasim.realm_monitor import ExitReason
from ccasim.system import System
from ccasim.trace import EventKind

import oracles
from conftest import SMALL_LAYOUT

RFC4226_SECRET = b"12345678901234567890"
RFC4226_CODES = [755224, 287082, 359152, 969429, 338314,
                 254676, 287922, 162583, 399871, 520489]


@pytest.mark.parametrize("counter,code", list(enumerate(RFC4226_CODES)))
def test_hotp_rfc_vectors(counter, code):
    assert hotp(RFC4226_SECRET, counter) == code
    assert oracles.hotp(RFC4226_SECRET, counter) == code


@settings(max_examples=100)
@given(secret=st.binary(min_size=1, max_size=64), counter=st.integers(0, 2**32))
def test_hotp_agrees_with_oracle(secret, counter):
    assert hotp(secret, counter) == oracles.hotp(secret, counter)


@pytest.fixture(scope="module")
def add_service():
    from ccasim import Layout
    s = System(Layout.parse(SMALL_LAYOUT))
    rid, ex = s.hyp.launch(Manifest(name="add", memory_pages=2, shared_pages=1,
                                    entry_script="add_responder"))
    assert ex.reason is ExitReason.PAUSE
    return s, rid


i64 = st.integers(-(2**63), 2**63 - 1)


@settings(max_examples=60, deadline=None)
@given(a=i64, b=i64)
def test_add_service(add_service, a, b):
    s, rid = add_service
    assert s.app.add(rid, a, b) == oracles.wrap_add(a, b)


def test_otp_service(system, otp_manifest):
    rid, _ = system.hyp.launch(otp_manifest)
    system.app.otp_register(rid, RFC4226_SECRET)
    assert [system.app.otp(rid) for _ in range(3)] == RFC4226_CODES[:3]


def test_otp_secret_is_private(system, otp_manifest):
    rid, _ = system.hyp.launch(otp_manifest)
    system.app.otp_register(rid, RFC4226_SECRET)
    for g in system.hyp.sbs[rid].data.values():
        from ccasim.errors import GranuleProtectionFault
        with pytest.raises(GranuleProtectionFault):
            system.host_read(g * PAGE)


def test_echo_and_oversized_frame(system, add_manifest):
    rid, _ = system.hyp.launch(add_manifest)
    assert system.app.rpc_call(rid, RpcFrame(CMD_ECHO, b"ping")).payload == b"ping"
    # the header lies about the payload length
    with pytest.raises(FrameInvalid):
        system.app.rpc_call(rid, RpcFrame(CMD_ECHO, b"x", declared_length=MAX_PAYLOAD + 1))
    # the service keeps working afterwards
    assert system.app.add(rid, 2, 3) == 5


def test_post_rejects_frame_bigger_than_mailbox(system, add_manifest):
    rid, _ = system.hyp.launch(add_manifest)
    with pytest.raises(FrameInvalid):
        system.app.post(rid, RpcFrame(CMD_ECHO, bytes(PAGE)))


def test_rpc_brackets_with_exclusive_access(system, add_manifest):
    rid, _ = system.hyp.launch(add_manifest)
    start = system.trace.next_step
    system.app.add(rid, 1, 2)
    rsis = [e for e in system.trace.of_kind(EventKind.RSI, "rsi_ex_access") if e.step >= start]
    assert [e.args["enable"] for e in rsis] == [True, False]


def test_allocate_exhaustion(system):
    with pytest.raises(RangeInvalid):
        system.hyp.allocate(10_000)


def test_virtqueue_roundtrip(system, otp_manifest):
    rid = system.hyp.create_sbs(otp_manifest)
    vq = Virtqueue(system, rid)
    d = vq.write_buffer("host", vq.buffers, b"hello")
    vq.push("host", d)
    got = vq.pop("guest")
    assert got == d
    assert vq.read_buffer("guest", got) == b"hello"
    assert vq.pop("guest") is None


def test_virtqueue_escape(system, otp_manifest):
    rid = system.hyp.create_sbs(otp_manifest)
    vq = Virtqueue(system, rid)
    with pytest.raises(PointerEscape):
        vq.push("host", Descriptor(0, 64))
    # a host that skips validation still cannot make the guest follow it
    vq.push("host", Descriptor(0, 64), validate=False)
    with pytest.raises(PointerEscape):
        vq.pop("guest")
    end = UNPROTECTED_BASE + 2 * PAGE
    assert vq.contains(end - 8, 8) and not vq.contains(end - 8, 9)


def test_virtqueue_needs_room(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    with pytest.raises(FrameInvalid):
        Virtqueue(system, rid)


def test_channel_delivers_and_detects(system, otp_manifest):
    rid, _ = system.hyp.launch(otp_manifest)
    assert encrypted_channel(system, rid, "Net", b"payload") == "Delivered"
    assert encrypted_channel(system, rid, "Net", b"payload",
                             tamper=lambda b: flip_bit(b, 3)) == "TamperDetected"
    assert system.trace.of_kind(EventKind.ATTACK_BLOCKED, "device_tamper")


def test_channel_inbound(system, otp_manifest):
    rid, _ = system.hyp.launch(otp_manifest)
    ch = SecureChannel(system, rid, "Net")
    assert ch.device_to_guest(b"one") == b"one"
    with pytest.raises(TamperDetected):
        ch.device_to_guest(b"two", tamper=lambda b: b[:-1])
    with pytest.raises(TamperDetected):
        ch.spurious_interrupt()


def test_channel_needs_attached_device(system, otp_manifest):
    rid, _ = system.hyp.launch(otp_manifest)
    with pytest.raises(WrongState):
        SecureChannel(system, rid, "Block")


def test_virtio_driver_talks_through_marked_mmio(system):
    m = Manifest(name="drv", memory_pages=2, shared_pages=2, devices=("VirtioBlock",),
                 entry_script="virtio_driver")
    rid, ex = system.hyp.launch(m)
    assert ex.reason is ExitReason.PAUSE
    assert any(log[2] == "read" for log in system.hyp.mmio_log)
    system.hyp.run(rid)
    assert any(log[2] == "write" for log in system.hyp.mmio_log)


def test_guest_reads_its_own_page(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    raw = system.guest_op(rid, act.ReadMem(0, 32))
    import hashlib
    assert raw == hashlib.sha256(b"add_responder").digest()
