"""End-to-end sealed device traffic relayed by the untrusted hypervisor.

The guest and a remote endpoint (disk image owner, network peer) share an
AES-GCM key the hypervisor never sees. Ciphertext travels through the
virtqueue in the shared region, so the relay can drop, replay or flip bits,
but any change is caught when the receiver opens the message.
"""
from __future__ import annotations

import hashlib
import struct

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from ..errors import TamperDetected, WrongState
from ..trace import EventKind
from .transport import Virtqueue

DEVICES = {"Block": "VirtioBlock", "Net": "VirtioNet",
           "VirtioBlock": "VirtioBlock", "VirtioNet": "VirtioNet"}


def _nonce(direction: int, counter: int) -> bytes:
    return struct.pack(">IQ", direction, counter)


class SecureChannel:
    """One device's sealed link between a guest and its remote endpoint."""

    TO_REMOTE, TO_GUEST = 1, 2

    def __init__(self, system, realm_id: int, dev: str, key: bytes | None = None):
        device = DEVICES.get(dev)
        rd = system.rmm.realm(realm_id)
        if device is None or device not in rd.devices:
            raise WrongState(f"device {dev!r} is not attached to realm {realm_id}")
        self.system = system
        self.realm_id = realm_id
        self.device = device
        # provisioned out of band; deterministic so traces are reproducible
        self.key = key or hashlib.sha256(f"{device}:{realm_id}".encode()).digest()
        self.aead = AESGCM(self.key)
        self.vq = Virtqueue(system, realm_id)
        self.sent = {self.TO_REMOTE: 0, self.TO_GUEST: 0}
        self.received = {self.TO_REMOTE: 0, self.TO_GUEST: 0}

    def _seal(self, direction: int, plaintext: bytes) -> bytes:
        n = self.sent[direction]
        self.sent[direction] += 1
        return self.aead.encrypt(_nonce(direction, n), plaintext, self.device.encode())

    def _open(self, direction: int, blob: bytes | None) -> bytes:
        n = self.received[direction]
        try:
            if not blob:
                raise InvalidTag()
            out = self.aead.decrypt(_nonce(direction, n), blob, self.device.encode())
        except InvalidTag:
            self.system.trace.emit(EventKind.ATTACK_BLOCKED, "device_tamper",
                                   outcome="TamperDetected", realm=self.realm_id,
                                   device=self.device)
            raise TamperDetected(f"{self.device} message {n} failed authentication") from None
        self.received[direction] += 1
        return out

    def _buffer_ipa(self) -> int:
        return self.vq.buffers

    # -- guest to remote -------------------------------------------------

    def guest_send(self, plaintext: bytes, core: int = 0, tamper=None) -> bytes:
        """Guest seals and queues; hypervisor relays; remote opens.

        ``tamper`` is the hypervisor's chance to rewrite the ciphertext.
        """
        blob = self._seal(self.TO_REMOTE, plaintext)
        desc = self.vq.write_buffer("guest", self._buffer_ipa(), blob, core)
        self.vq.push("guest", desc, core)
        got = self.vq.pop("host", core)
        relayed = self.vq.read_buffer("host", got, core)
        if tamper is not None:
            relayed = tamper(relayed)
        return self._open(self.TO_REMOTE, relayed)

    # -- remote to guest -------------------------------------------------

    def device_to_guest(self, plaintext: bytes, core: int = 0, tamper=None) -> bytes:
        blob = self._seal(self.TO_GUEST, plaintext)
        if tamper is not None:
            blob = tamper(blob)
        desc = self.vq.write_buffer("host", self._buffer_ipa(), blob, core)
        self.vq.push("host", desc, core)
        return self.guest_receive(core)

    def guest_receive(self, core: int = 0) -> bytes:
        got = self.vq.pop("guest", core)
        blob = self.vq.read_buffer("guest", got, core) if got is not None else None
        return self._open(self.TO_GUEST, blob)

    def spurious_interrupt(self, core: int = 0) -> bytes:
        """Hypervisor raises a device interrupt with nothing behind it."""
        self.system.hyp.inject_interrupt(self.realm_id, "Device", self.device, core=core)
        return self.guest_receive(core)


def flip_bit(blob: bytes, bit: int = 0) -> bytes:
    b = bytearray(blob)
    b[bit // 8 % len(b)] ^= 1 << (bit % 8)
    return bytes(b)


def encrypted_channel(system, realm_id: int, dev: str, payload: bytes,
                      tamper=None, core: int = 0) -> str:
    """Relay one guest message; returns ``Delivered`` or ``TamperDetected``."""
    ch = SecureChannel(system, realm_id, dev)
    try:
        out = ch.guest_send(payload, core=core, tamper=tamper)
    except TamperDetected:
        return "TamperDetected"
    return "Delivered" if out == payload else "TamperDetected"
