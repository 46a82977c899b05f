"""Shared-region transports: the RPC mailbox frame and a virtqueue ring.

Both live wholly inside a realm's shared region. The host touches them by
physical address through the normal-world GPC; the guest touches them by IPA
through its stage-2 table. Neither side has any other path to the bytes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .. import actions as act
from ..errors import FrameInvalid, PointerEscape
from ..manifest import MAILBOX_BYTES

HEADER = struct.Struct("<III")   # command, payload length, status
MAX_PAYLOAD = MAILBOX_BYTES - HEADER.size
REPLY_OFFSET = MAILBOX_BYTES

STATUS_OK = 0
STATUS_FRAME_INVALID = 1
STATUS_UNKNOWN_COMMAND = 2

CMD_ECHO = 1
CMD_ADD = 2
CMD_OTP_REGISTER = 3
CMD_OTP = 4


@dataclass(frozen=True)
class RpcFrame:
    command: int
    payload: bytes = b""
    status: int = STATUS_OK
    declared_length: int | None = None   # lets an attacker lie about the length

    def encode(self) -> bytes:
        n = len(self.payload) if self.declared_length is None else self.declared_length
        return HEADER.pack(self.command, n, self.status) + self.payload

    @classmethod
    def decode_header(cls, raw: bytes) -> tuple[int, int, int]:
        return HEADER.unpack(raw[:HEADER.size])


DESC = struct.Struct("<QIHH")   # addr, len, flags, pad
RING_HEADER = struct.Struct("<II")  # head, tail (free-running)


@dataclass(frozen=True)
class Descriptor:
    addr: int
    length: int
    flags: int = 0


def _pages(ipa: int, n: int):
    end = ipa + n
    while ipa < end:
        k = min(end, (ipa // 4096 + 1) * 4096) - ipa
        yield ipa, k
        ipa += k


class Virtqueue:
    """Single FIFO ring at ``shared_base + vq_offset``.

    ``push`` and ``pop`` both insist that a descriptor's buffer lies inside the
    shared region, so a host cannot steer the guest at private memory.
    """

    def __init__(self, system, realm_id: int):
        self.system = system
        self.realm_id = realm_id
        rd = system.rmm.realm(realm_id)
        m = rd.params
        if rd.shared_region is None or not m.has_virtqueue():
            raise FrameInvalid(f"realm {realm_id} has no room for a virtqueue")
        self.region = (rd.shared_region[0], rd.shared_region[1] * 4096)
        self.base = self.region[0] + m.vq_offset
        self.size = m.vq_size
        self.buffers = self.base + RING_HEADER.size + DESC.size * self.size

    def contains(self, addr: int, length: int) -> bool:
        lo, n = self.region
        return length >= 0 and lo <= addr and addr + length <= lo + n

    # -- raw byte paths ---------------------------------------------------

    def _read(self, side: str, ipa: int, n: int, core: int) -> bytes:
        return b"".join(
            self.system.host_read(self.system.hyp.shared_pa(self.realm_id, a), k, core=core)
            if side == "host" else
            self.system.guest_op(self.realm_id, act.ReadMem(a, k), core=core)
            for a, k in _pages(ipa, n))

    def _write(self, side: str, ipa: int, data: bytes, core: int) -> None:
        pos = 0
        for a, k in _pages(ipa, len(data)):
            chunk = data[pos:pos + k]
            pos += k
            if side == "host":
                self.system.host_write(self.system.hyp.shared_pa(self.realm_id, a), chunk, core=core)
            else:
                self.system.guest_op(self.realm_id, act.WriteMem(a, chunk), core=core)

    def _indices(self, side, core):
        return RING_HEADER.unpack(self._read(side, self.base, RING_HEADER.size, core))

    # -- ring operations --------------------------------------------------

    def push(self, side: str, desc: Descriptor, core: int = 0, validate: bool = True) -> None:
        if validate and not self.contains(desc.addr, desc.length):
            raise PointerEscape(f"descriptor [{desc.addr:#x}, +{desc.length}) leaves the shared region")
        head, tail = self._indices(side, core)
        if tail - head >= self.size:
            raise FrameInvalid("virtqueue full")
        slot = self.base + RING_HEADER.size + DESC.size * (tail % self.size)
        self._write(side, slot, DESC.pack(desc.addr, desc.length, desc.flags, 0), core)
        self._write(side, self.base + 4, struct.pack("<I", tail + 1), core)

    def pop(self, side: str, core: int = 0) -> Descriptor | None:
        head, tail = self._indices(side, core)
        if head == tail:
            return None
        slot = self.base + RING_HEADER.size + DESC.size * (head % self.size)
        addr, length, flags, _ = DESC.unpack(self._read(side, slot, DESC.size, core))
        self._write(side, self.base, struct.pack("<I", head + 1), core)
        desc = Descriptor(addr, length, flags)
        if not self.contains(addr, length):
            raise PointerEscape(f"popped descriptor [{addr:#x}, +{length}) leaves the shared region")
        return desc

    def read_buffer(self, side: str, desc: Descriptor, core: int = 0) -> bytes:
        return self._read(side, desc.addr, desc.length, core) if desc.length else b""

    def write_buffer(self, side: str, ipa: int, data: bytes, core: int = 0) -> Descriptor:
        if not self.contains(ipa, len(data)):
            raise PointerEscape("buffer leaves the shared region")
        self._write(side, ipa, data, core)
        return Descriptor(ipa, len(data))


def vq_push(system, side: str, realm_id: int, desc: Descriptor, core: int = 0) -> str:
    try:
        Virtqueue(system, realm_id).push(side, desc, core)
    except PointerEscape:
        return "Rejected(PointerEscape)"
    return "Ok"


def vq_pop(system, side: str, realm_id: int, core: int = 0) -> Descriptor | None:
    return Virtqueue(system, realm_id).pop(side, core)
