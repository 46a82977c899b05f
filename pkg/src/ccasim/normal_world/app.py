"""Android-app side of the RPC mailbox."""
from __future__ import annotations

import struct

from ..errors import FrameInvalid
from ..realm_monitor import ExitReason
from .transport import (CMD_ADD, CMD_OTP, CMD_OTP_REGISTER, HEADER, REPLY_OFFSET,
                        STATUS_FRAME_INVALID, STATUS_OK, RpcFrame)

STATUS_PENDING = 0xFFFF_FFFF


class App:
    def __init__(self, system):
        self.system = system

    def _mailbox(self, realm_id: int) -> int:
        base = self.system.hyp.sbs[realm_id].manifest.shared_base_ipa
        return self.system.hyp.shared_pa(realm_id, base)

    def post(self, realm_id: int, frame: RpcFrame, core: int = 0) -> None:
        """Write a request and mark the reply slot as pending."""
        pa = self._mailbox(realm_id)
        raw = frame.encode()
        if len(raw) > REPLY_OFFSET:
            raise FrameInvalid(f"frame of {len(raw)} bytes does not fit the mailbox")
        self.system.host_write(pa + REPLY_OFFSET, HEADER.pack(0, 0, STATUS_PENDING), core=core)
        self.system.host_write(pa, raw, core=core)

    def collect(self, realm_id: int, core: int = 0) -> RpcFrame:
        pa = self._mailbox(realm_id) + REPLY_OFFSET
        cmd, n, status = HEADER.unpack(self.system.host_read(pa, HEADER.size, core=core))
        if status == STATUS_PENDING:
            raise FrameInvalid("service produced no reply")
        if status == STATUS_FRAME_INVALID:
            raise FrameInvalid("service rejected the frame")
        payload = self.system.host_read(pa + HEADER.size, n, core=core) if n else b""
        return RpcFrame(cmd, payload, status)

    def rpc_call(self, realm_id: int, frame: RpcFrame, core: int = 0) -> RpcFrame:
        self.post(realm_id, frame, core)
        ex = self.system.hyp.run(realm_id, core=core)
        if ex.reason is not ExitReason.PAUSE:
            raise FrameInvalid(f"service exited with {ex.reason.value}")
        return self.collect(realm_id, core)

    # -- services -------------------------------------------------------

    def add(self, realm_id: int, a: int, b: int, core: int = 0) -> int:
        reply = self.rpc_call(realm_id, RpcFrame(CMD_ADD, struct.pack("<qq", a, b)), core)
        return struct.unpack("<q", reply.payload)[0]

    def otp_register(self, realm_id: int, secret: bytes, core: int = 0) -> None:
        reply = self.rpc_call(realm_id, RpcFrame(CMD_OTP_REGISTER, bytes(secret)), core)
        if reply.status != STATUS_OK:
            raise FrameInvalid(f"registration failed with status {reply.status}")

    def otp(self, realm_id: int, core: int = 0) -> int:
        reply = self.rpc_call(realm_id, RpcFrame(CMD_OTP), core)
        return struct.unpack("<I", reply.payload)[0]
