"""SBS guest payloads, written as generator programs over guest actions.

The manifest's ``entry_script`` names one of :data:`PROGRAMS`. Responders keep
all of their state in guest memory (never in Python locals across requests),
so a restored snapshot can restart them at the top of the request loop.
"""
from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass

from ..actions import Execute, Halt, MmioRead, MmioWrite, Pause, ReadMem, Rsi, WriteMem
from ..errors import SimError
from ..manifest import PAGE, Manifest
from .transport import (CMD_ADD, CMD_ECHO, CMD_OTP, CMD_OTP_REGISTER, HEADER,
                        MAX_PAYLOAD, REPLY_OFFSET, STATUS_FRAME_INVALID, STATUS_OK,
                        STATUS_UNKNOWN_COMMAND)

MMIO_BASE = 0x0A00_0000
OTP_DIGITS = 6
OTP_SECRET_MAX = 64


@dataclass(frozen=True)
class GuestContext:
    realm_id: int
    manifest: Manifest
    resume: bool = False   # restarted after a snapshot: skip boot, start at a request

    @property
    def mailbox(self) -> int:
        return self.manifest.shared_base_ipa

    @property
    def state_page(self) -> int:
        """Last private data page, used for responder state."""
        return (self.manifest.memory_pages - 1) * PAGE

    def device_pages(self) -> list[int]:
        return [MMIO_BASE + i * PAGE for i, _ in enumerate(self.manifest.devices)]


def hotp(secret: bytes, counter: int, digits: int = OTP_DIGITS) -> int:
    """HMAC-SHA1 one-time password with dynamic truncation."""
    mac = hmac.new(secret, struct.pack(">Q", counter), hashlib.sha1).digest()
    off = mac[-1] & 0x0F
    code = struct.unpack(">I", mac[off:off + 4])[0] & 0x7FFF_FFFF
    return code % 10 ** digits


def _boot(ctx: GuestContext):
    """Mark the virtio MMIO windows and probe each device's status register."""
    pages = ctx.device_pages()
    if pages:
        yield Rsi("mmio", {"pages": pages})
        for p in pages:
            yield MmioRead(p)


def idle(ctx: GuestContext):
    if not ctx.resume:
        yield from _boot(ctx)
    while True:
        yield Pause()


def halt_now(ctx: GuestContext):
    yield Halt()


# -- RPC responders ------------------------------------------------------


def _handle_add(ctx, payload):
    if len(payload) != 16:
        return STATUS_FRAME_INVALID, b""
    a, b = struct.unpack("<qq", payload)
    s = (a + b + 2 ** 63) % 2 ** 64 - 2 ** 63
    return STATUS_OK, struct.pack("<q", s)
    yield  # pragma: no cover - makes this a generator like the others


def _handle_otp_register(ctx, payload):
    if not 0 < len(payload) <= OTP_SECRET_MAX:
        return STATUS_FRAME_INVALID, b""
    record = struct.pack("<I", len(payload)) + payload.ljust(OTP_SECRET_MAX, b"\0")
    yield WriteMem(ctx.state_page, record + struct.pack("<Q", 0))
    return STATUS_OK, b""


def _handle_otp(ctx, payload):
    raw = yield ReadMem(ctx.state_page, 4 + OTP_SECRET_MAX + 8)
    n = struct.unpack_from("<I", raw)[0]
    if not 0 < n <= OTP_SECRET_MAX:
        return STATUS_FRAME_INVALID, b""
    secret = raw[4:4 + n]
    counter = struct.unpack_from("<Q", raw, 4 + OTP_SECRET_MAX)[0]
    yield WriteMem(ctx.state_page + 4 + OTP_SECRET_MAX, struct.pack("<Q", counter + 1))
    return STATUS_OK, struct.pack("<I", hotp(secret, counter))


def _handle_echo(ctx, payload):
    return STATUS_OK, payload
    yield  # pragma: no cover


HANDLERS = {
    CMD_ADD: _handle_add,
    CMD_OTP_REGISTER: _handle_otp_register,
    CMD_OTP: _handle_otp,
    CMD_ECHO: _handle_echo,
}


def rpc_responder(ctx: GuestContext, exclusive: bool = True, window: bool = False):
    """Serve one mailbox request per entry.

    The header is checked, then read again before use. With ``exclusive`` the
    whole check-to-use span runs with the mailbox page locked away from the
    normal world; ``window`` pauses between check and use to expose the race.
    """
    box = ctx.mailbox
    if not ctx.resume:
        yield from _boot(ctx)
        yield Pause()
    while True:
        if exclusive:
            yield Rsi("ex_access", {"pages": [box], "enable": True})
        hdr = yield ReadMem(box, HEADER.size)
        cmd, length, _ = HEADER.unpack(hdr)
        if length > MAX_PAYLOAD:
            status, reply = STATUS_FRAME_INVALID, b""
        else:
            if window:
                yield Pause()
            cmd, length, _ = HEADER.unpack((yield ReadMem(box, HEADER.size)))
            payload = (yield ReadMem(box + HEADER.size, length)) if length else b""
            handler = HANDLERS.get(cmd)
            if handler is None:
                status, reply = STATUS_UNKNOWN_COMMAND, b""
            else:
                status, reply = yield from handler(ctx, payload)
        if exclusive:
            yield Rsi("ex_access", {"pages": [box], "enable": False})
        yield WriteMem(box + REPLY_OFFSET, HEADER.pack(cmd, len(reply), status) + reply)
        yield Pause()


def add_responder(ctx):
    return rpc_responder(ctx)


def otp_responder(ctx):
    return rpc_responder(ctx)


def unguarded_responder(ctx):
    """Same service without exclusive access, to show why it matters."""
    return rpc_responder(ctx, exclusive=False, window=True)


def guarded_window_responder(ctx):
    return rpc_responder(ctx, exclusive=True, window=True)


def virtio_driver(ctx: GuestContext):
    """Boot, then write each device's doorbell on every entry."""
    if not ctx.resume:
        yield from _boot(ctx)
        yield Pause()
    while True:
        for p in ctx.device_pages():
            yield MmioWrite(p + 0x50, 1)
        yield Pause()


def shellcode_runner(ctx: GuestContext):
    """Jump into the shared region; a correct RMM turns this into a fault."""
    yield Pause()
    try:
        yield Execute(ctx.mailbox)
    except SimError:
        yield Halt()
    yield Pause()


PROGRAMS = {
    "idle": idle,
    "halt": halt_now,
    "add_responder": add_responder,
    "otp_responder": otp_responder,
    "rpc_responder": add_responder,
    "unguarded_responder": unguarded_responder,
    "guarded_window_responder": guarded_window_responder,
    "virtio_driver": virtio_driver,
    "shellcode_runner": shellcode_runner,
}


def build_program(rd, rec):
    fn = PROGRAMS.get(rd.params.entry_script, idle)
    return fn(GuestContext(rd.realm_id, rd.params, resume=rec.started))
