"""Reference implementations kept apart from the package code they check."""
import hashlib
import struct


def hmac_sha1(key: bytes, msg: bytes) -> bytes:
    # spelled out rather than using the hmac module the package relies on
    block = 64
    if len(key) > block:
        key = hashlib.sha1(key).digest()
    key = key.ljust(block, b"\0")
    inner = hashlib.sha1(bytes(k ^ 0x36 for k in key) + msg).digest()
    return hashlib.sha1(bytes(k ^ 0x5C for k in key) + inner).digest()


def hotp(secret: bytes, counter: int, digits: int = 6) -> int:
    mac = hmac_sha1(secret, struct.pack(">Q", counter))
    off = mac[-1] & 0x0F
    code = int.from_bytes(mac[off:off + 4], "big") & 0x7FFF_FFFF
    return code % 10 ** digits


def wrap_add(a: int, b: int) -> int:
    """Signed 64-bit sum, as a two's-complement register would hold it."""
    s = (a + b) & 0xFFFF_FFFF_FFFF_FFFF
    return s - (1 << 64) if s >> 63 else s
