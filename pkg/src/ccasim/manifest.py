"""SBS manifest and bootloader allow-list files.

A manifest is ``key = value`` text, one field per line, ``#`` comments::

    memory_pages = 4
    shared_base_ipa = 0x80000000
    shared_pages = 2
    devices = [VirtioBlock, VirtioNet]
    entry_script = add_responder
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

from .errors import ManifestInvalid

PAGE = 4096
UNPROTECTED_BASE = 0x8000_0000
MAILBOX_BYTES = PAGE // 2

DEVICE_KINDS = ("VirtioBlock", "VirtioNet", "VirtioConsole", "Gpu")


@dataclass(frozen=True)
class Manifest:
    memory_pages: int = 4
    shared_base_ipa: int = UNPROTECTED_BASE
    shared_pages: int = 2
    devices: tuple[str, ...] = ()
    entry_script: str = "idle"
    payload: bytes | None = None
    payload_digest: str | None = None
    vq_offset: int = PAGE
    vq_size: int = 8
    name: str = "sbs"

    def validate(self) -> None:
        if self.memory_pages < 1:
            raise ManifestInvalid("memory_pages must be >= 1")
        if self.shared_pages < 0:
            raise ManifestInvalid("shared_pages must be >= 0")
        if self.shared_base_ipa % PAGE or self.shared_base_ipa < UNPROTECTED_BASE:
            raise ManifestInvalid("shared_base_ipa must be a page in the unprotected window")
        if self.memory_pages * PAGE > UNPROTECTED_BASE:
            raise ManifestInvalid("protected memory exceeds the protected IPA window")
        for d in self.devices:
            if d not in DEVICE_KINDS:
                raise ManifestInvalid(f"unknown device kind {d!r}")
        if len(self.payload_bytes()) > self.memory_pages * PAGE:
            raise ManifestInvalid("payload larger than memory_pages")
        if self.payload_digest is not None:
            got = hashlib.sha256(self.payload_bytes()).hexdigest()
            if got != self.payload_digest.lower():
                raise ManifestInvalid(f"payload digest mismatch: {got}")

    def payload_bytes(self) -> bytes:
        if self.payload is not None:
            return self.payload
        return hashlib.sha256(self.entry_script.encode()).digest() * 4

    def payload_pages(self) -> list[bytes]:
        data = self.payload_bytes()
        return [data[i * PAGE:(i + 1) * PAGE] for i in range(self.memory_pages)]

    @property
    def shared_bytes(self) -> int:
        return self.shared_pages * PAGE

    def has_virtqueue(self) -> bool:
        return self.vq_size > 0 and self.vq_offset + 8 + 16 * self.vq_size <= self.shared_bytes

    def canonical(self) -> bytes:
        """Byte encoding folded into the realm measurement at creation."""
        return "|".join([
            f"memory_pages={self.memory_pages}",
            f"shared_base_ipa={self.shared_base_ipa:#x}",
            f"shared_pages={self.shared_pages}",
            f"devices={','.join(self.devices)}",
            f"entry_script={self.entry_script}",
            f"vq={self.vq_offset:#x}/{self.vq_size}",
        ]).encode()

    def with_(self, **changes) -> "Manifest":
        if "devices" in changes:
            changes["devices"] = tuple(changes["devices"])
        return replace(self, **changes)

    # -- text format -----------------------------------------------------

    @classmethod
    def parse(cls, text: str) -> "Manifest":
        fields_: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in cls.__dataclass_fields__:
                raise ManifestInvalid(f"line {lineno}: unknown or malformed field {key!r}")
            fields_[key] = _parse_value(key, value)
        m = cls(**fields_)
        m.validate()
        return m

    @classmethod
    def load(cls, path: str) -> "Manifest":
        with open(path) as fh:
            return cls.parse(fh.read())

    def format(self) -> str:
        lines = [
            f"name = {self.name}",
            f"memory_pages = {self.memory_pages}",
            f"shared_base_ipa = {self.shared_base_ipa:#x}",
            f"shared_pages = {self.shared_pages}",
            f"devices = [{', '.join(self.devices)}]",
            f"entry_script = {self.entry_script}",
            f"vq_offset = {self.vq_offset:#x}",
            f"vq_size = {self.vq_size}",
        ]
        if self.payload is not None:
            lines.append(f"payload = hex:{self.payload.hex()}")
        if self.payload_digest is not None:
            lines.append(f"payload_digest = {self.payload_digest}")
        return "\n".join(lines) + "\n"


def _parse_value(key: str, value: str):
    if key == "devices":
        inner = value.strip("[]").strip()
        return tuple(v.strip().strip("'\"") for v in inner.split(",") if v.strip())
    if key == "payload":
        value = value.strip("'\"")
        return bytes.fromhex(value[4:]) if value.startswith("hex:") else value.encode()
    if key in ("memory_pages", "shared_base_ipa", "shared_pages", "vq_offset", "vq_size"):
        try:
            return int(value, 0)
        except ValueError:
            raise ManifestInvalid(f"{key} must be an integer, got {value!r}") from None
    return value.strip("'\"")


def load_allow_list(path: str) -> set[str]:
    """One hex digest per line; blank lines and ``#`` comments ignored."""
    out = set()
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip().lower()
            if line:
                bytes.fromhex(line)
                out.add(line)
    return out
