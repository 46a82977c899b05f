"""Guest actions.

A guest program is a generator that yields these objects and receives the
result of each one back (``bytes`` for reads, the RSI return value, the MMIO
read value, ``None`` otherwise). Faults are thrown into the generator, so a
program may catch them. A plain list of actions is a valid program too
(a *GuestScript*).
"""
from dataclasses import dataclass, field


@dataclass(frozen=True)
class WriteMem:
    ipa: int
    data: bytes


@dataclass(frozen=True)
class ReadMem:
    ipa: int
    length: int = 8


@dataclass(frozen=True)
class Execute:
    ipa: int


@dataclass(frozen=True)
class Rsi:
    call: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MmioRead:
    ipa: int


@dataclass(frozen=True)
class MmioWrite:
    ipa: int
    value: int


@dataclass(frozen=True)
class Pause:
    """Exit to the hypervisor and resume on the next entry."""


@dataclass(frozen=True)
class Halt:
    pass


def run_script(actions):
    """Turn a GuestScript (list of actions) into a program; collects results."""
    results = []
    for act in actions:
        results.append((yield act))
    return results
