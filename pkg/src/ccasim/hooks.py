"""Fault-injection switches used by mutation tests.

Each flag disables one protection so the adversary harness can show that its
oracle notices. ``legacy_ns_map`` is different: it restores the stock CCA
behaviour of mapping normal-world granules into a realm's unprotected IPA
space without the share transition, which the Boomerang scenario uses to show
the second GPT alone still blocks the dereference.
"""
from dataclasses import dataclass, fields

MUTATIONS = ("skip_log_check", "skip_flush", "skip_nx", "skip_overlap_check",
             "skip_mmio_gate")


@dataclass
class Hooks:
    skip_log_check: bool = False
    skip_flush: bool = False
    skip_nx: bool = False
    skip_overlap_check: bool = False
    skip_mmio_gate: bool = False
    legacy_ns_map: bool = False

    @classmethod
    def mutant(cls, name: str) -> "Hooks":
        if name not in MUTATIONS:
            raise ValueError(f"unknown mutation {name!r}; choose from {MUTATIONS}")
        return cls(**{name: True})

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]
