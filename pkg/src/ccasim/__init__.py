"""Simulator for sandboxed services built on a two-GPT confidential-compute design.

The normal world's cores check accesses against one granule protection table
and the realm and secure cores against another, so a granule can be shared
with one confidential VM, or held exclusively by it, without the secure world
gaining any view of it.
"""
from .errors import SimError
from .hooks import MUTATIONS, Hooks
from .manifest import Manifest
from .memory import Access, GptId, Machine, PasValue, World
from .realm_monitor import BootPolicy, RealmManagementMonitor
from .root_monitor import DYNAMIC_STATES, LEGAL_STATES, Layout, TrustedFirmware
from .system import System
from .trace import CounterReport, Event, EventKind, EventTrace

__version__ = "0.1.0"

__all__ = [
    "Access", "BootPolicy", "CounterReport", "DYNAMIC_STATES", "Event", "EventKind",
    "EventTrace", "GptId", "Hooks", "LEGAL_STATES", "Layout", "MUTATIONS", "Machine",
    "Manifest", "PasValue", "RealmManagementMonitor", "SimError", "System",
    "TrustedFirmware", "World",
]
