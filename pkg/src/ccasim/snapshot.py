"""Machine-state snapshot used to carry a system between CLI invocations.

Layout (all integers little-endian)::

    magic    8 bytes   b"CCASNAP\\0"
    version  u16       SNAPSHOT_VERSION
    count    u16       number of sections
    section  repeated: tag (4 ASCII bytes), length u32, payload

Sections:

``META``  UTF-8 JSON (sorted keys): layout text, hooks, boot policy, core
          count, next trace step, and the firmware, RMM and hypervisor
          bookkeeping.
``GPTS``  the two GPT rows, ``2 * n_granules`` signed bytes, GptN first.
``DATA``  u32 count, then per non-zero granule: u32 index + granule bytes.

Guest programs are Python generators and are not saved. A REC that had
booted resumes at the top of its request loop, which is where every
responder sits between CLI commands.
"""
from __future__ import annotations

import json
import struct
from collections import Counter

import numpy as np

from .hooks import Hooks
from .manifest import Manifest
from .memory import World
from .normal_world.hypervisor import SbsRecord
from .realm_monitor import (BootPolicy, Measurement, RealmDescriptor, RealmState, Rec,
                            Ripas)
from .root_monitor import Layout
from .system import System
from .trace import EventTrace

MAGIC = b"CCASNAP\0"
SNAPSHOT_VERSION = 1
_HEAD = struct.Struct("<8sHH")
_SECTION = struct.Struct("<4sI")


class SnapshotError(Exception):
    pass


def _realm_to_json(rd: RealmDescriptor) -> dict:
    return {
        "realm_id": rd.realm_id,
        "manifest": rd.params.format(),
        "state": rd.state.value,
        "s2": [[ipa, g, p] for ipa, (g, p) in sorted(rd.s2.items())],
        "ripas": [[ipa, r.value] for ipa, r in sorted(rd.ripas.items())],
        "shared_region": list(rd.shared_region) if rd.shared_region else None,
        "mmio": sorted(rd.mmio_regions),
        "measurement": rd.measurement.hex(),
        "measurement_log": [[k, ev.hex()] for k, ev in rd.measurement.log],
        "recs": list(rd.recs),
        "devices": list(rd.devices),
        "rtts": sorted(rd.rtts),
        "granules": sorted(rd.granules),
        "released": sorted(rd.released),
        "validated": rd.validated,
    }


def _realm_from_json(d: dict) -> RealmDescriptor:
    m = Measurement()
    m.value = bytes.fromhex(d["measurement"])
    m.log = [(k, bytes.fromhex(ev)) for k, ev in d["measurement_log"]]
    return RealmDescriptor(
        realm_id=d["realm_id"],
        params=Manifest.parse(d["manifest"]),
        state=RealmState(d["state"]),
        s2={ipa: (g, p) for ipa, g, p in d["s2"]},
        ripas={ipa: Ripas(r) for ipa, r in d["ripas"]},
        shared_region=tuple(d["shared_region"]) if d["shared_region"] else None,
        mmio_regions=set(d["mmio"]),
        measurement=m,
        recs=list(d["recs"]),
        devices=list(d["devices"]),
        rtts=set(d["rtts"]),
        granules=set(d["granules"]),
        released=set(d["released"]),
        validated=d["validated"],
    )


def _meta(system: System) -> dict:
    rmm, hyp, tf = system.rmm, system.hyp, system.tf
    policy = rmm.policy
    return {
        "layout": system.layout.format(),
        "cores": system.n_cores,
        "hooks": system.hooks.active(),
        "allow_list": sorted(policy.allow_list) if policy.allow_list is not None else None,
        "allowed_devices": sorted(policy.allowed_devices),
        "trace_step": system.trace.next_step,
        "tf_pending": [[list(k), n] for k, n in sorted(tf.pending.items(), key=repr)],
        "rmm": {
            "realms": [_realm_to_json(rd) for _, rd in sorted(rmm.realms.items())],
            "recs": [{"rec_id": r.rec_id, "realm_id": r.realm_id, "regs": r.regs,
                      "halted": r.halted, "started": r.started}
                     for _, r in sorted(rmm.recs.items())],
            "owner": sorted(rmm.owner.items()),
            "delegated": sorted(rmm.delegated),
            "next_realm_id": rmm.next_realm_id,
            "next_rec_id": rmm.next_rec_id,
        },
        "hyp": {
            "free": list(hyp.free),
            "delegated": sorted(hyp.delegated),
            "sbs": [{"realm_id": r.realm_id, "manifest": r.manifest.format(),
                     "rec_id": r.rec_id, "data": sorted(r.data.items()),
                     "shared": sorted(r.shared.items()), "granules": r.granules}
                    for _, r in sorted(hyp.sbs.items())],
            "device_regs": [[rid, ipa, v] for (rid, ipa), v in sorted(hyp.device_regs.items())],
        },
    }


def dumps(system: System) -> bytes:
    m = system.machine
    meta = json.dumps(_meta(system), sort_keys=True, separators=(",", ":")).encode()
    gpts = m.gpt.astype(np.int8).tobytes()
    nonzero = np.flatnonzero(m.content.any(axis=1))
    data = bytearray(struct.pack("<I", len(nonzero)))
    for g in nonzero:
        data += struct.pack("<I", int(g)) + m.content[g].tobytes()
    sections = [(b"META", meta), (b"GPTS", gpts), (b"DATA", bytes(data))]
    out = bytearray(_HEAD.pack(MAGIC, SNAPSHOT_VERSION, len(sections)))
    for tag, payload in sections:
        out += _SECTION.pack(tag, len(payload)) + payload
    return bytes(out)


def _sections(blob: bytes) -> dict[bytes, bytes]:
    if len(blob) < _HEAD.size:
        raise SnapshotError("snapshot truncated")
    magic, version, count = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise SnapshotError("not a ccasim snapshot")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
    pos, out = _HEAD.size, {}
    for _ in range(count):
        if pos + _SECTION.size > len(blob):
            raise SnapshotError("snapshot truncated in section header")
        tag, n = _SECTION.unpack_from(blob, pos)
        pos += _SECTION.size
        if pos + n > len(blob):
            raise SnapshotError(f"section {tag!r} truncated")
        out[tag] = blob[pos:pos + n]
        pos += n
    return out


def loads(blob: bytes, trace: EventTrace | None = None) -> System:
    sec = _sections(blob)
    meta = json.loads(sec[b"META"])
    layout = Layout.parse(meta["layout"])
    hooks = Hooks(**{h: True for h in meta["hooks"]})
    allow = set(meta["allow_list"]) if meta["allow_list"] is not None else None
    policy = BootPolicy(allow_list=allow, allowed_devices=frozenset(meta["allowed_devices"]))
    # boot quietly, then overwrite the state wholesale
    system = System(layout, n_cores=meta["cores"], hooks=hooks, policy=policy,
                    trace=EventTrace(keep=False))
    m = system.machine
    n = m.n_granules
    m.gpt[:] = np.frombuffer(sec[b"GPTS"], dtype=np.int8).reshape(2, n)
    data = sec[b"DATA"]
    (count,) = struct.unpack_from("<I", data)
    pos = 4
    for _ in range(count):
        (g,) = struct.unpack_from("<I", data, pos)
        pos += 4
        m.content[g] = np.frombuffer(data, dtype=np.uint8, count=m.granule_size, offset=pos)
        pos += m.granule_size
    system.tf.pending = Counter({tuple(k): v for k, v in meta["tf_pending"]})

    r = meta["rmm"]
    rmm = system.rmm
    rmm.realms = {d["realm_id"]: _realm_from_json(d) for d in r["realms"]}
    rmm.recs = {d["rec_id"]: Rec(d["rec_id"], d["realm_id"], list(d["regs"]),
                                 halted=d["halted"], started=d["started"])
                for d in r["recs"]}
    rmm.owner = {g: rid for g, rid in r["owner"]}
    rmm.delegated = set(r["delegated"])
    rmm.next_realm_id = r["next_realm_id"]
    rmm.next_rec_id = r["next_rec_id"]

    h = meta["hyp"]
    hyp = system.hyp
    hyp.free = list(h["free"])
    hyp.delegated = set(h["delegated"])
    hyp.sbs = {d["realm_id"]: SbsRecord(d["realm_id"], Manifest.parse(d["manifest"]),
                                        d["rec_id"], dict(map(tuple, d["data"])),
                                        dict(map(tuple, d["shared"])), list(d["granules"]))
               for d in h["sbs"]}
    hyp.device_regs = {(rid, ipa): v for rid, ipa, v in h["device_regs"]}

    for c in m.cores:
        c.tlb.clear()
        m.context_switch(c.core_id, World.NORMAL)
    new_trace = trace if trace is not None else EventTrace()
    new_trace.next_step = max(new_trace.next_step, meta["trace_step"])
    system.trace = new_trace
    m.trace = new_trace
    return system


def save(system: System, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(system))


def load(path: str, trace: EventTrace | None = None) -> System:
    with open(path, "rb") as fh:
        return loads(fh.read(), trace)
