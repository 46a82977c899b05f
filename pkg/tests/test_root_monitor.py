import pytest
from hypothesis import given, settings, strategies as st

from ccasim import Layout, System
from ccasim.errors import Denied, LayoutInvalid, ScrubViolation, WrongState
from ccasim.memory import PasValue as P, World
from ccasim.root_monitor import (DELEGATED, DYNAMIC_STATES, EXCLUSIVE, SHARED,
                                 STATIC_STATES, UNDELEGATED)
from ccasim.trace import EventKind

from conftest import SMALL_LAYOUT


def test_state_constants():
    assert UNDELEGATED == (P.NORMAL, P.NOT_ACCESSIBLE)
    assert DELEGATED == (P.REALM, P.REALM)
    assert SHARED == (P.NORMAL, P.REALM)
    assert EXCLUSIVE == (P.NOT_ACCESSIBLE, P.REALM)
    assert len(DYNAMIC_STATES) == 4
    assert STATIC_STATES == {(P.ROOT, P.ROOT), (P.SECURE, P.SECURE), (P.REALM, P.REALM)}


def test_layout_parse_format_roundtrip(layout):
    assert layout.n_granules == 64
    assert Layout.parse(layout.format()).regions == layout.regions
    assert layout.granules(World.SECURE) == [60, 61, 62, 63]


@pytest.mark.parametrize("text", [
    "root 0-3\n",                                  # no size line
    "granules 4\nroot 0-1\nnormal 1-3\n",           # overlap
    "granules 4\nroot 0-1\nnormal 3\n",             # gap
    "granules 4\nroot 0-4\n",                       # past the end
    "granules 4\nmoon 0-3\n",                       # unknown world
])
def test_layout_rejects(text):
    with pytest.raises(LayoutInvalid):
        Layout.parse(text).validate()


def test_boot_tables(system):
    m = system.machine
    assert m.pair(0) == (P.ROOT, P.ROOT)
    assert m.pair(2) == (P.REALM, P.REALM)
    assert m.pair(4) == UNDELEGATED
    assert m.pair(63) == (P.SECURE, P.SECURE)


def test_boot_twice_refused(system):
    with pytest.raises(RuntimeError):
        system.tf.boot_create_gpts(system.layout)


def test_delegate_through_rmi(system):
    system.hyp.delegate(10)
    assert system.machine.pair(10) == DELEGATED
    assert not system.tf.pending          # log entry consumed
    system.hyp.undelegate(10)
    assert system.machine.pair(10) == UNDELEGATED


def test_unrequested_smc_refused(system):
    with pytest.raises(Denied):
        system.rogue_smc("delegate", 10)
    assert system.machine.pair(10) == UNDELEGATED
    system.hyp.delegate(10)
    with pytest.raises(Denied):
        system.rogue_smc("undelegate", 10)
    with pytest.raises(Denied):
        system.rogue_smc("share", 10, realm_id=1)
    assert system.machine.pair(10) == DELEGATED


def test_request_log_is_per_granule(system):
    system.tf.log_rmi("rmi_granule_delegate", 11)
    with pytest.raises(Denied):
        system.rogue_smc("delegate", 10)
    system.rogue_smc("delegate", 11)
    assert system.machine.pair(11) == DELEGATED


def test_static_granules_cannot_move(system):
    for g in (0, 2, 60):
        with pytest.raises(Denied):
            system.rmi("rmi_granule_delegate", granule=g)
    assert system.machine.pair(60) == (P.SECURE, P.SECURE)


def test_double_delegate_refused(system):
    system.hyp.delegate(10)
    with pytest.raises(Denied):
        system.rmi("rmi_granule_delegate", granule=10)


def test_undelegate_requires_scrub(system):
    system.hyp.delegate(10)
    system.machine.raw_write(10, b"secret")
    with pytest.raises(ScrubViolation):
        system.tf.smc_undelegate(10)


def test_undelegate_of_assigned_granule_refused(system, add_manifest):
    rid = system.hyp.create_sbs(add_manifest)
    g = system.hyp.sbs[rid].granules[0]
    with pytest.raises(WrongState):
        system.rmi("rmi_granule_undelegate", granule=g)


def test_shared_undelegate_passes_through_delegated(system):
    tf, m = system.tf, system.machine
    for key in (("rmi_granule_delegate", 10, None), ("rmi_rtt_map_unprotected", 10, 7)):
        tf.log_rmi(*key)
    tf.smc_delegate(10)
    tf.smc_2gpt_ns_share(10, 7)
    assert m.pair(10) == SHARED
    start = len(system.trace.events)
    tf.log_rmi("rmi_granule_undelegate", 10, 7)
    tf.smc_undelegate(10, 7)
    writes = [(e.name, e.args["pas"]) for e in system.trace.events[start:]
              if e.kind is EventKind.GPT_UPDATE]
    assert writes == [("N", "REALM"), ("N", "NORMAL"), ("RS", "NOT_ACCESSIBLE")]
    assert m.pair(10) == UNDELEGATED


def test_ex_access_toggle(system):
    tf = system.tf
    tf.log_rmi("rmi_granule_delegate", 10)
    tf.smc_delegate(10)
    with pytest.raises(Denied):
        tf.smc_2gpt_ex_access(10, True)     # only from shared
    tf.log_rmi("rmi_rtt_map_unprotected", 10, 1)
    tf.smc_2gpt_ns_share(10, 1)
    tf.smc_2gpt_ex_access(10, True)
    assert system.machine.pair(10) == EXCLUSIVE
    with pytest.raises(Denied):
        tf.smc_2gpt_ex_access(10, True)
    tf.smc_2gpt_ex_access(10, False)
    assert system.machine.pair(10) == SHARED


def test_every_transition_flushes(system):
    before = system.trace.counters.as_dict()
    flushes = len(system.trace.of_kind(EventKind.TLB_FLUSH))
    system.hyp.delegate(10)
    assert len(system.trace.of_kind(EventKind.TLB_FLUSH)) == flushes + 1
    assert system.trace.counters.smcs == before["smcs"] + 1


OPS = st.lists(st.tuples(st.sampled_from(["delegate", "undelegate", "rogue_delegate",
                                          "rogue_undelegate", "write"]),
                         st.integers(0, 63)), max_size=40)


@settings(max_examples=60, deadline=None)
@given(ops=OPS)
def test_random_calls_stay_legal(ops):
    s = System(Layout.parse(SMALL_LAYOUT))
    static = {g: s.machine.pair(g) for g in range(64) if not s.tf.dynamic[g]}
    for op, g in ops:
        try:
            if op == "delegate":
                s.rmi("rmi_granule_delegate", granule=g)
            elif op == "undelegate":
                s.rmi("rmi_granule_undelegate", granule=g)
            elif op == "write":
                s.host_write(g * 4096, b"\xff")
            else:
                s.rogue_smc(op.split("_")[1], g)
        except Exception as exc:
            assert exc.__class__.__module__ == "ccasim.errors"
        for h in range(64):
            pair = s.machine.pair(h)
            if s.tf.dynamic[h]:
                assert pair in (UNDELEGATED, DELEGATED)
            else:
                assert pair == static[h]
    assert not s.tf.pending
