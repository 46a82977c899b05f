import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccasim.errors import AddressOutOfRange, GranuleProtectionFault
from ccasim.memory import Access, GptId, Machine, PasValue, World, gpt_for, permits

R, N, S, ROOT, NA, ALL = "realm", "normal", "secure", "root", "na", "all"

# Written out by hand: which world may touch which PAS.
ALLOWED = {
    "ROOT": {ROOT, R, N, S, NA, ALL},
    "REALM": {R, ALL},
    "NORMAL": {N, ALL},
    "SECURE": {S, ALL},
}
PAS_NAME = {PasValue.ROOT: ROOT, PasValue.REALM: R, PasValue.NORMAL: N,
            PasValue.SECURE: S, PasValue.NOT_ACCESSIBLE: NA, PasValue.ALL_ACCESSIBLE: ALL}
# Normal cores use the first table, realm and secure cores the second.
TABLE_OF = {"NORMAL": 0, "REALM": 1, "SECURE": 1}


def test_permits_matches_hand_table():
    for world in World:
        for pas in PasValue:
            assert permits(world, pas) == (PAS_NAME[pas] in ALLOWED[world.name])


def test_gpt_binding():
    assert gpt_for(World.NORMAL) is GptId.N
    assert gpt_for(World.REALM) is GptId.RS
    assert gpt_for(World.SECURE) is GptId.RS
    assert gpt_for(World.ROOT) is None


pas_values = st.sampled_from(list(PasValue))


@settings(max_examples=300, deadline=None)
@given(n_row=st.lists(pas_values, min_size=4, max_size=4),
       rs_row=st.lists(pas_values, min_size=4, max_size=4),
       world=st.sampled_from(list(World)),
       granule=st.integers(0, 3),
       access=st.sampled_from(list(Access)))
def test_gpc_decision_matches_oracle(n_row, rs_row, world, granule, access):
    m = Machine(4, n_cores=1)
    m.gpt[0] = n_row
    m.gpt[1] = rs_row
    m.context_switch(0, world)
    if world is World.ROOT:
        expected = True
    else:
        row = n_row if TABLE_OF[world.name] == 0 else rs_row
        expected = PAS_NAME[row[granule]] in ALLOWED[world.name]
    try:
        if access is Access.READ:
            m.load(0, granule * m.granule_size, 8)
        elif access is Access.WRITE:
            m.store(0, granule * m.granule_size, b"x")
        else:
            m.fetch(0, granule * m.granule_size)
        got = True
    except GranuleProtectionFault:
        got = False
    assert got == expected


def test_stale_tlb_until_flush():
    m = Machine(2, n_cores=2)
    m.gpt[:] = PasValue.NORMAL
    m.load(0, 0, 4)                      # fills core 0's cache
    m.gpt[GptId.N, 0] = PasValue.REALM   # no flush
    m.load(0, 0, 4)                      # stale entry still allows it
    with pytest.raises(GranuleProtectionFault):
        m.load(1, 0, 4)                  # a cold core sees the new value
    m.flush_all_gpc_tlbs()
    with pytest.raises(GranuleProtectionFault):
        m.load(0, 0, 4)


def test_context_switch_clears_tlb():
    m = Machine(1, n_cores=1)
    m.gpt[:] = PasValue.NORMAL
    m.load(0, 0, 1)
    assert m.cores[0].tlb
    m.context_switch(0, World.REALM)
    assert not m.cores[0].tlb
    assert m.cores[0].active_gpt is GptId.RS


def test_faulting_store_leaves_memory_untouched():
    m = Machine(2, n_cores=1)
    m.gpt[:, 0] = PasValue.NORMAL
    m.gpt[:, 1] = PasValue.SECURE
    with pytest.raises(GranuleProtectionFault):
        m.store(0, m.granule_size - 2, b"abcd")   # straddles into granule 1
    assert not m.content.any()


def test_store_load_roundtrip_across_granules():
    m = Machine(2, n_cores=1)
    m.gpt[:] = PasValue.NORMAL
    m.store(0, 4090, b"0123456789")
    assert m.load(0, 4090, 10) == b"0123456789"
    assert m.raw_read(1, 0, 4) == b"6789"


def test_out_of_range_granule():
    m = Machine(2, n_cores=1)
    with pytest.raises(AddressOutOfRange):
        m.pair(2)
    with pytest.raises(AddressOutOfRange):
        m.load(0, 2 * m.granule_size, 1)


def test_gpf_is_traced():
    m = Machine(1, n_cores=1)
    m.gpt[:] = PasValue.SECURE
    with pytest.raises(GranuleProtectionFault):
        m.load(0, 0, 1)
    assert m.trace.counters.gpfs == 1


def test_scrub_and_is_zero():
    m = Machine(1, n_cores=1)
    m.raw_write(0, b"\x01\x02")
    assert not m.is_zero(0)
    m.scrub(0)
    assert m.is_zero(0)
    assert np.count_nonzero(m.content) == 0
