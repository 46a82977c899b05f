from hypothesis import given, strategies as st

from ccasim.trace import CounterReport, Event, EventKind, EventTrace

scalar = st.one_of(st.integers(-2**40, 2**40), st.text(max_size=8), st.booleans(), st.none())
names = st.text(alphabet=st.characters(blacklist_characters="\t\n\r",
                                       blacklist_categories=("Cs",)), min_size=1, max_size=12)


@given(step=st.integers(0, 10**9), core=st.integers(-1, 8), kind=st.sampled_from(list(EventKind)),
       name=names, args=st.dictionaries(st.text(max_size=6), scalar, max_size=4), outcome=names)
def test_line_roundtrip(step, core, kind, name, args, outcome):
    ev = Event(step, core, kind, name, args, outcome)
    assert Event.from_line(ev.to_line()) == ev
    assert "\n" not in ev.to_line()


def test_counters_from_lines_match_online(system, otp_manifest):
    rid, _ = system.hyp.launch(otp_manifest)
    system.app.otp_register(rid, b"k")
    system.app.otp(rid)
    online = system.trace.counters
    assert CounterReport.from_lines(system.trace.lines()) == online
    # every RMI crosses root twice on the way in and out
    assert online.context_switches >= 4 * online.rmis
    assert online.rsis >= 4


def test_steps_strictly_increase(system, add_manifest):
    system.hyp.launch(add_manifest)
    steps = [e.step for e in system.trace.events]
    assert steps == list(range(steps[0], steps[0] + len(steps)))


def test_sink_and_keep(tmp_path):
    path = tmp_path / "t.log"
    with open(path, "w") as fh:
        tr = EventTrace(start_step=5, sink=fh, keep=False)
        tr.emit(EventKind.NOTE, "hello", x=1)
    assert not tr.events
    assert path.read_text() == '5\t-1\tNote\thello\t{"x":1}\tok\n'
    assert tr.counters.is_empty()
