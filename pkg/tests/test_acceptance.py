"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import random
import subprocess
import sys
import time

import pytest

from ccasim import Layout, System
from ccasim.adversary.explore import explore
from ccasim.adversary.fuzz import FuzzConfig, fuzz
from ccasim.adversary.scenarios import AttackScenario, catalog, run_attacks, run_scenario
from ccasim.hooks import MUTATIONS
from ccasim.manifest import PAGE, Manifest
from ccasim.memory import PasValue as P
from ccasim.realm_monitor import ALLOWED_DEVICES, ExitReason
from ccasim.trace import EventKind

import oracles

REQUIRED_ATTACKS = ("boomerang", "secure_read_normal", "secure_read_shared", "split_view",
                    "toctou_exclusive", "code_injection", "virtqueue_escape", "forged_mmio",
                    "disallowed_device", "device_tamper")


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        assert ok, detail
    return emit


def test_1_attack_suite(report):
    t0 = time.perf_counter()
    verdicts = run_attacks()
    elapsed = time.perf_counter() - t0
    names = {v.name for v in verdicts}
    failed = [str(v) for v in verdicts if not v.passed]
    ok = (not failed and elapsed < 10.0 and len(verdicts) >= 8
          and set(REQUIRED_ATTACKS) <= names)
    report(1, "attack suite", ok,
           f"{len(verdicts)} scenarios, {len(failed)} failed, {elapsed:.2f}s"
           + (f"; {failed}" if failed else ""))


def test_2_granule_state_machine(report):
    res = explore(n_granules=4, depth=6)
    legal = {(P.NORMAL, P.NOT_ACCESSIBLE), (P.REALM, P.REALM),
             (P.NORMAL, P.REALM), (P.NOT_ACCESSIBLE, P.REALM)}
    report(2, "granule state machine", res.pairs == legal,
           f"{len(res.configurations)} configurations, pairs {res.pair_names()}")


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_3_fuzz_invariants(report, seed):
    rep = fuzz(FuzzConfig(seed=seed, steps=10_000, cores=2))
    ok = rep.ok and rep.steps_run == 10_000 and rep.elapsed < 60.0
    first = rep.violations[0].to_line() if rep.violations else ""
    report(3, f"fuzz invariants seed {seed}", ok,
           f"{len(rep.violations)} violations in {rep.steps_run} steps, "
           f"{rep.elapsed:.1f}s" + (f"; first: {first}" if first else ""))


def _attack_failures(mutation):
    prefix = AttackScenario.parse(f'config hooks("{mutation}")\n').steps
    failed = []
    for name, sc in sorted(catalog().items()):
        if not run_scenario(AttackScenario(sc.name, prefix + sc.steps)).passed:
            failed.append(name)
    return failed


@pytest.mark.parametrize("mutation", MUTATIONS)
def test_4_mutation_sensitivity(report, mutation):
    rep = fuzz(FuzzConfig(seed=1, steps=10_000, mutation=mutation, stop_on_violation=True))
    failed = _attack_failures(mutation)
    caught = bool(rep.violations) or bool(failed)
    where = (f"fuzz {rep.violations[0].invariant} at step {rep.violations[0].step}"
             if rep.violations else "fuzz silent")
    report(4, f"mutation {mutation}", caught, f"{where}; failing scenarios {failed}")


def _random_manifest(rng, i):
    devices = tuple(d for d in sorted(ALLOWED_DEVICES) if rng.random() < 0.4)
    script = rng.choice(["idle", "add_responder", "otp_responder", "virtio_driver"])
    shared = rng.randint(0 if script == "idle" else 1, 4)
    payload = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 3 * PAGE)))
    pages = max(2, -(-len(payload) // PAGE), rng.randint(1, 8))
    return Manifest(name=f"m{i}", memory_pages=pages, shared_pages=shared, devices=devices,
                    entry_script=script, payload=payload or None)


def test_5_lifecycle_fidelity(report):
    rng = random.Random(2024)
    s = System(Layout.simple())
    bad = []
    for i in range(100):
        m = _random_manifest(rng, i)
        rid, ex = s.hyp.launch(m)
        owned = list(s.hyp.sbs[rid].granules)
        if ex.reason is not ExitReason.PAUSE and m.entry_script != "idle":
            bad.append(f"{m.name}: launch exit {ex.reason.value}")
        # leave something behind in shared memory as the host
        for ipa in list(s.hyp.sbs[rid].shared)[:1]:
            s.host_write(s.hyp.shared_pa(rid, ipa) + 100, b"host-data")
        s.hyp.destroy_sbs(rid)
        for g in owned:
            if s.machine.pair(g) != (P.NORMAL, P.NOT_ACCESSIBLE):
                bad.append(f"{m.name}: granule {g} in {s.machine.pair(g)}")
            elif not s.machine.is_zero(g) or s.host_read(g * PAGE, PAGE) != bytes(PAGE):
                bad.append(f"{m.name}: granule {g} not zero")
    report(5, "lifecycle fidelity", not bad, f"100 manifests, {len(bad)} problems {bad[:3]}")


def _brackets(trace, start):
    rsis = [e for e in trace.of_kind(EventKind.RSI, "rsi_ex_access") if e.step >= start]
    return [e.args["enable"] for e in rsis]


def test_6_case_studies(report):
    rng = random.Random(6)
    s = System(Layout.simple())
    add_rid, _ = s.hyp.launch(Manifest.load(_data("manifests/add.manifest")))
    start = s.trace.next_step
    wrong = []
    for _ in range(100):
        a, b = rng.randint(-(2**62), 2**62), rng.randint(-(2**62), 2**62)
        if s.app.add(add_rid, a, b) != oracles.wrap_add(a, b):
            wrong.append((a, b))
    add_brackets = _brackets(s.trace, start)

    otp_rid, _ = s.hyp.launch(Manifest.load(_data("manifests/otp.manifest")))
    start = s.trace.next_step
    otp_wrong = []
    for secret in (b"12345678901234567890", bytes(rng.getrandbits(8) for _ in range(20))):
        s.app.otp_register(otp_rid, secret)
        for counter in range(5):
            got = s.app.otp(otp_rid)
            if got != oracles.hotp(secret, counter):
                otp_wrong.append((secret.hex(), counter, got))
    otp_brackets = _brackets(s.trace, start)

    ok = (not wrong and not otp_wrong
          and add_brackets == [True, False] * 100
          and otp_brackets == [True, False] * 12)
    report(6, "add and OTP services", ok,
           f"add {100 - len(wrong)}/100, otp {12 - len(otp_wrong)}/12 replies match, "
           f"brackets add={len(add_brackets) // 2} otp={len(otp_brackets) // 2}")


def _data(rel):
    from importlib import resources
    return str(resources.files("ccasim") / "data" / rel)


def _cli_run(workdir):
    cli = [sys.executable, "-m", "ccasim.cli"]
    common = ["--state", "s.bin", "--trace", "t.log"]
    for argv in (["boot"], ["launch", "otp.manifest"], ["scenario", "otp_request.scenario"],
                 ["attack", "all"], ["fuzz", "--seed", "11", "--steps", "1500"]):
        subprocess.run(cli + argv + common, cwd=workdir, check=True, capture_output=True)
    return (workdir / "t.log").read_bytes()


def test_7_determinism(report, tmp_path):
    runs = []
    for i in range(2):
        d = tmp_path / f"run{i}"
        d.mkdir()
        runs.append(_cli_run(d))
    ok = runs[0] == runs[1] and len(runs[0]) > 0
    lines = runs[0].count(b"\n")
    report(7, "determinism", ok, f"{lines} trace lines, identical={runs[0] == runs[1]}")
