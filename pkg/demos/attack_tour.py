"""
Attack tour
===========

Runs every built-in attack scenario and the seeded fuzzer, then shows that
switching off a single protection is noticed.
"""

from ccasim.adversary.fuzz import FuzzConfig, fuzz
from ccasim.adversary.scenarios import catalog, run_attacks

for verdict in run_attacks():
    expected = catalog()[verdict.name].expected
    print(f"{verdict}\t{expected}")

report = fuzz(FuzzConfig(seed=1, steps=2000))
print()
print(report.format().split("# coverage")[0])

broken = fuzz(FuzzConfig(seed=1, steps=2000, mutation="skip_flush", stop_on_violation=True))
print("with TLB flushes disabled:")
print(broken.violations[0].to_line())
