"""
One-time passwords from a sandboxed service
============================================

An Android-style app hands a secret to a service running in its own
confidential VM, then asks it for codes. The host relays every request
through a shared mailbox but cannot read the secret, and while the service
is working on a request it takes the mailbox away from the host too.
"""

# %%
# Boot a machine and launch the service
# -------------------------------------

from pathlib import Path

from ccasim import EventKind, Manifest, System

here = Path(__file__).parent
system = System()
manifest = Manifest.load(str(here / "otp.manifest"))
rid, first_exit = system.hyp.launch(manifest)
print("service realm", rid, "stopped at", first_exit)
print("measurement", system.rmm.realm(rid).measurement.hex())

# %%
# Register a secret and ask for three codes
# -----------------------------------------

system.app.otp_register(rid, b"12345678901234567890")
codes = [system.app.otp(rid) for _ in range(3)]
print("codes", codes)

# %%
# What the host saw
# -----------------
# Each request shows up as a pair of exclusive-access calls from the guest,
# one switching the mailbox to guest-only and one handing it back.

for ev in system.trace.of_kind(EventKind.RSI, "rsi_ex_access")[-6:]:
    print(ev.step, ev.name, "enable" if ev.args["enable"] else "release")

# %%
# The secret lives in private pages, which the host cannot touch
# ---------------------------------------------------------------

from ccasim.errors import GranuleProtectionFault  # noqa: E402

state_granule = system.hyp.sbs[rid].data[(manifest.memory_pages - 1) * 4096]
try:
    system.host_read(state_granule * 4096, 32)
except GranuleProtectionFault as exc:
    print("host read blocked:", exc)

print()
print(system.trace.counters.format())
