"""
How a granule moves between the two tables
==========================================

Every normal-world granule has one entry in the table the normal world's
cores use and one in the table the realm and secure cores use. This walks a
single granule through delegation, sharing and exclusive access, printing
both entries and what each world may do at every step.
"""

from ccasim import Layout, PasValue, System, World
from ccasim.adversary.explore import explore
from ccasim.memory import permits

system = System(Layout.parse("granules 16\nroot 0\nrealm 1\nnormal 2-13\nsecure 14-15\n"))
g = 5
tf = system.tf


def show(label):
    n, rs = system.machine.pair(g)
    who = [w.name.lower() for w, pas in ((World.NORMAL, n), (World.REALM, rs),
                                        (World.SECURE, rs)) if permits(w, pas)]
    print(f"{label:<12} N={n.name:<15} RS={rs.name:<15} accessible by: {', '.join(who) or '-'}")


show("boot")
tf.log_rmi("rmi_granule_delegate", g)
tf.smc_delegate(g)
show("delegated")
tf.log_rmi("rmi_rtt_map_unprotected", g, 1)
tf.smc_2gpt_ns_share(g, 1)
show("shared")
tf.smc_2gpt_ex_access(g, True)
show("exclusive")
tf.smc_2gpt_ex_access(g, False)
show("shared")
tf.log_rmi("rmi_granule_undelegate", g, 1)
tf.smc_undelegate(g, 1)
show("returned")

# %%
# All reachable combinations on a four-granule machine
# ----------------------------------------------------

res = explore(n_granules=4, depth=6)
print()
print("configurations per depth:", res.per_depth)
print("pairs seen:", res.pair_names())
assert PasValue.SECURE not in {p for pair in res.pairs for p in pair}
