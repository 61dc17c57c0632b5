"""Prekopa-Leindler on path space with conditioning.

Take f_b, f_c quadratic in W(1) and a = the s-interpolation of b and c. If
a(x + y) beats b^s c^(1-s) along every pair of shifts then, conditionally on
W at a stopping time, E[a] dominates E[b]^s E[c]^(1-s). We check the
hypothesis on random triples and the conclusion cell by cell.
"""
import numpy as np

from wienervar import RngStream, TimeGrid
from wienervar import stopping as S
from wienervar.prekopa import check_conclusion, check_hypothesis, quadratic_family, unchecked_quadratic

grid = TimeGrid(64)
tau = S.Deterministic(0.5)

for q in (0.3, 1.0, 5.0):
    inst = quadratic_family(q, 0.0, 0.5, tau, 0.5, -0.5)
    hyp = check_hypothesis(inst, 2000, RngStream(21))
    con = check_conclusion(inst, RngStream(22), grid, 50_000)
    print(f"q = {q:3.1f}: hypothesis margin {hyp.min_margin:+.2e}, "
          f"slack min z {con.min_z():6.1f} over {con.valid.sum()} cells")

# q (x + h)^2 + h^2/2 stays convex down to q = -1/2
for q in (-0.3, -0.8):
    hyp = check_hypothesis(unchecked_quadratic(q), 2000, RngStream(23))
    print(f"q = {q:+.1f}: {hyp.violations} violations out of {hyp.n_triples}")

# slack per cell for the conditional conclusion
con = check_conclusion(quadratic_family(1.0, 0.0, 0.5, tau, 0.5, -0.5), RngStream(24), grid, 50_000)
for c in np.flatnonzero(con.valid):
    print(f"  x in [{con.lo[c, 1]:+.2f}, {con.hi[c, 1]:+.2f}]  slack {con.slack[c]:.4f} +- {con.se[c]:.4f}")
