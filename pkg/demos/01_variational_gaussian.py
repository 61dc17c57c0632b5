"""Variational formula for f = W(1) on the plain Wiener measure.

-log E exp(-W(1)) = -1/2, and the infimum over drifts of E[f(W + u) + |u|^2/2]
is attained by the constant drift u = -1. We check both numbers, then let the
optimizer find the drift from a zero start.
"""
import numpy as np

from wienervar import RngStream, TimeGrid
from wienervar import functionals as F
from wienervar import models as M
from wienervar import policies as P
from wienervar import stopping as S
from wienervar.variational import OptConfig, direct_value, duality_gap, objective, optimize

grid = TimeGrid(64)
wiener = M.Wiener()
f = F.linear_terminal(1.0)
n = 100_000

d = direct_value(wiener, f, None, RngStream(1), grid, n).scalar
print(f"direct value  {d.value:+.4f} +- {d.se:.4f}   (exact -0.5)")

# the plug-in optimiser
j = objective(wiener, f, P.Deterministic.constant(grid, -1.0), None, RngStream(2), grid, n).scalar
print(f"J(u = -1)     {j.value:+.4f} +- {j.se:.4f}")

# doing nothing costs the full 1/2
gap = duality_gap(wiener, f, P.Zero(), None, RngStream(3), grid, n)
print(f"gap at u = 0  {gap.gap[0]:.4f} +- {gap.se[0]:.4f}")

# learn the drift with a small feature basis
template = P.MarkovFeedback.zeros(P.FeatureBasis(1, 1, 4))
res = optimize(wiener, f, template, None, OptConfig(iterations=200, batch=512, n_val=20_000, val_every=50),
               RngStream(4), grid)
print(f"optimised J   {res.best_j.value:+.4f} +- {res.best_j.se:.4f} after {len(res.trace)} steps")

# the conditional version: given W(1/2) = x the value is x - 1/4, so each
# cell should sit near its midpoint minus a quarter (cells are bins in x)
tau = S.Deterministic(0.5)
cond = direct_value(wiener, f, tau, RngStream(5), grid, n)
for c in np.flatnonzero(cond.valid):
    lo, hi = cond.lo[c, 1], cond.hi[c, 1]
    print(f"  x in [{lo:+.2f}, {hi:+.2f}]  value {cond.estimate[c]:+.3f} +- {cond.se[c]:.3f}")
