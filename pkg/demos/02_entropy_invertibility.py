"""Entropy of a shifted Wiener measure against its drift energy.

For an adapted drift u the law of W + u has relative entropy at most
E|u|^2/2, with equality exactly when the shift can be undone from its
output. Delayed feedback is always undoable, a fold is not.
"""
import numpy as np

from wienervar import RngStream, TimeGrid
from wienervar import models as M
from wienervar import policies as P
from wienervar.entropy import anticipative_fold, grid_density_oracle, increment_drift, relative_entropy

grid = TimeGrid(64)

# Monte Carlo: a delayed feedback drift, the gap should be statistically zero
u = P.Delayed(1, P.StateFeedback(lambda t, x: np.tanh(2 * x) - 0.5))
rep = relative_entropy(M.Wiener(), u, None, RngStream(7), grid, 100_000)
print(f"delayed feedback: entropy {rep.entropy_est:.4f}  half energy {rep.half_energy:.4f}"
      f"  gap {rep.gap:+.4f} +- {rep.se['gap']:.4f}")

# exact quadrature on a three-step grid (with one step of delay a two-step
# grid would only ever read W(0) = 0)
g3 = TimeGrid(3)
ora = grid_density_oracle(increment_drift(P.Delayed(1, P.StateFeedback(lambda t, x: np.tanh(2 * x))), g3), 3,
                          n_nodes=42)
print(f"oracle, invertible:  entropy {ora.entropy:.5f}  half energy {ora.half_energy:.5f}"
      f"  injective={ora.injective}")

# the fold sends x and -x to the same point, so information is lost
fold = grid_density_oracle(anticipative_fold(), 2, n_nodes=42)
print(f"oracle, fold:        entropy {fold.entropy:.5f}  half energy {fold.half_energy:.5f}"
      f"  injective={fold.injective}  ({fold.message})")
print(f"strict margin {fold.gap:.4f}, quadrature error {fold.quad_error:.1e}")
