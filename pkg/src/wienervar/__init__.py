"""Monte-Carlo toolkit for variational representations on Wiener space."""
from .paths import (CameronMartinPath, RngStream, SamplePath, TimeGrid, cm_norm_sq, ito_integral,
                    make_grid, pi_tau, sample_brownian, set_threads)
from .stats import Estimate, mean_se, ratio_se

__version__ = "0.1.0"
