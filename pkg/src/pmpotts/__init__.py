"""Spatial Bayesian model selection on lattices.

Node-wise pseudo-marginal MCMC under a Potts prior, with annealed SMC
evidence estimates for each node and model order.
"""

from .lattice import LatticeGraph, RegionMask, build_lattice, default_mask, ground_truth_field, neighbors
from .potts import PottsParams, critical_coupling, enumerate_exact, full_conditional, gibbs_sweep, log_prior_unnorm

__version__ = "0.1.0"

__all__ = [
    "LatticeGraph", "RegionMask", "build_lattice", "default_mask", "ground_truth_field",
    "neighbors", "PottsParams", "critical_coupling", "enumerate_exact", "full_conditional",
    "gibbs_sweep", "log_prior_unnorm",
]
