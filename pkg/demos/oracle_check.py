"""Exact evidence on a 3x3 lattice: the three chains against brute-force enumeration.

With zero-variance evidence every sampler should reproduce the enumerated
posterior over all 512 configurations.
"""

import numpy as np

from pmpotts.lattice import build_lattice
from pmpotts.models.toy import ToyFamily
from pmpotts.potts import PottsParams, enumerate_exact
from pmpotts.samplers import nwma_run, nwpm_run, nwse_run
from pmpotts.smc import ExactEvidence

g = build_lattice(3, 3)
fam = ToyFamily()
truth = np.array([0, 0, 1, 0, 1, 1, 0, 1, 1])
y = fam.simulate(truth, np.random.default_rng(0))
lz = fam.exact_log_marginal_matrix(y)
J = 0.8  # per edge
_, probs, _ = enumerate_exact(g, PottsParams(J, (0, 1)), lz)

init = np.zeros(9, dtype=np.int64)
n = 20_000
# With exact evidence the three chains coincide given one stream, so each gets its own seed.
for seed, (name, run) in enumerate((("nwpm", lambda r: nwpm_run(ExactEvidence(lz), g, J, n, init, r, 2)),
                  ("nwse", lambda r: nwse_run(ExactEvidence(lz), g, J, n, init, r, 2)),
                  ("nwma", lambda r: nwma_run(ExactEvidence(lz), g, J, n, 10, init, r, 2))), start=1):
    fields = run(np.random.default_rng(seed)).fields()
    idx = fields @ (2 ** np.arange(8, -1, -1))
    freq = np.bincount(idx, minlength=512) / n
    print(f"{name}: total variation to the exact posterior {0.5 * np.abs(freq - probs).sum():.4f}")
