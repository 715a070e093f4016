"""How var(log Z) shrinks with the number of particles on the toy model.

A common tuning target is a log-evidence variance of about one; the
variance falls roughly as 1/N.
"""

from pmpotts.experiment import preset, probe_variance

cfg = preset("toy-study2-desk")
for N, T, mean, var, se, R in probe_variance(cfg, "A", [(10, 20), (50, 20), (200, 20)], replicates=200):
    print(f"N={N:<4} T={T:<3} var(log Z) = {var:.5f} +/- {se:.5f}")
