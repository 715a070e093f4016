"""Percent correct against the coupling constant on the 20x20 toy image.

A scaled-down coupling sweep: 3 replicates, chains of 50 sweeps.  Accuracy
rises from the independent level at J=0, peaks around J=0.4 and collapses
once the prior dominates the data.
"""

import tempfile

from pmpotts.experiment import preset, run_study

cfg = preset("toy-study1", J=[0.0, 0.2, 0.4, 0.8, 1.2, 2.0], replicates=3,
             samplers=[{"kind": "nwpm", "n": 50}])
with tempfile.TemporaryDirectory() as out:
    report = run_study(cfg, out)
for label, J, mean, sd, n in report.table():
    print(f"J={J:<4g} {mean:6.2f}% correct (sd {sd:.2f}, {n} replicates)")
