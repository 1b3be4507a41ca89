"""Placebo policy on resampled clusters of a synthetic data set.

The outcome has no policy effect, so every rejection is a false positive.
"""
import numpy as np

from clusterhrk import BySize, ClusteredDataset, resample_study

rng = np.random.default_rng(5)
sizes = rng.integers(20, 200, size=30)
cl = np.repeat(np.arange(30), sizes)
n = cl.size
x = rng.normal(size=n) + rng.normal(size=30)[cl]
y = 1.0 + 0.5 * x + rng.normal(size=n) + 0.6 * rng.normal(size=30)[cl]
data = ClusteredDataset(y, np.column_stack([np.ones(n), x]), cl)

for treated in (1, 3, 7):
    rows = resample_study(
        data,
        BySize(top=7, bottom=7),
        treated_count=treated,
        replications=300,
        methods=("STATA", "UV1(RV1)", "UV3(RV1)"),
    )
    line = ", ".join(
        f"{r['method']} {r['rejection_rate']:.3f}" if r["n_exists"] else f"{r['method']} --" for r in rows
    )
    print(f"{treated} treated of 14: {line}")
