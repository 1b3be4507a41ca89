"""Rejection rates under random effects with one to thirteen treated clusters.

Scaled down from the full design (n = 700, 2,000 replications) so it runs in
under a minute. Pass a replication count as the first argument for more.
"""
import sys
import time

from clusterhrk import SimulationConfig, run_study

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
cfg = SimulationConfig(
    n=700,
    replications=reps,
    methods=("STATA", "LZIK", "UV1(RV1)", "UV2(RV1)"),
    coefficients=("beta",),
).sweep()

t0 = time.perf_counter()
res = run_study(cfg)
print(f"{reps} replications per cell, {time.perf_counter() - t0:.1f}s\n")
print("C1  " + "".join(f"{m:>10}" for m in cfg.methods))
for c1 in cfg.treated:
    cells = []
    for m in cfg.methods:
        r = res.get(m, c1)
        cells.append(f"{r['size']:10.3f}" if r["n_exists"] else f"{'--':>10}")
    print(f"{c1:2d}  " + "".join(cells))
print("\n'--' marks estimators that do not exist for that treated count.")
