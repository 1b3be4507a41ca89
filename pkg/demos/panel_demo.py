"""Unbiased panel covariance with an unrestricted within-unit Lambda."""
import numpy as np

from clusterhrk import PanelDataset, panel_fit, panel_plugin, panel_unbiased

rng = np.random.default_rng(3)
N, T = 40, 4
Lam = 0.5 * np.eye(T) + 0.5 * 0.8 ** np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
X = np.column_stack([np.ones(N * T), np.tile(np.arange(T), N), rng.normal(size=N * T)])
chol = np.linalg.cholesky(Lam)

draws_u, draws_p = [], []
for _ in range(500):
    e = (rng.standard_normal((N, T)) @ chol.T).ravel()
    fit = panel_fit(PanelDataset(X @ [1.0, 0.2, 0.0] + e, X, N, T))
    draws_u.append(panel_unbiased(fit)[0])
    draws_p.append(panel_plugin(fit)[0])

np.set_printoptions(precision=3, suppress=True)
print("true Lambda\n", Lam)
print("mean unbiased estimate\n", np.mean(draws_u, axis=0))
print("mean plug-in estimate (biased toward zero)\n", np.mean(draws_p, axis=0))
