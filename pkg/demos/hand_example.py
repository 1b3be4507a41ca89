"""Two clusters of two, intercept only: every estimator on one tiny data set.

With y = (1, 1, -1, -1) the residuals are perfectly correlated within each
cluster, so the cluster sums carry all the signal.
"""
import numpy as np

from clusterhrk import ClusterDesign, estimate, lz1_stata, plugin_re, plugin_unrestricted

fit = ClusterDesign(np.ones((4, 1)), [0, 0, 1, 1]).fit(np.array([1.0, 1.0, -1.0, -1.0]))
print("residuals      ", fit.resid)
print("UV1            ", estimate(fit, "UV1").V[0, 0])
params, v = plugin_re(fit)
print(f"plug-in RE     {v.V[0, 0]:.4f}  (sigma2 {params.sigma2_hat:.3f}, tau2 {params.tau2_hat:.3f})")
print("unrestricted   ", plugin_unrestricted(fit).V[0, 0])
print("STATA          ", lz1_stata(fit).V[0, 0])

# Same layout, residuals that cancel inside each cluster: UV1 returns zero.
flat = ClusterDesign(np.ones((4, 1)), [0, 0, 1, 1]).fit(np.array([1.0, -1.0, 0.0, 0.0]))
print("UV1, cancelling", round(estimate(flat, "UV1").V[0, 0], 12))
