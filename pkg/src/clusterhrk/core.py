"""Data model, OLS fit and the cluster aggregates consumed by every estimator.

The cluster indicator matrix ``B`` (n x C) and the selection matrices ``G_c``
are never formed; everything that multiplies them is a grouped sum over the
cluster partition.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Hashable, Sequence

import numpy as np
from scipy import linalg

from .errors import DataError, EmptyCluster, RankDeficient

__all__ = [
    "ClusteredDataset",
    "ClusterDesign",
    "OlsFit",
    "ScalarStats",
    "fit_ols",
    "scalar_stats",
    "labels_to_index",
]

RANK_TOL = 1e-10


def labels_to_index(labels: Sequence[Hashable]) -> tuple[np.ndarray, list]:
    """Map arbitrary cluster labels to 0..C-1 in order of first appearance.

    Returns the integer index array and the list of distinct labels, so that
    ``uniques[idx[i]] == labels[i]``.
    """
    lookup: dict = {}
    idx = np.empty(len(labels), dtype=np.intp)
    for i, lab in enumerate(labels):
        idx[i] = lookup.setdefault(lab, len(lookup))
    return idx, list(lookup)


def _check_partition(cluster_of: np.ndarray, n: int) -> int:
    if cluster_of.ndim != 1 or cluster_of.shape[0] != n:
        raise DataError(f"cluster_of must have length {n}")
    if n == 0:
        raise DataError("empty dataset")
    if cluster_of.min() < 0:
        raise DataError("cluster indices must be nonnegative")
    n_clusters = int(cluster_of.max()) + 1
    counts = np.bincount(cluster_of, minlength=n_clusters)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0)
        raise EmptyCluster(
            f"cluster indices must be contiguous 0..C-1; empty clusters {missing.tolist()}"
        )
    return n_clusters


@dataclass(frozen=True)
class ClusteredDataset:
    """Outcome, regressors and a partition of the observations into clusters.

    Parameters
    ----------
    y : ndarray
        Outcome vector of length n.
    X : ndarray
        n by k regressor matrix. An intercept, if wanted, is an ordinary column.
    cluster_of : ndarray
        Integer cluster index in 0..C-1 for every observation.
    """

    y: np.ndarray
    X: np.ndarray
    cluster_of: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        cl = np.asarray(self.cluster_of)
        if not np.issubdtype(cl.dtype, np.integer):
            raise DataError("cluster_of must be integer; use from_labels for arbitrary labels")
        cl = cl.astype(np.intp)
        if y.ndim != 1 or X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DataError(f"shape mismatch: y {y.shape}, X {X.shape}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise DataError("y and X must be finite")
        _check_partition(cl, y.shape[0])
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "cluster_of", cl)

    @classmethod
    def from_labels(cls, y, X, labels) -> "ClusteredDataset":
        idx, _ = labels_to_index(list(labels))
        return cls(y, X, idx)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_of.max()) + 1

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.n_clusters)


@dataclass(frozen=True)
class ScalarStats:
    """Trace statistics of the regressors relative to the cluster structure.

    ``s = tr (X'X)^{-1} X~'X~``, ``s_dot = tr [(X'X)^{-1} X~'X~]^2``,
    ``s_breve = tr (X'X)^{-1} X~' diag(n_c) X~``, ``s_c = tr (X'X)^{-1} X_c'X_c``
    and ``s_tilde_c = x~_c' (X'X)^{-1} x~_c``.
    """

    s: float
    s_dot: float
    s_breve: float
    s_c: np.ndarray
    s_tilde_c: np.ndarray


class ClusterDesign:
    """Regressor matrix plus cluster partition, with cached aggregates.

    Everything here depends on ``X`` and the clustering only, never on ``y``.
    A design is built once and then reused for any number of outcome vectors,
    which is what the Monte Carlo loop relies on. Attributes are computed
    lazily and never change afterwards.
    """

    def __init__(self, X, cluster_of):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        cl = np.asarray(cluster_of, dtype=np.intp)
        n, k = X.shape
        self.n_clusters = _check_partition(cl, n)
        if n <= k:
            raise RankDeficient(f"need n > k, got n={n}, k={k}")
        self.X = X
        self.cluster_of = cl
        self.n, self.k = n, k
        self.sizes = np.bincount(cl, minlength=self.n_clusters)
        if np.all(cl[1:] >= cl[:-1]):
            self._order = None
        else:
            self._order = np.argsort(cl, kind="stable")
        self._starts = np.concatenate(([0], np.cumsum(self.sizes)[:-1]))

        gram = X.T @ X
        eig = np.linalg.eigvalsh(gram)
        if eig[0] <= RANK_TOL * np.max(np.diag(gram)):
            raise RankDeficient(
                f"X'X is singular to tolerance (min eigenvalue {eig[0]:.3g})"
            )
        self.gram = gram
        self._chol = linalg.cho_factor(gram)
        ginv = linalg.cho_solve(self._chol, np.eye(k))
        self.gram_inv = 0.5 * (ginv + ginv.T)

    @classmethod
    def from_dataset(cls, data: ClusteredDataset) -> "ClusterDesign":
        return cls(data.X, data.cluster_of)

    # grouped sums -------------------------------------------------------
    def cluster_sum(self, a: np.ndarray) -> np.ndarray:
        """Sum the rows of ``a`` within each cluster (the product ``B'a``)."""
        a = np.asarray(a)
        if self._order is not None:
            a = a[self._order]
        return np.add.reduceat(a, self._starts, axis=0)

    def expand(self, v: np.ndarray) -> np.ndarray:
        """Repeat cluster-level rows to observation level (the product ``B v``)."""
        return np.asarray(v)[self.cluster_of]

    @cached_property
    def members(self) -> list[np.ndarray]:
        """Observation indices of each cluster, in data order."""
        order = np.arange(self.n) if self._order is None else self._order
        return np.split(order, self._starts[1:])

    @cached_property
    def nddot(self) -> float:
        return float(np.sum(self.sizes.astype(float) ** 2))

    @cached_property
    def Xtil(self) -> np.ndarray:
        """C x k matrix of within-cluster column sums."""
        return self.cluster_sum(self.X)

    @cached_property
    def per_cluster_gram(self) -> np.ndarray:
        """Array of shape (C, k, k) holding ``X_c'X_c``."""
        outer = self.X[:, :, None] * self.X[:, None, :]
        return self.cluster_sum(outer)

    @cached_property
    def Xtil_gram(self) -> np.ndarray:
        return self.Xtil.T @ self.Xtil

    @cached_property
    def stats(self) -> ScalarStats:
        G = self.gram_inv
        Xt = self.Xtil
        GXX = G @ self.Xtil_gram
        s = float(np.trace(GXX))
        s_dot = float(np.sum(GXX * GXX.T))
        s_breve = float(np.trace(G @ (Xt.T * self.sizes) @ Xt))
        s_c = np.einsum("ij,cji->c", G, self.per_cluster_gram)
        s_tilde_c = np.einsum("ci,ij,cj->c", Xt, G, Xt)
        return ScalarStats(s, s_dot, s_breve, s_c, s_tilde_c)

    def fit(self, y) -> "OlsFit":
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n,):
            raise DataError(f"y must have shape ({self.n},)")
        beta = linalg.cho_solve(self._chol, self.X.T @ y)
        resid = y - self.X @ beta
        return OlsFit(self, y, beta, resid)


@dataclass(frozen=True)
class OlsFit:
    """OLS coefficients and residuals together with their cluster aggregates.

    Residual-dependent aggregates (cluster sums, per-cluster scores) are
    computed on first access; regressor-only quantities are delegated to
    the owning :class:`ClusterDesign`.
    """

    design: ClusterDesign
    y: np.ndarray
    beta_hat: np.ndarray
    resid: np.ndarray

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def k(self) -> int:
        return self.design.k

    @property
    def n_clusters(self) -> int:
        return self.design.n_clusters

    @property
    def gram(self) -> np.ndarray:
        return self.design.gram

    @property
    def gram_inv(self) -> np.ndarray:
        return self.design.gram_inv

    @property
    def Xtil(self) -> np.ndarray:
        return self.design.Xtil

    @property
    def per_cluster_gram(self) -> np.ndarray:
        return self.design.per_cluster_gram

    @cached_property
    def resid_cluster_sum(self) -> np.ndarray:
        """``B'e``: residual sum within each cluster."""
        return self.design.cluster_sum(self.resid)

    @cached_property
    def rss(self) -> float:
        return float(self.resid @ self.resid)

    @cached_property
    def rss_cluster(self) -> float:
        return float(self.resid_cluster_sum @ self.resid_cluster_sum)

    @cached_property
    def cluster_rss(self) -> np.ndarray:
        """Per-cluster residual sum of squares ``e_c'e_c``."""
        return self.design.cluster_sum(self.resid**2)

    @property
    def cluster_sum_sq(self) -> np.ndarray:
        """Per-cluster squared residual sums."""
        return self.resid_cluster_sum**2

    @cached_property
    def cluster_scores(self) -> np.ndarray:
        """C x k matrix with rows ``X_c'e_c``."""
        return self.design.cluster_sum(self.design.X * self.resid[:, None])


def fit_ols(data: ClusteredDataset, design: ClusterDesign | None = None) -> OlsFit:
    """Least-squares fit of ``data.y`` on ``data.X``.

    Raises
    ------
    RankDeficient
        If ``X'X`` has an eigenvalue below ``1e-10`` times its largest
        diagonal entry, or ``n <= k``.
    EmptyCluster
        If some index in 0..C-1 has no observations.
    """
    if design is None:
        design = ClusterDesign.from_dataset(data)
    return design.fit(data.y)


def scalar_stats(fit: OlsFit) -> ScalarStats:
    return fit.design.stats
