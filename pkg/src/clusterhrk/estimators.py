"""Cluster-robust covariance estimators for the OLS coefficient vector.

Three exactly unbiased estimators (``UV1`` for homogeneous random effects,
``UV2`` for cluster-specific random effects, ``UV3`` for unrestricted
within-cluster covariance), the two usual benchmarks (``LZ1`` with the
Stata small-sample scalar and ``LZ2`` with the HC2 leverage adjustment),
and the plug-in variants that ignore the regressors when estimating the
error covariance.

Every estimator is quadratic in the residuals. The residual-independent
pieces (the small systems that are inverted) are cached on the
:class:`~clusterhrk.core.ClusterDesign`, so re-fitting many outcome vectors
on the same regressors is cheap.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import linalg

from .core import ClusterDesign, OlsFit, ScalarStats
from .errors import (
    AllSingletons,
    DegenerateLeverage,
    EstimatorUndefined,
    SingletonCluster,
    SingularOuter,
    SingularPhi,
    SingularPsi,
    SingularSc,
    TooFewClusters,
)

__all__ = [
    "Method",
    "Diagnostics",
    "VarianceEstimate",
    "ReParams",
    "uv1",
    "uv2",
    "uv3",
    "lz1_stata",
    "lz2_hc2",
    "plugin_re",
    "plugin_cluster_re",
    "plugin_unrestricted",
    "stata_factor",
    "hc2_root",
    "repair_psd",
    "estimate",
]

SINGULAR_TOL = 1e-12
LEVERAGE_FLOOR = 1e-10


class Method(str, enum.Enum):
    UV1 = "UV1"
    UV2 = "UV2"
    UV3 = "UV3"
    LZ1 = "LZ1"
    LZ2 = "LZ2"
    PLUGIN_RE = "PluginRE"
    PLUGIN_CLUSTER_RE = "PluginClusterRE"
    PLUGIN_UNRESTRICTED = "PluginUnrestricted"


@dataclass(frozen=True)
class Diagnostics:
    symmetry_residual: float
    min_eigenvalue: float
    negative_diagonal: bool
    psd_repaired: bool = False


@dataclass(frozen=True)
class VarianceEstimate:
    """A k x k covariance estimate of the OLS coefficients.

    The matrix is symmetric by construction; ``diagnostics`` reports the
    observed asymmetry and whether the estimate fails to be positive
    semi-definite. Negative entries are never clipped here; see
    :func:`repair_psd`.
    """

    V: np.ndarray
    method: Method
    diagnostics: Diagnostics

    @classmethod
    def build(cls, V: np.ndarray, method: Method) -> "VarianceEstimate":
        V = np.asarray(V, dtype=float)
        scale = np.max(np.abs(V))
        asym = float(np.max(np.abs(V - V.T)) / scale) if scale > 0 else 0.0
        eig = np.linalg.eigvalsh(0.5 * (V + V.T))
        diag = Diagnostics(
            symmetry_residual=asym,
            min_eigenvalue=float(eig[0]),
            negative_diagonal=bool(np.any(np.diag(V) < 0)),
        )
        return cls(V, Method(method), diag)

    def std_errors(self) -> np.ndarray:
        """Square roots of the diagonal; NaN where the diagonal is negative."""
        d = np.diag(self.V)
        with np.errstate(invalid="ignore"):
            return np.where(d >= 0, np.sqrt(np.abs(d)), np.nan)


@dataclass(frozen=True)
class ReParams:
    """Method-of-moments random-effects parameters (may be negative)."""

    sigma2_hat: float | np.ndarray
    tau2_hat: float | np.ndarray

    @property
    def any_negative(self) -> bool:
        return bool(np.any(np.asarray(self.sigma2_hat) < 0) or np.any(np.asarray(self.tau2_hat) < 0))


# ---------------------------------------------------------------------------
# helpers


def _cached(design: ClusterDesign, key: str, builder: Callable):
    """Memoize a residual-independent object (or its failure) on the design."""
    cache = design.__dict__.setdefault("_estimator_cache", {})
    if key not in cache:
        try:
            cache[key] = builder(design)
        except EstimatorUndefined as exc:
            cache[key] = exc
    hit = cache[key]
    if isinstance(hit, EstimatorUndefined):
        raise hit
    return hit


def _factor(A: np.ndarray, exc: type[EstimatorUndefined], what: str):
    """LU factor ``A`` after a relative singular-value check."""
    scale = np.max(np.abs(A))
    smin = np.linalg.svd(A, compute_uv=False)[-1]
    if scale == 0 or smin <= SINGULAR_TOL * scale:
        raise exc(f"{what} is singular (smallest singular value {smin:.3g}, max-norm {scale:.3g})")
    return linalg.lu_factor(A, check_finite=False)


def _sandwich(G: np.ndarray, meat: np.ndarray) -> np.ndarray:
    return G @ meat @ G


def _vec_to_matrix(v: np.ndarray, k: int) -> np.ndarray:
    return v.reshape((k, k), order="F")


# ---------------------------------------------------------------------------
# UV1: homogeneous random effects


@dataclass(frozen=True)
class _UV1System:
    psi: np.ndarray
    psi_lu: tuple
    G: np.ndarray  # (X'X)^{-1}
    GXXG: np.ndarray  # (X'X)^{-1} X~'X~ (X'X)^{-1}


def psi_matrix(design: ClusterDesign) -> np.ndarray:
    st = design.stats
    n, k = design.n, design.k
    return np.array(
        [
            [n - k, n - st.s],
            [n - st.s, design.nddot - 2.0 * st.s_breve + st.s_dot],
        ]
    )


def _build_uv1(design: ClusterDesign) -> _UV1System:
    psi = psi_matrix(design)
    lu = _factor(psi, SingularPsi, "Psi")
    G = design.gram_inv
    return _UV1System(psi, lu, G, G @ design.Xtil_gram @ G)


def uv1(fit: OlsFit, stats: ScalarStats | None = None) -> VarianceEstimate:
    """Unbiased estimator under ``Sigma = sigma^2 I + tau^2 BB'``.

    ``stats`` is accepted for symmetry with the other signatures; the
    design's cached statistics are used either way.
    """
    sysm = _cached(fit.design, "uv1", _build_uv1)
    theta = linalg.lu_solve(sysm.psi_lu, np.array([fit.rss, fit.rss_cluster]))
    V = theta[0] * sysm.G + theta[1] * sysm.GXXG
    return VarianceEstimate.build(V, Method.UV1)


# ---------------------------------------------------------------------------
# UV2: cluster-specific random effects


@dataclass(frozen=True)
class _UV2System:
    phi: np.ndarray
    phi_lu: tuple
    GZG: np.ndarray  # (C, k, k): (X'X)^{-1} X_c'X_c (X'X)^{-1}
    z: np.ndarray  # (C, k): (X'X)^{-1} x~_c


def phi_matrix(design: ClusterDesign) -> np.ndarray:
    G = design.gram_inv
    Z = design.per_cluster_gram
    Xt = design.Xtil
    st = design.stats
    nc = design.sizes.astype(float)
    H = np.einsum("ij,cjk->cik", G, Z)  # G Z_c
    z = Xt @ G
    a = np.einsum("cij,dji->cd", H, H)
    ell = np.einsum("dk,ckl,dl->cd", z, Z, z)
    q = (Xt @ G @ Xt.T) ** 2
    top_left = np.diag(nc - 2.0 * st.s_c) + a
    top_right = np.diag(nc - 2.0 * st.s_tilde_c) + ell
    bottom = np.diag(nc**2 - 2.0 * nc * st.s_tilde_c) + q
    return np.block([[top_left, top_right], [top_right.T, bottom]])


def _build_uv2(design: ClusterDesign) -> _UV2System:
    phi = phi_matrix(design)
    lu = _factor(phi, SingularPhi, "Phi")
    G = design.gram_inv
    GZG = np.einsum("ij,cjk,kl->cil", G, design.per_cluster_gram, G)
    return _UV2System(phi, lu, GZG, design.Xtil @ G)


def _uv2_params(fit: OlsFit) -> np.ndarray:
    sysm = _cached(fit.design, "uv2", _build_uv2)
    rhs = np.concatenate([fit.cluster_rss, fit.cluster_sum_sq])
    return linalg.lu_solve(sysm.phi_lu, rhs)


def uv2(fit: OlsFit, stats: ScalarStats | None = None) -> VarianceEstimate:
    """Unbiased estimator under cluster-specific ``sigma_c^2 I + tau_c^2 ii'``."""
    sysm = _cached(fit.design, "uv2", _build_uv2)
    theta = _uv2_params(fit)
    C = fit.n_clusters
    V = np.einsum("c,cij->ij", theta[:C], sysm.GZG) + np.einsum(
        "c,ci,cj->ij", theta[C:], sysm.z, sysm.z
    )
    return VarianceEstimate.build(V, Method.UV2)


# ---------------------------------------------------------------------------
# UV3: unrestricted within-cluster covariance


@dataclass(frozen=True)
class _UV3System:
    maps: np.ndarray  # (C, k^2, k^2): Omega^{-1} S_c^{-1}


def sc_matrices(design: ClusterDesign) -> np.ndarray:
    """``S_c = I - I (x) X_c'X_c G - X_c'X_c G (x) I`` for every cluster."""
    k = design.k
    eye = np.eye(k)
    K = np.einsum("cij,jk->cik", design.per_cluster_gram, design.gram_inv)
    return np.stack([np.eye(k * k) - np.kron(eye, Kc) - np.kron(Kc, eye) for Kc in K])


def _build_uv3(design: ClusterDesign) -> _UV3System:
    k = design.k
    S = sc_matrices(design)
    Sinv = np.empty_like(S)
    for c, Sc in enumerate(S):
        lu = _factor(Sc, SingularSc, f"S_c for cluster {c}")
        Sinv[c] = linalg.lu_solve(lu, np.eye(k * k))
    W = np.kron(design.gram, design.gram)
    Z = design.per_cluster_gram
    omega = W + sum(Sinv[c] @ np.kron(Z[c], Z[c]) for c in range(design.n_clusters))
    lu = _factor(omega, SingularOuter, "outer k^2 x k^2 system")
    maps = np.stack([linalg.lu_solve(lu, Sc_inv) for Sc_inv in Sinv])
    return _UV3System(maps)


def uv3(fit: OlsFit) -> VarianceEstimate:
    """Unbiased estimator under an arbitrary covariance within each cluster."""
    sysm = _cached(fit.design, "uv3", _build_uv3)
    u = fit.cluster_scores
    C, k = u.shape
    uu = (u[:, :, None] * u[:, None, :]).reshape(C, k * k)
    v = np.einsum("cab,cb->a", sysm.maps, uu)
    return VarianceEstimate.build(_vec_to_matrix(v, k), Method.UV3)


# ---------------------------------------------------------------------------
# Liang-Zeger benchmarks


def plugin_unrestricted(fit: OlsFit) -> VarianceEstimate:
    """``(X'X)^{-1} sum_c X_c'e_c e_c'X_c (X'X)^{-1}``, no small-sample factor."""
    u = fit.cluster_scores
    return VarianceEstimate.build(
        _sandwich(fit.gram_inv, u.T @ u), Method.PLUGIN_UNRESTRICTED
    )


def stata_factor(n_clusters: int, n: int, k: int) -> float:
    return (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - k))


def lz1_stata(fit: OlsFit) -> VarianceEstimate:
    C = fit.n_clusters
    if C < 2:
        raise TooFewClusters("LZ1 needs at least two clusters")
    V = stata_factor(C, fit.n, fit.k) * plugin_unrestricted(fit).V
    return VarianceEstimate.build(V, Method.LZ1)


@dataclass(frozen=True)
class _HC2System:
    # rows of (I - P_cc)^{-1/2} X_c, placed at the cluster's observation rows
    X_adj: np.ndarray


def _hc2_pieces(design: ClusterDesign, c: int):
    """Thin factorisation of ``P_cc = X_c (X'X)^{-1} X_c'``.

    Returns ``(U, mu)`` with orthonormal ``U`` such that
    ``P_cc = U diag(mu) U'``; the remaining eigenvalues of ``P_cc`` are zero.
    """
    Xc = design.X[design.members[c]]
    Q, R = np.linalg.qr(Xc)
    mu, Vr = np.linalg.eigh(R @ design.gram_inv @ R.T)
    return Q @ Vr, mu


def hc2_root(design: ClusterDesign, c: int, power: float = -0.5) -> np.ndarray:
    """Dense ``(I_c - P_cc)^power`` for cluster ``c`` (symmetric PSD root)."""
    U, mu = _hc2_pieces(design, c)
    lam = 1.0 - mu
    if power < 0 and lam.min() < LEVERAGE_FLOOR:
        raise DegenerateLeverage(f"I - P_cc is singular for cluster {c}")
    lam = np.maximum(lam, 0.0)
    m = U.shape[0]
    return np.eye(m) + (U * (lam**power - 1.0)) @ U.T


def _build_hc2(design: ClusterDesign) -> _HC2System:
    X_adj = np.empty_like(design.X)
    for c, rows in enumerate(design.members):
        U, mu = _hc2_pieces(design, c)
        lam = 1.0 - mu
        if lam.min() < LEVERAGE_FLOOR:
            raise DegenerateLeverage(
                f"I - P_cc has eigenvalue {lam.min():.3g} in cluster {c}"
            )
        Xc = design.X[rows]
        X_adj[rows] = Xc + (U * (lam**-0.5 - 1.0)) @ (U.T @ Xc)
    return _HC2System(X_adj)


def lz2_hc2(fit: OlsFit) -> VarianceEstimate:
    """Cluster sandwich with residuals premultiplied by ``(I_c - P_cc)^{-1/2}``."""
    sysm = _cached(fit.design, "hc2", _build_hc2)
    u = fit.design.cluster_sum(sysm.X_adj * fit.resid[:, None])
    return VarianceEstimate.build(_sandwich(fit.gram_inv, u.T @ u), Method.LZ2)


# ---------------------------------------------------------------------------
# plug-in random-effects variants


def plugin_re(fit: OlsFit) -> tuple[ReParams, VarianceEstimate]:
    """Moment estimates of ``sigma^2, tau^2`` that ignore the regressors.

    ``tau2 = (e~'e~ - e'e) / (sum n_c^2 - n)`` and ``sigma2 = e'e/n - tau2``,
    plugged into ``(X'X)^{-1} X' Sigma_hat X (X'X)^{-1}``.
    """
    d = fit.design
    denom = d.nddot - d.n
    if denom <= 0:
        raise AllSingletons("every cluster is a singleton; tau^2 is not identified")
    tau2 = (fit.rss_cluster - fit.rss) / denom
    sigma2 = fit.rss / d.n - tau2
    G = d.gram_inv
    V = sigma2 * G + tau2 * (G @ d.Xtil_gram @ G)
    return ReParams(sigma2, tau2), VarianceEstimate.build(V, Method.PLUGIN_RE)


def plugin_cluster_re(fit: OlsFit) -> tuple[ReParams, VarianceEstimate]:
    d = fit.design
    nc = d.sizes.astype(float)
    if np.any(nc < 2):
        raise SingletonCluster("cluster-specific plug-in needs n_c >= 2 in every cluster")
    ss = fit.cluster_rss
    tau2 = (fit.cluster_sum_sq - ss) / (nc**2 - nc)
    sigma2 = ss / nc - tau2
    meat = np.einsum("c,cij->ij", sigma2, d.per_cluster_gram) + np.einsum(
        "c,ci,cj->ij", tau2, d.Xtil, d.Xtil
    )
    V = _sandwich(d.gram_inv, meat)
    return ReParams(sigma2, tau2), VarianceEstimate.build(V, Method.PLUGIN_CLUSTER_RE)


# ---------------------------------------------------------------------------


def repair_psd(est: VarianceEstimate) -> VarianceEstimate:
    """Truncate negative eigenvalues at zero.

    This is a convenience for downstream inference and makes the estimator
    biased upward; it is never applied implicitly.
    """
    V = 0.5 * (est.V + est.V.T)
    lam, U = np.linalg.eigh(V)
    if lam[0] >= 0:
        return est
    V = (U * np.maximum(lam, 0.0)) @ U.T
    out = VarianceEstimate.build(V, est.method)
    return replace(out, diagnostics=replace(out.diagnostics, psd_repaired=True))


_DISPATCH = {
    Method.UV1: uv1,
    Method.UV2: uv2,
    Method.UV3: uv3,
    Method.LZ1: lz1_stata,
    Method.LZ2: lz2_hc2,
    Method.PLUGIN_RE: lambda f: plugin_re(f)[1],
    Method.PLUGIN_CLUSTER_RE: lambda f: plugin_cluster_re(f)[1],
    Method.PLUGIN_UNRESTRICTED: plugin_unrestricted,
}


def estimate(fit: OlsFit, method: Method | str, psd_repair: str = "off") -> VarianceEstimate:
    """Run one estimator by name, optionally followed by PSD repair."""
    est = _DISPATCH[Method(method)](fit)
    if psd_repair == "truncate":
        return repair_psd(est)
    if psd_repair != "off":
        raise ValueError(f"psd_repair must be 'off' or 'truncate', got {psd_repair!r}")
    return est
