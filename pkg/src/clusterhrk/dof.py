"""Data-driven degrees of freedom for t-tests based on the unbiased estimators.

The variance estimate of coefficient ``ell`` is a quadratic form ``e'Ae`` in
the residuals with block-diagonal ``A``. Matching the first two moments of
``d * v_hat / v`` to a chi-square gives ``d = (v^2)^2 / tr(A M Sigma M A M Sigma M)``
under a normal reference distribution for the errors:

* ``RV0``: ``Sigma = sigma^2 I``; the unknown scale cancels.
* ``RV1``: ``Sigma = sigma^2 I + tau^2 BB'``; ``sigma^4``, ``sigma^2 tau^2``
  and ``tau^4`` are replaced by unbiased fourth-moment estimates.

All traces are expanded so that only k-, C- and n_c-sized objects appear.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from . import estimators as est
from .core import ClusterDesign, OlsFit
from .errors import (
    NonpositiveDenominator,
    NonpositiveTrace,
    SingularMomentSystem,
)

__all__ = [
    "Reference",
    "ABlocks",
    "MomentDesign",
    "DofEstimate",
    "build_a_blocks",
    "dof_rv0",
    "dof_rv1",
    "estimate_re_moments",
    "moment_design",
    "dof_for",
]


class Reference(str, enum.Enum):
    RV0 = "RV0"
    RV1 = "RV1"


@dataclass(frozen=True)
class ABlocks:
    """Block-diagonal ``A`` with ``A_c = r1_c I + Y_c K_c Y_c'`` and ``Y_c = [X_c, 1]``.

    For UV1/UV2 only the bottom-right entry of ``K_c`` (the ``ii'`` weight
    ``r2_c``) is nonzero; for UV3 ``r1_c = 0`` and the top-left k x k block
    of ``K_c`` is the symmetrized ``Q_c``.
    """

    design: ClusterDesign
    method: est.Method
    ell: int
    r1: np.ndarray  # (C,)
    K: np.ndarray  # (C, k+1, k+1)

    @property
    def r2(self) -> np.ndarray:
        return self.K[:, -1, -1]

    @property
    def Q(self) -> np.ndarray:
        k = self.design.k
        return self.K[:, :k, :k]

    def quadratic_form(self, resid: np.ndarray) -> float:
        """``e'Ae`` evaluated through cluster aggregates."""
        d = self.design
        resid = np.asarray(resid, float)
        ss = d.cluster_sum(resid**2)
        Ye = np.column_stack([d.cluster_sum(d.X * resid[:, None]), d.cluster_sum(resid)])
        return float(self.r1 @ ss + np.einsum("ci,cij,cj->", Ye, self.K, Ye))

    def block(self, c: int) -> np.ndarray:
        d = self.design
        rows = d.members[c]
        Y = np.column_stack([d.X[rows], np.ones(rows.size)])
        return self.r1[c] * np.eye(rows.size) + Y @ self.K[c] @ Y.T

    def dense(self) -> np.ndarray:
        """The full n x n matrix; for tests on small problems."""
        d = self.design
        A = np.zeros((d.n, d.n))
        for c, rows in enumerate(d.members):
            A[np.ix_(rows, rows)] = self.block(c)
        return A

    @cached_property
    def traces(self) -> "_Traces":
        return _traces(self)


def _gamma(design: ClusterDesign) -> np.ndarray:
    """Per-cluster Gram matrix of ``Y_c = [X_c, 1]``."""
    cached = design.__dict__.get("_gamma")
    if cached is None:
        C, k = design.n_clusters, design.k
        cached = np.empty((C, k + 1, k + 1))
        cached[:, :k, :k] = design.per_cluster_gram
        cached[:, :k, k] = design.Xtil
        cached[:, k, :k] = design.Xtil
        cached[:, k, k] = design.sizes
        design.__dict__["_gamma"] = cached
    return cached


def build_a_blocks(fit: OlsFit | ClusterDesign, method, ell: int) -> ABlocks:
    """Structured ``A`` for ``method`` in {UV1, UV2, UV3} and coefficient ``ell``.

    The blocks depend on the regressors and the clustering only. Estimator
    singularities (``SingularPsi``, ``SingularPhi``, ``SingularSc``, ...) propagate.
    """
    design = fit.design if isinstance(fit, OlsFit) else fit
    method = est.Method(method)
    C, k = design.n_clusters, design.k
    if not 0 <= ell < k:
        raise IndexError(f"coefficient index {ell} out of range for k={k}")
    K = np.zeros((C, k + 1, k + 1))
    if method is est.Method.UV1:
        sysm = est._cached(design, "uv1", est._build_uv1)
        row = np.array([sysm.G[ell, ell], sysm.GXXG[ell, ell]])
        r = linalg.lu_solve(sysm.psi_lu, row, trans=1)
        r1 = np.full(C, r[0])
        K[:, k, k] = r[1]
    elif method is est.Method.UV2:
        sysm = est._cached(design, "uv2", est._build_uv2)
        row = np.concatenate([sysm.GZG[:, ell, ell], sysm.z[:, ell] ** 2])
        r = linalg.lu_solve(sysm.phi_lu, row, trans=1)
        r1 = r[:C]
        K[:, k, k] = r[C:]
    elif method is est.Method.UV3:
        sysm = est._cached(design, "uv3", est._build_uv3)
        q = sysm.maps[:, ell * k + ell, :].reshape(C, k, k, order="F")
        r1 = np.zeros(C)
        K[:, :k, :k] = 0.5 * (q + q.transpose(0, 2, 1))
    else:
        raise ValueError(f"A-blocks are defined for UV1, UV2, UV3 only, not {method.value}")
    return ABlocks(design, method, ell, r1, K)


@dataclass(frozen=True)
class _Traces:
    g: float  # e_l'(X'X)^{-1}e_l
    h: float  # e_l'(X'X)^{-1}X~'X~(X'X)^{-1}e_l
    amam: float  # tr AMAM
    t_mixed: float  # tr B'MAMAMB
    t_tau: float  # tr (B'MAMB)^2


def _traces(blocks: ABlocks) -> _Traces:
    d = blocks.design
    k, C = d.k, d.n_clusters
    G = d.gram_inv
    Xt = d.Xtil
    Gam = _gamma(d)
    K, r1 = blocks.K, blocks.r1
    nc = d.sizes.astype(float)

    GK = np.einsum("cij,cjk->cik", Gam, K)  # Gamma_c K_c
    GKG = np.einsum("cij,cjk->cik", GK, Gam)
    tr_KG = np.einsum("cii->c", GK)
    tr_KGKG = np.einsum("cij,cji->c", GK, GK)
    YAY = r1[:, None, None] * Gam + GKG
    YA2Y = (
        (r1**2)[:, None, None] * Gam
        + 2.0 * r1[:, None, None] * GKG
        + np.einsum("cij,cjk->cik", GKG, np.einsum("cij,cjk->cik", K, Gam))
    )
    tr_A2 = r1**2 * nc + 2.0 * r1 * tr_KG + tr_KGKG

    XAX = YAY[:, :k, :k].sum(axis=0)
    XA2X = YA2Y[:, :k, :k].sum(axis=0)
    m = YAY[:, :k, k]  # (C, k): X_c'A_c 1
    lam = YAY[:, k, k]  # 1'A_c 1
    m2 = YA2Y[:, :k, k]  # X_c'A_c^2 1
    lam2 = YA2Y[:, k, k]  # 1'A_c^2 1

    GXAX = G @ XAX
    amam = float(tr_A2.sum() - 2.0 * np.trace(G @ XA2X) + np.sum(GXAX * GXAX.T))

    GXXtil = G @ d.Xtil_gram
    t1 = lam2.sum() - 2.0 * np.einsum("ci,ij,cj->", m2, G, Xt) + np.trace(G @ XA2X @ GXXtil)
    w = m - Xt @ GXAX  # rows: X_c'A_c 1 - X'AX G x~_c
    t_mixed = float(t1 - np.einsum("ci,ij,cj->", w, G, w))

    mu = m @ G  # rows mu_c' = (G X_c'A_c 1)'
    Wm = GXAX @ G
    cross = Xt @ mu.T  # (c, d): x~_c' mu_d
    Smat = np.diag(lam) - cross - cross.T + Xt @ Wm @ Xt.T
    t_tau = float(np.sum(Smat * Smat))

    ell = blocks.ell
    return _Traces(
        g=float(G[ell, ell]),
        h=float((G @ d.Xtil_gram @ G)[ell, ell]),
        amam=amam,
        t_mixed=t_mixed,
        t_tau=t_tau,
    )


@dataclass(frozen=True)
class DofEstimate:
    d: float
    reference: Reference
    clamped: bool = False
    moments_used: tuple[float, float, float] | None = None
    fallback: bool = False  # RV1 requested, RV0 returned


def _clamp(raw: float, upper: float) -> tuple[float, bool]:
    if not np.isfinite(raw) or raw < 1.0:
        return 1.0, True
    if raw > upper:
        return float(upper), True
    return float(raw), False


def dof_rv0(blocks: ABlocks, fit: OlsFit | None = None, ell: int | None = None) -> DofEstimate:
    """``(e_l'(X'X)^{-1}e_l)^2 / tr(AMAM)``, clamped to ``[1, n-k]``."""
    tr = blocks.traces
    if not tr.amam > 0:
        raise NonpositiveTrace(f"tr(AMAM) = {tr.amam:.3g}")
    d, clamped = _clamp(tr.g**2 / tr.amam, blocks.design.n - blocks.design.k)
    return DofEstimate(d, Reference.RV0, clamped)


# ---------------------------------------------------------------------------
# fourth moments under the random-effects reference


@dataclass(frozen=True)
class MomentDesign:
    """Diagonals of products of ``M`` and ``BB'`` and the 3 x 3 moment system.

    ``m_ab`` carries ``a`` factors ``M`` and ``b`` factors ``BB'``:
    ``m10 = diag M``, ``m21 = diag MBB'M``, ``m11 = diag BB'M``,
    ``m22 = diag BB'MBB'M``, ``m12 = diag BB'MBB'``, ``m23 = diag BB'MBB'MBB'``.
    """

    m10: np.ndarray
    m21: np.ndarray
    m11: np.ndarray
    m22: np.ndarray
    m12: np.ndarray
    m23: np.ndarray
    system: np.ndarray

    @property
    def x(self) -> float:
        return float(self.system[1, 0])

    @property
    def y(self) -> float:
        return float(self.system[1, 1])

    @property
    def z(self) -> float:
        return float(self.system[1, 2])


def _rowdot(R: np.ndarray, S: np.ndarray) -> np.ndarray:
    # diag(R S') = (R * S) 1
    return np.einsum("ij,ij->i", R, S)


def _build_moment_design(design: ClusterDesign) -> MomentDesign:
    X, G, Xt, cl = design.X, design.gram_inv, design.Xtil, design.cluster_of
    rows = np.arange(design.n)
    MB = -(X @ (G @ Xt.T))  # M B = B - X G X~'
    MB[rows, cl] += 1.0
    Kc = np.diag(design.sizes.astype(float)) - Xt @ G @ Xt.T  # B'MB
    BK = Kc[cl]  # B (B'MB)
    m10 = 1.0 - _rowdot(X @ G, X)
    m21 = _rowdot(MB, MB)
    m11 = MB[rows, cl].copy()
    m22 = _rowdot(BK, MB)
    m12 = BK[rows, cl].copy()
    m23 = _rowdot(BK, BK)
    s = np.sum
    system = np.array(
        [
            [3 * s(m10 * m10), 6 * s(m10 * m21), 3 * s(m21 * m21)],
            [
                s(m10 * m12 + 2 * m11 * m11),
                s(m10 * m23 + m21 * m12 + 4 * m22 * m11),
                s(m21 * m23 + 2 * m22 * m22),
            ],
            [3 * s(m12 * m12), 6 * s(m12 * m23), 3 * s(m23 * m23)],
        ]
    )
    return MomentDesign(m10, m21, m11, m22, m12, m23, system)


def moment_design(design: ClusterDesign) -> MomentDesign:
    md = design.__dict__.get("_moment_design")
    if md is None:
        md = _build_moment_design(design)
        design.__dict__["_moment_design"] = md
    return md


def _moment_lu(design: ClusterDesign):
    def build(d):
        A = moment_design(d).system
        return est._factor(A, SingularMomentSystem, "fourth-moment system")

    return est._cached(design, "moments", build)


def estimate_re_moments(fit: OlsFit) -> tuple[float, float, float]:
    """Unbiased estimates of ``(sigma^4, sigma^2 tau^2, tau^4)`` under normal RE errors.

    The right-hand side is ``(sum e_i^4, sum e_i^2 et_i^2, sum et_i^4)`` where
    ``et = BB'e`` repeats each cluster's residual sum over its members.
    Estimates can be negative.
    """
    lu = _moment_lu(fit.design)
    e = fit.resid
    et = fit.design.expand(fit.resid_cluster_sum)
    e2, et2 = e * e, et * et
    rhs = np.array([e2 @ e2, e2 @ et2, et2 @ et2])
    return tuple(float(v) for v in linalg.lu_solve(lu, rhs))


def dof_rv1(
    blocks: ABlocks,
    fit: OlsFit,
    ell: int | None = None,
    moments: tuple[float, float, float] | None = None,
) -> DofEstimate:
    """d.f. under the random-effects reference with plug-in fourth moments.

    Raises
    ------
    NonpositiveDenominator
        When the estimated variance of the quadratic form is not positive.
        Use :func:`dof_for` to fall back to ``RV0`` with a flag instead.
    """
    if moments is None:
        moments = estimate_re_moments(fit)
    s4, s2t2, t4 = moments
    tr = blocks.traces
    den = s4 * tr.amam + 2.0 * s2t2 * tr.t_mixed + t4 * tr.t_tau
    if not den > 0:
        raise NonpositiveDenominator(f"plug-in variance of v_hat is {den:.3g}")
    num = s4 * tr.g**2 + 2.0 * s2t2 * tr.g * tr.h + t4 * tr.h**2
    d, clamped = _clamp(num / den, blocks.design.n - blocks.design.k)
    return DofEstimate(d, Reference.RV1, clamped, (s4, s2t2, t4))


def cached_blocks(design: ClusterDesign, method, ell: int) -> ABlocks:
    """:func:`build_a_blocks` memoized per (method, ell) on the design."""
    key = f"ablocks:{est.Method(method).value}:{ell}"
    return est._cached(design, key, lambda d: build_a_blocks(d, method, ell))


def dof_for(fit: OlsFit, method, ell: int, reference, moments=None) -> DofEstimate:
    """d.f. for one (estimator, coefficient, reference) triple.

    Under ``RV1`` a nonpositive plug-in denominator falls back to the
    ``RV0`` value with ``fallback=True``.
    """
    blocks = cached_blocks(fit.design, method, ell)
    if Reference(reference) is Reference.RV0:
        return dof_rv0(blocks)
    try:
        return dof_rv1(blocks, fit, moments=moments)
    except NonpositiveDenominator:
        r0 = dof_rv0(blocks)
        return DofEstimate(r0.d, Reference.RV0, r0.clamped, moments, fallback=True)


# ---------------------------------------------------------------------------
# benchmark: d.f. for the HC2 (LZ2) estimator under a random-effects reference


@dataclass(frozen=True)
class _IKPieces:
    gg: np.ndarray  # (C, C): g_c'g_d
    bg: np.ndarray  # (C, C): B'g_d


def _build_ik(design: ClusterDesign, ell: int) -> _IKPieces:
    hc2 = est._cached(design, "hc2", est._build_hc2)
    G = design.gram_inv
    a = hc2.X_adj @ G[:, ell]  # stacked a_c = (I - P_cc)^{-1/2} X_c G e_l
    aa = design.cluster_sum(a * a)
    Xa = design.cluster_sum(design.X * a[:, None])  # rows X_c'a_c
    ia = design.cluster_sum(a)
    # g_c = M [a_c embedded]; M idempotent so g_c'g_d = a_c'a_d 1[c=d] - (X_c'a_c)'G(X_d'a_d)
    gg = np.diag(aa) - Xa @ G @ Xa.T
    bg = np.diag(ia) - design.Xtil @ G @ Xa.T
    return _IKPieces(gg, bg)


def dof_ik(fit: OlsFit, ell: int, re_params=None) -> DofEstimate:
    """Imbens-Kolesar d.f. for the HC2 cluster estimator.

    ``d = (tr W)^2 / tr(W^2)`` with ``W = Gm' Sigma_hat Gm``, where column ``c``
    of ``Gm`` is ``M`` applied to ``(I - P_cc)^{-1/2} X_c (X'X)^{-1} e_l``
    and ``Sigma_hat`` is the regressor-neglecting random-effects estimate.
    """
    pieces = est._cached(fit.design, f"ik:{ell}", lambda d: _build_ik(d, ell))
    if re_params is None:
        re_params, _ = est.plugin_re(fit)
    W = re_params.sigma2_hat * pieces.gg + re_params.tau2_hat * (pieces.bg.T @ pieces.bg)
    num = np.trace(W) ** 2
    den = float(np.sum(W * W))
    if not den > 0:
        raise NonpositiveTrace("tr(W^2) is zero")
    d, clamped = _clamp(num / den, fit.n - fit.k)
    return DofEstimate(d, Reference.RV1, clamped)
