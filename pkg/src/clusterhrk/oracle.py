"""Brute-force dense reference implementations.

Everything in this module materializes the n^2-sized objects (``D``,
``M (x) M``) that the production code avoids, and is meant for tests and
acceptance checks on desk-scale problems only. Nothing here is imported by
the production path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .core import ClusterDesign, OlsFit
from .errors import SingularA, SingularCore, TooLargeForOracle

Structure = Literal["equicorrelated", "cluster_specific", "unrestricted", "panel"]

MAX_N = 64
_SING_TOL = 1e-12

# published seed list for randomized desk-scale instances
SEEDS = tuple(range(20240101, 20240101 + 50))


@dataclass(frozen=True)
class DenseDesign:
    D: np.ndarray
    structure: str

    @property
    def r(self) -> int:
        return self.D.shape[1]


def vec(A: np.ndarray) -> np.ndarray:
    return np.asarray(A).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int) -> np.ndarray:
    return np.asarray(v).reshape((rows, -1), order="F")


def indicator(cluster_of) -> np.ndarray:
    """The n x C cluster indicator matrix ``B``."""
    cl = np.asarray(cluster_of)
    B = np.zeros((cl.size, cl.max() + 1))
    B[np.arange(cl.size), cl] = 1.0
    return B


def _check_n(n: int, cap: int) -> None:
    if n > cap:
        raise TooLargeForOracle(f"n={n} exceeds oracle cap {cap}")


def build_design(structure: Structure, cluster_of=None, panel_dims=None, cap: int = MAX_N) -> DenseDesign:
    """Explicit design matrix ``D`` with ``vec Sigma = D pi``."""
    if structure == "panel":
        N, T = panel_dims
        n = N * T
        _check_n(n, cap)
        cols = np.zeros((n * n, T * T))
        eye_T = np.eye(T)
        for i in range(N):
            e = np.zeros((N, 1))
            e[i] = 1.0
            Gi = np.kron(e, eye_T)
            cols += np.kron(Gi, Gi)
        return DenseDesign(cols, structure)

    cl = np.asarray(cluster_of)
    n = cl.size
    _check_n(n, cap)
    B = indicator(cl)
    C = B.shape[1]
    eye = np.eye(n)
    if structure == "equicorrelated":
        D = np.column_stack([vec(eye), vec(B @ B.T)])
    elif structure == "cluster_specific":
        g = [vec(np.diag(B[:, c])) for c in range(C)]
        h = [np.kron(B[:, c], B[:, c]) for c in range(C)]
        D = np.column_stack(g + h)
    elif structure == "unrestricted":
        blocks = []
        for c in range(C):
            Gc = eye[:, cl == c]
            blocks.append(np.kron(Gc, Gc))
        D = np.hstack(blocks)
    else:
        raise ValueError(f"unknown structure {structure!r}")
    return DenseDesign(D, structure)


def annihilator(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, float)
    return np.eye(X.shape[0]) - X @ np.linalg.inv(X.T @ X) @ X.T


def _pieces(D, X):
    X = np.asarray(X, float)
    n = X.shape[0]
    _check_n(n, MAX_N)
    XtXi = np.linalg.inv(X.T @ X)
    H = XtXi @ X.T
    M = np.eye(n) - X @ H
    Rt = np.kron(H, H) @ D
    return M, Rt


def _solve(A, b, exc, what):
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= _SING_TOL * np.max(np.abs(A)):
        raise exc(f"{what} is singular")
    return np.linalg.solve(A, b)


def hrk_core(D: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``D'(M (x) M)D`` with ``M (x) M`` materialized."""
    M, _ = _pieces(D, X)
    return D.T @ np.kron(M, M) @ D


def dense_hrk(D, X, resid) -> np.ndarray:
    """``R'[D'(M (x) M)D]^{-1} D'(e (x) e)`` by explicit matrices; returns vec V."""
    D = np.asarray(D, float)
    M, Rt = _pieces(D, X)
    core = D.T @ np.kron(M, M) @ D
    q = np.kron(resid, resid)
    return Rt @ _solve(core, D.T @ q, SingularCore, "D'(M(x)M)D")


def dense_projection(D, X, resid) -> np.ndarray:
    """The regressor-neglecting version ``R'(D'D)^{-1}D'(e (x) e)``."""
    D = np.asarray(D, float)
    _, Rt = _pieces(D, X)
    q = np.kron(resid, resid)
    return Rt @ _solve(D.T @ D, D.T @ q, SingularCore, "D'D")


def dense_hrk_woodbury(D, X, resid) -> np.ndarray:
    """``(W + F'A^{-1}F)^{-1} F'A^{-1} D'(e (x) e)``; returns vec V."""
    D = np.asarray(D, float)
    X = np.asarray(X, float)
    n = X.shape[0]
    _check_n(n, MAX_N)
    XtX = X.T @ X
    P = X @ np.linalg.inv(XtX) @ X.T
    eye = np.eye(n)
    A = D.T @ D - D.T @ np.kron(eye, P) @ D - D.T @ np.kron(P, eye) @ D
    W = np.kron(XtX, XtX)
    F = D.T @ np.kron(X, X)
    FtAinv = _solve(A, F, SingularA, "A").T  # A symmetric
    q = np.kron(resid, resid)
    return np.linalg.solve(W + FtAinv @ F, FtAinv @ (D.T @ q))


def woodbury_blocks(cluster_of, X):
    """Per-cluster ``(F_c' A_c^{-1}, S_c^{-1} F_c')`` pairs for the unrestricted structure."""
    X = np.asarray(X, float)
    cl = np.asarray(cluster_of)
    k = X.shape[1]
    G = np.linalg.inv(X.T @ X)
    out = []
    for c in range(cl.max() + 1):
        Xc = X[cl == c]
        nc = Xc.shape[0]
        Pc = Xc @ G @ Xc.T
        Ic = np.eye(nc)
        Ac = np.kron(Ic, Ic) - np.kron(Ic, Pc) - np.kron(Pc, Ic)
        Fc = np.kron(Xc, Xc)
        K = Xc.T @ Xc @ G
        Sc = np.eye(k * k) - np.kron(np.eye(k), K) - np.kron(K, np.eye(k))
        out.append((np.linalg.solve(Ac, Fc).T, np.linalg.solve(Sc, Fc.T)))
    return out


def true_vec_v(X, Sigma) -> np.ndarray:
    """``vec[(X'X)^{-1} X' Sigma X (X'X)^{-1}]``."""
    X = np.asarray(X, float)
    H = np.linalg.inv(X.T @ X) @ X.T
    return vec(H @ Sigma @ H.T)


def dense_expected(D, X, Sigma) -> np.ndarray:
    """Apply the dense unbiased map to ``E(e (x) e) = (M (x) M) vec Sigma``."""
    D = np.asarray(D, float)
    M, Rt = _pieces(D, X)
    MM = np.kron(M, M)
    core = D.T @ MM @ D
    return Rt @ _solve(core, D.T @ (MM @ vec(Sigma)), SingularCore, "D'(M(x)M)D")


def fit_with_residual(design: ClusterDesign, resid: np.ndarray) -> OlsFit:
    """An :class:`OlsFit` whose residual vector is exactly ``resid``."""
    resid = np.asarray(resid, float)
    return OlsFit(design, resid, np.zeros(design.k), resid)


def expectation_check(
    estimator: Callable[[OlsFit], np.ndarray],
    design: ClusterDesign,
    Sigma: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Apply an estimator's linear functional to the exact mean of ``e (x) e``.

    ``estimator`` maps a fit to a k x k matrix and is quadratic in the
    residuals. With ``Sigma = L L'`` the mean of ``e e'`` is
    ``sum_j (M l_j)(M l_j)'``, so the estimator evaluated at each residual
    ``M l_j`` and summed gives its expectation exactly.

    Returns ``(V_expected, V_true, max_relative_error)``.
    """
    Sigma = np.asarray(Sigma, float)
    _check_n(design.n, MAX_N)
    lam, U = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
    lam = np.clip(lam, 0.0, None)
    L = U * np.sqrt(lam)
    V_exp = np.zeros((design.k, design.k))
    for j in range(design.n):
        if lam[j] == 0.0:
            continue
        V_exp += np.asarray(estimator(design.fit(L[:, j])))
    V_true = unvec(true_vec_v(design.X, Sigma), design.k)
    scale = np.max(np.abs(V_true))
    err = np.max(np.abs(V_exp - V_true))
    return V_exp, V_true, float(err / scale) if scale > 0 else float(err)


def dense_a_matrix(D, X, ell: int) -> np.ndarray:
    """Symmetric ``A`` with ``V_hat[ell, ell] = e'Ae`` for the dense HRK map."""
    D = np.asarray(D, float)
    M, Rt = _pieces(D, X)
    k = np.asarray(X).shape[1]
    core = D.T @ np.kron(M, M) @ D
    lf = np.zeros(k * k)
    lf[ell * k + ell] = 1.0
    a = D @ _solve(core, Rt.T @ lf, SingularCore, "D'(M(x)M)D")
    A = unvec(a, M.shape[0])
    return 0.5 * (A + A.T)


def dense_moment_vectors(X, cluster_of) -> dict[str, np.ndarray]:
    """Diagonals ``m_ab`` of the products of ``M`` and ``BB'`` by explicit matrices."""
    M = annihilator(X)
    B = indicator(cluster_of)
    BB = B @ B.T
    return {
        "m10": np.diag(M).copy(),
        "m21": np.diag(M @ BB @ M).copy(),
        "m11": np.diag(BB @ M).copy(),
        "m22": np.diag(BB @ M @ BB @ M).copy(),
        "m12": np.diag(BB @ M @ BB).copy(),
        "m23": np.diag(BB @ M @ BB @ M @ BB).copy(),
    }


def re_covariance(cluster_of, sigma2, tau2) -> np.ndarray:
    """``sigma^2 I + tau^2 BB'`` (scalars) or the cluster-specific version (arrays)."""
    cl = np.asarray(cluster_of)
    B = indicator(cl)
    s = np.broadcast_to(np.asarray(sigma2, float), (B.shape[1],))
    t = np.broadcast_to(np.asarray(tau2, float), (B.shape[1],))
    return np.diag(s[cl]) + (B * t) @ B.T
