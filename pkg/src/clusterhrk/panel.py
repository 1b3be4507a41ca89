"""Homogeneous panel covariance ``Sigma = I_N (x) Lambda``.

Observations are ordered unit-major: rows ``i*T .. i*T + T - 1`` belong to
unit ``i``. The unbiased estimator only inverts a T^2 x T^2 matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import ClusterDesign, OlsFit, labels_to_index
from .errors import DataError, SingularPanelSystem
from .estimators import Method, VarianceEstimate, _factor

__all__ = ["PanelDataset", "panel_fit", "panel_unbiased", "panel_plugin"]


@dataclass(frozen=True)
class PanelDataset:
    """A balanced panel with ``N`` units observed in ``T`` waves."""

    y: np.ndarray
    X: np.ndarray
    N: int
    T: int

    def __post_init__(self):
        y = np.asarray(self.y, float)
        X = np.asarray(self.X, float)
        if X.ndim == 1:
            X = X[:, None]
        if y.shape[0] != self.N * self.T or X.shape[0] != y.shape[0]:
            raise DataError(f"panel needs exactly N*T = {self.N * self.T} rows, got {y.shape[0]}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def unit_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.N), self.T)

    @classmethod
    def from_long(cls, unit, wave, y, X) -> "PanelDataset":
        """Sort long-format records into unit-major order; rejects unbalanced panels."""
        ui, _ = labels_to_index(list(unit))
        wi, wl = labels_to_index(list(wave))
        try:
            wi = np.argsort(np.argsort(np.array(wl)))[wi]
        except TypeError:
            pass
        N, T = ui.max() + 1, wi.max() + 1
        if len(ui) != N * T:
            raise DataError(f"unbalanced panel: {len(ui)} rows for {N} units x {T} waves")
        slot = ui * T + wi
        if np.unique(slot).size != slot.size:
            raise DataError("duplicate (unit, wave) pairs")
        order = np.argsort(slot)
        return cls(np.asarray(y, float)[order], np.asarray(X, float)[order], int(N), int(T))


def panel_fit(data: PanelDataset) -> OlsFit:
    """OLS fit with each unit as a cluster."""
    return ClusterDesign(data.X, data.unit_of).fit(data.y)


def _unit_blocks(fit: OlsFit, T: int | None):
    if T is None:
        sizes = fit.design.sizes
        T = int(sizes[0])
        if np.any(sizes != T):
            raise DataError("units have different numbers of waves")
    N = fit.n // T
    if N * T != fit.n or np.any(fit.design.cluster_of != np.repeat(np.arange(N), T)):
        raise DataError("fit is not a unit-major panel")
    X = fit.design.X.reshape(N, T, -1)
    E = fit.resid.reshape(N, T)
    return X, E, T


def _sandwich(fit: OlsFit, Xi: np.ndarray, Lam: np.ndarray, method: Method) -> VarianceEstimate:
    meat = np.einsum("itk,ts,isl->kl", Xi, Lam, Xi)
    G = fit.gram_inv
    return VarianceEstimate.build(G @ meat @ G, method)


def panel_unbiased(fit: OlsFit, T: int | None = None) -> tuple[np.ndarray, VarianceEstimate]:
    """Unbiased ``Lambda_hat`` and the coefficient covariance under ``I_N (x) Lambda``.

    ``vec Lambda_hat = (A + F W^{-1} F')^{-1} sum_i e_i (x) e_i`` with
    ``A = N I - I (x) sum P_i - sum P_i (x) I``, ``F = sum_i X_i (x) X_i`` and
    ``W = X'X (x) X'X``. ``T`` defaults to the common unit size of ``fit``.
    """
    Xi, E, T = _unit_blocks(fit, T)
    N = Xi.shape[0]
    if N < 2:
        raise SingularPanelSystem("need at least two units")
    G = fit.gram_inv
    eye = np.eye(T)
    Psum = np.einsum("itk,kl,isl->ts", Xi, G, Xi)
    A = N * np.eye(T * T) - np.kron(eye, Psum) - np.kron(Psum, eye)
    # F W^{-1} F' = sum_{i,j} (X_i G X_j') (x) (X_i G X_j')
    F = sum(np.kron(Xi[i], Xi[i]) for i in range(N))
    FWF = F @ np.kron(G, G) @ F.T
    lu = _factor(A + FWF, SingularPanelSystem, "T^2 x T^2 panel system")
    q = sum(np.kron(E[i], E[i]) for i in range(N))
    Lam = linalg.lu_solve(lu, q).reshape(T, T, order="F")
    Lam = 0.5 * (Lam + Lam.T)
    return Lam, _sandwich(fit, Xi, Lam, Method.UV3)


def panel_plugin(fit: OlsFit, T: int | None = None) -> tuple[np.ndarray, VarianceEstimate]:
    """``Lambda_hat = sum_i e_i e_i' / N`` in the same sandwich (biased)."""
    Xi, E, T = _unit_blocks(fit, T)
    Lam = E.T @ E / Xi.shape[0]
    return Lam, _sandwich(fit, Xi, Lam, Method.PLUGIN_UNRESTRICTED)
