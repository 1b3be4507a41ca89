"""Named (variance estimator, degrees of freedom) pairs used in size studies.

``STATA``   LZ1 with ``t(C-1)`` critical values.
``LZIK``    LZ2 (HC2) with Imbens-Kolesar d.f.
``UVj(RVr)`` unbiased estimator ``j`` with d.f. under reference ``r``.
``ORACLE``  the true covariance with normal critical values (needs the truth).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import dof as dofmod
from . import estimators as est
from .core import OlsFit
from .errors import EstimatorUndefined, NonpositiveVariance
from .inference import student_t_sf2

__all__ = ["MethodSpec", "parse_method", "DEFAULT_METHODS", "MethodOutcome", "evaluate"]

DEFAULT_METHODS = (
    "STATA",
    "LZIK",
    "UV1(RV0)",
    "UV1(RV1)",
    "UV2(RV0)",
    "UV2(RV1)",
    "UV3(RV0)",
    "UV3(RV1)",
)

_UV = re.compile(r"^(UV[123])\((RV[01])\)$")


@dataclass(frozen=True)
class MethodSpec:
    name: str
    estimator: est.Method | None
    reference: dofmod.Reference | None = None


def parse_method(name: str) -> MethodSpec:
    key = name.strip().upper()
    if key == "STATA":
        return MethodSpec("STATA", est.Method.LZ1)
    if key == "LZIK":
        return MethodSpec("LZIK", est.Method.LZ2)
    if key == "ORACLE":
        return MethodSpec("ORACLE", None)
    m = _UV.match(key)
    if m:
        return MethodSpec(key, est.Method(m.group(1)), dofmod.Reference(m.group(2)))
    raise ValueError(f"unknown method {name!r}; expected one of {', '.join(DEFAULT_METHODS)} or ORACLE")


@dataclass(frozen=True)
class MethodOutcome:
    """One method applied to one coefficient of one fit."""

    exists: bool
    variance: float = math.nan
    dof: float = math.nan
    t_stat: float = math.nan
    p_value: float = math.nan
    nonpositive_variance: bool = False
    dof_clamped: bool = False
    fallback: bool = False
    error: str = ""


def _tail(t: float, nu: float) -> float:
    if math.isinf(nu):
        return math.erfc(abs(t) / math.sqrt(2.0))
    return student_t_sf2(t, nu)


def evaluate(
    fit: OlsFit,
    spec: MethodSpec,
    ells,
    null_values=None,
    true_V: np.ndarray | None = None,
    moments=None,
    psd_repair: str = "off",
) -> list[MethodOutcome]:
    """Variance, d.f., t and p-value of ``spec`` for each coefficient in ``ells``.

    Estimator nonexistence yields ``exists=False`` rather than raising. A
    nonpositive variance estimate yields ``nonpositive_variance=True`` and a
    NaN p-value; callers decide how to count it.
    """
    ells = list(ells)
    nulls = [0.0] * len(ells) if null_values is None else list(null_values)
    try:
        if spec.estimator is None:
            if true_V is None:
                raise ValueError("ORACLE needs the true covariance")
            V = np.asarray(true_V)
        else:
            V = est.estimate(fit, spec.estimator, psd_repair=psd_repair).V
    except EstimatorUndefined as exc:
        return [MethodOutcome(False, error=type(exc).__name__) for _ in ells]

    out = []
    for ell, null in zip(ells, nulls):
        try:
            if spec.name == "STATA":
                d = dofmod.DofEstimate(float(fit.n_clusters - 1), dofmod.Reference.RV0)
            elif spec.name == "LZIK":
                d = dofmod.dof_ik(fit, ell)
            elif spec.name == "ORACLE":
                d = dofmod.DofEstimate(math.inf, dofmod.Reference.RV0)
            else:
                d = dofmod.dof_for(fit, spec.estimator, ell, spec.reference, moments=moments)
        except EstimatorUndefined as exc:
            out.append(MethodOutcome(False, error=type(exc).__name__))
            continue
        var = float(V[ell, ell])
        if not var > 0:
            out.append(
                MethodOutcome(
                    True,
                    variance=var,
                    dof=d.d,
                    nonpositive_variance=True,
                    dof_clamped=d.clamped,
                    fallback=d.fallback,
                    error=NonpositiveVariance.__name__,
                )
            )
            continue
        t = (float(fit.beta_hat[ell]) - null) / math.sqrt(var)
        out.append(
            MethodOutcome(
                True,
                variance=var,
                dof=d.d,
                t_stat=t,
                p_value=_tail(t, d.d),
                dof_clamped=d.clamped,
                fallback=d.fallback,
            )
        )
    return out
