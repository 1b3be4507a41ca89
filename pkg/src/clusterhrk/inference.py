"""Two-sided t-tests with possibly fractional degrees of freedom."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .core import OlsFit
from .errors import InvalidNu, NonpositiveVariance
from .estimators import VarianceEstimate

__all__ = ["TestResult", "student_t_cdf", "student_t_sf2", "t_test"]


def _check_nu(nu) -> float:
    nu = float(nu)
    if not nu > 0 or math.isnan(nu):
        raise InvalidNu(f"degrees of freedom must be positive, got {nu}")
    return nu


def student_t_sf2(t: float, nu: float) -> float:
    """Two-sided tail probability ``P(|T| > |t|)`` for ``T ~ t(nu)``.

    Uses ``I_{nu/(nu+t^2)}(nu/2, 1/2)``, which keeps full relative accuracy
    far in the tail where ``1 - F`` would cancel.
    """
    nu = _check_nu(nu)
    if math.isinf(t):
        return 0.0
    return float(special.betainc(0.5 * nu, 0.5, nu / (nu + t * t)))


def student_t_cdf(x: float, nu: float) -> float:
    """CDF of Student's t with real ``nu > 0`` via the regularized incomplete beta."""
    tail = 0.5 * student_t_sf2(x, nu)
    return 1.0 - tail if x >= 0 else tail


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    ell: int
    estimate: float
    std_error: float
    t_stat: float
    dof: float
    p_value: float
    reject_at: dict = field(default_factory=dict)
    variance_method: str = ""
    dof_reference: str = ""


def t_test(
    fit: OlsFit,
    v: VarianceEstimate | np.ndarray,
    d,
    ell: int,
    null_value: float = 0.0,
    levels: Sequence[float] = (0.05,),
) -> TestResult:
    """Test ``beta_ell = null_value`` against a t distribution with ``d`` d.f.

    ``d`` is a :class:`~clusterhrk.dof.DofEstimate` or a plain number.
    Rejection at level ``a`` means ``p < a`` (strict).

    Raises
    ------
    NonpositiveVariance
        If the estimated variance of ``beta_ell`` is not positive.
    """
    V = v.V if isinstance(v, VarianceEstimate) else np.asarray(v)
    var = float(V[ell, ell])
    if not var > 0:
        raise NonpositiveVariance(f"estimated variance {var:.3g} for coefficient {ell}")
    nu = float(getattr(d, "d", d))
    se = math.sqrt(var)
    t = (float(fit.beta_hat[ell]) - null_value) / se
    p = student_t_sf2(t, nu)
    return TestResult(
        ell=ell,
        estimate=float(fit.beta_hat[ell]),
        std_error=se,
        t_stat=t,
        dof=nu,
        p_value=p,
        reject_at={float(a): p < a for a in levels},
        variance_method=getattr(getattr(v, "method", None), "value", ""),
        dof_reference=getattr(getattr(d, "reference", None), "value", ""),
    )
