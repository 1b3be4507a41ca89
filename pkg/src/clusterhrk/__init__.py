"""Unbiased cluster-robust variance estimation for OLS, with matching
degrees of freedom, benchmark estimators and a size-study harness."""

__version__ = "0.1.0"

from .core import ClusterDesign, ClusteredDataset, OlsFit, ScalarStats, fit_ols, scalar_stats
from .dof import DofEstimate, Reference, build_a_blocks, dof_for, dof_ik, dof_rv0, dof_rv1, estimate_re_moments
from .errors import *  # noqa: F401,F403
from .estimators import (
    Method,
    ReParams,
    VarianceEstimate,
    estimate,
    lz1_stata,
    lz2_hc2,
    plugin_cluster_re,
    plugin_re,
    plugin_unrestricted,
    repair_psd,
    uv1,
    uv2,
    uv3,
)
from .inference import TestResult, student_t_cdf, student_t_sf2, t_test
from .panel import PanelDataset, panel_fit, panel_plugin, panel_unbiased
from .pipeline import DEFAULT_METHODS, MethodOutcome, MethodSpec, evaluate, parse_method
from .simulation import (
    SV1,
    SV2,
    SV3,
    Balanced,
    BySize,
    RandomWithReplacement,
    SimulationConfig,
    SizeStudyResult,
    Unbalanced,
    resample_clusters,
    resample_study,
    run_study,
)
