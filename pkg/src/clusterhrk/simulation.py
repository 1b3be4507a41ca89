"""Monte Carlo size studies and the cluster-resampling protocol.

The data generating process is ``y = alpha + d*beta + x*gamma + e`` with a
treatment dummy ``d`` equal to one in the first ``C1`` clusters, a standard
normal regressor ``x`` drawn once per study, and normal errors that are
independent across clusters with covariance

* ``SV1``: ``sigma^2 I + tau^2 ii'``
* ``SV2``: ``sigma_c^2 I + tau_c^2 ii'`` with ``sigma_c^2 = exp(2 delta (C-c)/(C-1))``
  and ``tau_c^2 = rho sigma_c^2`` (clusters numbered 1..C)
* ``SV3``: ``SV1`` plus ``diag(x_c)^2 / 2``

Replication ``r`` draws its errors from a Philox stream keyed on
``(seed, r)``, so results do not depend on how replications are split across
worker processes.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import ClusterDesign, ClusteredDataset
from .dof import estimate_re_moments
from .errors import (
    ConfigError,
    EmptySubsample,
    EstimatorUndefined,
    NonPsd,
    NonpositiveSize,
    NotDivisible,
    RankDeficient,
)
from .pipeline import DEFAULT_METHODS, evaluate, parse_method

__all__ = [
    "Balanced",
    "Unbalanced",
    "SV1",
    "SV2",
    "SV3",
    "SimulationConfig",
    "SizeStudyResult",
    "cluster_sizes",
    "generate_design",
    "draw_errors",
    "true_covariance",
    "run_study",
    "RandomWithReplacement",
    "BySize",
    "resample_clusters",
    "resample_study",
    "stream",
]

COEF_INDEX = {"beta": 1, "gamma": 2}


# --- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class Balanced:
    pass


@dataclass(frozen=True)
class Unbalanced:
    gamma: float = 2.0


@dataclass(frozen=True)
class SV1:
    sigma2: float = 1.0
    tau2: float = 0.1


@dataclass(frozen=True)
class SV2:
    rho: float = 0.1
    delta: float = math.log(2.0) / 2.0


@dataclass(frozen=True)
class SV3:
    sigma2: float = 1.0
    tau2: float = 0.1


@dataclass(frozen=True)
class SimulationConfig:
    """Settings of one size study; defaults follow the published design."""

    n_clusters: int = 14
    n: int = 2800
    balance: Balanced | Unbalanced = field(default_factory=Balanced)
    design: SV1 | SV2 | SV3 = field(default_factory=SV1)
    treated: tuple[int, ...] = (1,)
    alpha: float = 0.0
    beta: float = 0.0
    gamma_coef: float = 0.0
    replications: int = 200_000
    levels: tuple[float, ...] = (0.05,)
    seed: int = 0
    methods: tuple[str, ...] = DEFAULT_METHODS
    coefficients: tuple[str, ...] = ("beta", "gamma")
    redraw_x: bool = False

    def __post_init__(self):
        C = self.n_clusters
        if C < 2:
            raise ConfigError("need at least two clusters", field="n_clusters")
        if self.n < C:
            raise ConfigError("need n >= C", field="n")
        treated = tuple(int(c) for c in self.treated)
        object.__setattr__(self, "treated", treated)
        for c1 in treated:
            if not 1 <= c1 <= C - 1:
                raise ConfigError(f"treated count {c1} outside 1..{C - 1}", field="treated")
        if self.replications < 0:
            raise ConfigError("replications must be >= 0", field="replications")
        for a in self.levels:
            if not 0 < a < 1:
                raise ConfigError(f"level {a} outside (0, 1)", field="levels")
        for m in self.methods:
            try:
                parse_method(m)
            except ValueError as exc:
                raise ConfigError(str(exc), field="methods") from None
        for c in self.coefficients:
            if c not in COEF_INDEX:
                raise ConfigError(f"unknown coefficient {c!r}", field="coefficients")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits", field="seed")

    def sweep(self) -> "SimulationConfig":
        """The same study over every treated count 1..C-1."""
        return replace(self, treated=tuple(range(1, self.n_clusters)))


# --- data generation ----------------------------------------------------------


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based generator for the stream labelled ``key``."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))


def cluster_sizes(n_clusters: int, n: int, balance: Balanced | Unbalanced) -> np.ndarray:
    """Observations per cluster.

    Balanced designs need ``C | n``. The unbalanced rule is
    ``n_c = int(n exp(g c/C) / sum_d exp(g d/C))`` for ``c = 1..C-1`` with the
    last cluster taking the remainder.
    """
    C = n_clusters
    if n < C:
        raise NonpositiveSize("need n >= C", field="n")
    if isinstance(balance, Balanced):
        if n % C:
            raise NotDivisible(f"n={n} is not divisible by C={C}", field="n")
        return np.full(C, n // C)
    w = np.exp(balance.gamma * np.arange(1, C + 1) / C)
    sizes = np.floor(n * w[:-1] / w.sum()).astype(int)
    sizes = np.append(sizes, n - sizes.sum())
    if np.any(sizes <= 0):
        raise NonpositiveSize(f"imbalance gamma={balance.gamma} gives an empty cluster", field="balance")
    return sizes


def generate_design(config: SimulationConfig, treated_count: int, rng: np.random.Generator | None = None):
    """Regressors ``[1, d, x]`` and the cluster index for one treated count.

    ``x`` comes from ``rng`` if given, otherwise from the study's design stream
    (shared across treated counts unless ``redraw_x``).
    """
    sizes = cluster_sizes(config.n_clusters, config.n, config.balance)
    cluster_of = np.repeat(np.arange(config.n_clusters), sizes)
    if rng is None:
        rng = stream(config.seed, 0, treated_count if config.redraw_x else 0)
    x = rng.standard_normal(config.n)
    d = (cluster_of < treated_count).astype(float)
    X = np.column_stack([np.ones(config.n), d, x])
    return X, cluster_of


def _re_params(design, n_clusters: int):
    if isinstance(design, SV2):
        c = np.arange(1, n_clusters + 1)
        s2 = np.exp(2.0 * design.delta * (n_clusters - c) / (n_clusters - 1))
        return s2, design.rho * s2
    return np.full(n_clusters, design.sigma2), np.full(n_clusters, design.tau2)


def draw_errors(design, sizes, x, rng: np.random.Generator) -> np.ndarray:
    """One draw of the error vector for the given covariance design."""
    sizes = np.asarray(sizes)
    C = sizes.size
    cluster_of = np.repeat(np.arange(C), sizes)
    s2, t2 = _re_params(design, C)
    if np.any(s2 < 0) or np.any(t2 < 0):
        raise NonPsd("variance parameters must be nonnegative")
    n = cluster_of.size
    z = rng.standard_normal(n)
    u = rng.standard_normal(C)
    e = np.sqrt(s2)[cluster_of] * z + np.sqrt(t2)[cluster_of] * u[cluster_of]
    if isinstance(design, SV3):
        e += np.sqrt(0.5) * np.abs(np.asarray(x)) * rng.standard_normal(n)
    return e


def true_covariance(design, X: np.ndarray, cluster_of: np.ndarray) -> np.ndarray:
    """Exact ``(X'X)^{-1} X' Sigma X (X'X)^{-1}`` for the simulation design."""
    d = ClusterDesign(X, cluster_of)
    s2, t2 = _re_params(design, d.n_clusters)
    meat = np.einsum("c,cij->ij", s2, d.per_cluster_gram) + np.einsum(
        "c,ci,cj->ij", t2, d.Xtil, d.Xtil
    )
    if isinstance(design, SV3):
        x = X[:, 2]
        meat = meat + 0.5 * (X * (x * x)[:, None]).T @ X
    return d.gram_inv @ meat @ d.gram_inv


# --- the replication loop ------------------------------------------------------


def _run_block(config: SimulationConfig, treated_count: int, start: int, stop: int):
    """Replications ``start..stop-1`` for one treated count.

    Returns arrays indexed ``[rep, method, coef(, level)]``.
    """
    X, cluster_of = generate_design(config, treated_count)
    design = ClusterDesign(X, cluster_of)
    sizes = design.sizes
    specs = [parse_method(m) for m in config.methods]
    ells = [COEF_INDEX[c] for c in config.coefficients]
    truth = np.array([config.alpha, config.beta, config.gamma_coef])
    true_V = true_covariance(config.design, X, cluster_of) if any(s.name == "ORACLE" for s in specs) else None
    needs_moments = any(s.reference is not None and s.reference.value == "RV1" for s in specs)
    levels = np.asarray(config.levels)

    R, Mm, Kc, L = stop - start, len(specs), len(ells), levels.size
    reject = np.zeros((R, Mm, Kc, L), dtype=bool)
    dofs = np.full((R, Mm, Kc), np.nan)
    exists = np.zeros((R, Mm, Kc), dtype=bool)
    nonpos = np.zeros((R, Mm, Kc), dtype=bool)
    fallback = np.zeros((R, Mm, Kc), dtype=bool)

    mean = X @ truth
    for i, rep in enumerate(range(start, stop)):
        rng = stream(config.seed, 1, rep)
        y = mean + draw_errors(config.design, sizes, X[:, 2], rng)
        fit = design.fit(y)
        moments = None
        if needs_moments:
            try:
                moments = estimate_re_moments(fit)
            except EstimatorUndefined:
                moments = None
        for j, spec in enumerate(specs):
            outs = evaluate(fit, spec, ells, null_values=truth[ells], true_V=true_V, moments=moments)
            for c, o in enumerate(outs):
                if not o.exists:
                    continue
                exists[i, j, c] = True
                dofs[i, j, c] = o.dof
                fallback[i, j, c] = o.fallback
                if o.nonpositive_variance:
                    nonpos[i, j, c] = True
                else:
                    reject[i, j, c] = o.p_value < levels
    return reject, dofs, exists, nonpos, fallback


def _run_block_star(args):
    return _run_block(*args)


@dataclass
class SizeStudyResult:
    """Aggregated rejection rates and mean d.f. per (method, treated count, coefficient).

    ``size`` divides rejections by the replications in which the method
    existed (NaN if it never did); ``size_fig`` divides by all replications,
    which reports nonexistent methods as size zero. A nonpositive variance
    estimate counts as a non-rejection.
    """

    config: SimulationConfig
    rows: list[dict]
    elapsed: float = 0.0

    CSV_COLUMNS = (
        "method",
        "C1",
        "coefficient",
        "level",
        "size",
        "size_fig",
        "mean_dof",
        "n_exists",
        "n_fallback",
        "n_nonpositive",
        "replications",
    )

    def get(self, method: str, treated: int, coefficient: str = "beta", level: float | None = None) -> dict:
        if level is None:
            level = self.config.levels[0]
        for r in self.rows:
            if (
                r["method"] == method
                and r["C1"] == treated
                and r["coefficient"] == coefficient
                and r["level"] == level
            ):
                return r
        raise KeyError((method, treated, coefficient, level))

    def to_csv(self, path_or_buf) -> None:
        import csv

        def fmt(v):
            return repr(float(v)) if isinstance(v, (float, np.floating)) else v

        close = False
        if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
            path_or_buf = open(path_or_buf, "w", newline="")
            close = True
        try:
            w = csv.writer(path_or_buf, lineterminator="\r\n")
            w.writerow(self.CSV_COLUMNS)
            for r in self.rows:
                w.writerow([fmt(r[c]) for c in self.CSV_COLUMNS])
        finally:
            if close:
                path_or_buf.close()

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["balance"] = {"kind": type(self.config.balance).__name__, **asdict(self.config.balance)}
        cfg["design"] = {"kind": type(self.config.design).__name__, **asdict(self.config.design)}
        rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in self.rows]
        return {"config": cfg, "elapsed_seconds": self.elapsed, "results": rows}


def _aggregate(config, treated_count, reject, dofs, exists, nonpos, fallback) -> list[dict]:
    rows = []
    R = reject.shape[0]
    for j, m in enumerate(config.methods):
        name = parse_method(m).name
        for c, coef in enumerate(config.coefficients):
            ex = exists[:, j, c]
            n_ex = int(ex.sum())
            d = dofs[ex, j, c]
            mean_dof = float(np.sum(d) / n_ex) if n_ex else math.nan
            for li, level in enumerate(config.levels):
                rej = int(reject[:, j, c, li].sum())
                rows.append(
                    {
                        "method": name,
                        "C1": treated_count,
                        "coefficient": coef,
                        "level": float(level),
                        "size": rej / n_ex if n_ex else math.nan,
                        "size_fig": rej / R if R else math.nan,
                        "mean_dof": mean_dof,
                        "n_exists": n_ex,
                        "n_fallback": int(fallback[:, j, c].sum()),
                        "n_nonpositive": int(nonpos[:, j, c].sum()),
                        "replications": R,
                    }
                )
    return rows


def run_study(config: SimulationConfig, workers: int = 1) -> SizeStudyResult:
    """Run every treated count in ``config.treated``.

    Replications are split into contiguous blocks across ``workers``
    processes; the per-replication arrays are concatenated in replication
    order before reduction, so the result does not depend on ``workers``.
    """
    t0 = time.perf_counter()
    R = config.replications
    rows: list[dict] = []
    if R == 0:
        for c1 in config.treated:
            empty = (
                np.zeros((0, len(config.methods), len(config.coefficients), len(config.levels)), bool),
                np.zeros((0, len(config.methods), len(config.coefficients))),
                np.zeros((0, len(config.methods), len(config.coefficients)), bool),
                np.zeros((0, len(config.methods), len(config.coefficients)), bool),
                np.zeros((0, len(config.methods), len(config.coefficients)), bool),
            )
            rows += _aggregate(config, c1, *empty)
        return SizeStudyResult(config, rows, time.perf_counter() - t0)

    workers = max(1, int(workers))
    n_blocks = workers
    bounds = np.linspace(0, R, n_blocks + 1).astype(int)
    tasks = [
        (config, c1, int(a), int(b))
        for c1 in config.treated
        for a, b in zip(bounds[:-1], bounds[1:])
        if b > a
    ]
    if workers == 1:
        parts = [_run_block_star(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block_star, tasks))

    for c1 in config.treated:
        mine = [p for t, p in zip(tasks, parts) if t[1] == c1]
        merged = [np.concatenate([p[i] for p in mine]) for i in range(5)]
        rows += _aggregate(config, c1, *merged)
    return SizeStudyResult(config, rows, time.perf_counter() - t0)


# --- resampling protocol on user data -----------------------------------------


@dataclass(frozen=True)
class RandomWithReplacement:
    count: int


@dataclass(frozen=True)
class BySize:
    top: int
    bottom: int


def select_clusters(sizes: np.ndarray, scheme, rng: np.random.Generator) -> np.ndarray:
    """Indices of the sampled clusters (duplicates allowed for random draws)."""
    C = sizes.size
    if isinstance(scheme, RandomWithReplacement):
        return rng.integers(0, C, size=scheme.count)
    if isinstance(scheme, BySize):
        if scheme.top + scheme.bottom > C:
            raise ValueError(f"cannot select {scheme.top}+{scheme.bottom} of {C} clusters")
        order = np.argsort(-sizes, kind="stable")
        chosen = np.concatenate([order[: scheme.top], order[C - scheme.bottom :]])
        return np.sort(chosen)
    raise TypeError(f"unknown scheme {scheme!r}")


def resample_clusters(
    data: ClusteredDataset,
    scheme,
    within_fraction: float,
    treated_count: int,
    rng: np.random.Generator,
) -> ClusteredDataset:
    """Draw clusters, subsample within them, and append a fake policy dummy.

    Each sampled cluster (a duplicate draw is a new cluster) keeps
    ``round(within_fraction * n_c)`` observations drawn with replacement;
    ``within_fraction = 1`` keeps the cluster intact. The policy column is one
    on ``treated_count`` randomly chosen sampled clusters.
    """
    if not 0 < within_fraction <= 1:
        raise ValueError("within_fraction must lie in (0, 1]")
    sizes = data.cluster_sizes
    order = np.argsort(data.cluster_of, kind="stable")
    groups = np.split(order, np.cumsum(sizes)[:-1])
    picked = select_clusters(sizes, scheme, rng)
    if not 0 <= treated_count <= picked.size:
        raise ValueError(f"treated_count must lie in 0..{picked.size}")
    rows, new_cl = [], []
    for new, c in enumerate(picked):
        g = groups[c]
        if within_fraction < 1:
            m = int(round(within_fraction * g.size))
            if m == 0:
                raise EmptySubsample(f"cluster {c} with {g.size} observations rounds to zero")
            g = g[rng.integers(0, g.size, size=m)]
        rows.append(g)
        new_cl.append(np.full(g.size, new))
    rows = np.concatenate(rows)
    cl = np.concatenate(new_cl)
    treated = rng.choice(picked.size, size=treated_count, replace=False)
    policy = np.isin(cl, treated).astype(float)
    X = np.column_stack([data.X[rows], policy])
    return ClusteredDataset(data.y[rows], X, cl)


def resample_study(
    data: ClusteredDataset,
    scheme,
    within_fraction: float = 1.0,
    treated_count: int = 1,
    replications: int = 1000,
    methods=DEFAULT_METHODS,
    levels=(0.05,),
    seed: int = 0,
) -> list[dict]:
    """Repeated resample, fit and test of a zero-effect policy dummy.

    Replication ``r`` uses the stream ``(seed, 2, r)``. Returns one row per
    (method, level) with the rejection frequency among replications where
    the method existed, and the mean d.f.
    """
    specs = [parse_method(m) for m in methods]
    levels = np.asarray(levels, float)
    needs_moments = any(s.reference is not None and s.reference.value == "RV1" for s in specs)
    rej = np.zeros((len(specs), levels.size), int)
    n_ex = np.zeros(len(specs), int)
    n_np = np.zeros(len(specs), int)
    n_fb = np.zeros(len(specs), int)
    dsum = np.zeros(len(specs))
    for rep in range(replications):
        rng = stream(seed, 2, rep)
        sample = resample_clusters(data, scheme, within_fraction, treated_count, rng)
        ell = sample.X.shape[1] - 1
        try:
            fit = ClusterDesign(sample.X, sample.cluster_of).fit(sample.y)
        except RankDeficient:
            continue  # e.g. a policy column that is all ones
        moments = None
        if needs_moments:
            try:
                moments = estimate_re_moments(fit)
            except EstimatorUndefined:
                pass
        for j, spec in enumerate(specs):
            (o,) = evaluate(fit, spec, [ell], moments=moments)
            if not o.exists:
                continue
            n_ex[j] += 1
            dsum[j] += o.dof
            n_fb[j] += o.fallback
            if o.nonpositive_variance:
                n_np[j] += 1
            else:
                rej[j] += o.p_value < levels
    rows = []
    for j, spec in enumerate(specs):
        for li, a in enumerate(levels):
            rows.append(
                {
                    "method": spec.name,
                    "level": float(a),
                    "rejection_rate": float(rej[j, li] / n_ex[j]) if n_ex[j] else math.nan,
                    "mean_dof": float(dsum[j] / n_ex[j]) if n_ex[j] else math.nan,
                    "n_exists": int(n_ex[j]),
                    "n_fallback": int(n_fb[j]),
                    "n_nonpositive": int(n_np[j]),
                    "replications": int(replications),
                }
            )
    return rows
