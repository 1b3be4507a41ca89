"""``clusterhrk`` command line.

Subcommands
-----------
estimate   variance estimates, d.f. and t-tests on a clustered CSV
simulate   size study from an INI config (see :mod:`clusterhrk.config`)
resample   repeated cluster resampling with a fake policy dummy
panel      homogeneous panel estimator on a long-format CSV
generate   one synthetic data set from a config

Exit status: 0 if at least one method produced a result, 2 on input or
configuration errors, 3 if every requested method failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .core import ClusterDesign, ClusteredDataset, labels_to_index
from .dof import estimate_re_moments
from .errors import ClusterHRKError, ConfigError, EstimatorUndefined, ParseError
from .panel import PanelDataset, panel_fit, panel_plugin, panel_unbiased
from .pipeline import DEFAULT_METHODS, evaluate, parse_method
from .simulation import (
    BySize,
    RandomWithReplacement,
    cluster_sizes,
    draw_errors,
    generate_design,
    resample_study,
    run_study,
    stream,
)

__all__ = ["main", "RunManifest", "read_table", "cmd_estimate", "cmd_simulate", "cmd_resample"]

EXIT_OK, EXIT_INPUT, EXIT_ALL_FAILED = 0, 2, 3


@dataclass
class RunManifest:
    subcommand: str
    inputs: list[str] = field(default_factory=list)
    config: str | None = None
    outputs: list[str] = field(default_factory=list)
    seed: int | None = None
    version: str = __version__
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    elapsed_seconds: float = 0.0
    options: dict = field(default_factory=dict)


# --- input ---------------------------------------------------------------------


def _number(cell: str, row: int, col: str) -> float:
    s = cell.strip()
    try:
        if "," in s or "_" in s:
            raise ValueError
        v = float(s)
    except ValueError:
        raise ParseError(f"row {row}, column {col!r}: not a number: {cell!r}") from None
    if not math.isfinite(v):
        raise ParseError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def read_table(path, text_columns=("cluster",)) -> tuple[list[str], dict[str, list]]:
    """Read a headered CSV; ``text_columns`` stay strings, the rest become floats."""
    try:
        fh = sys.stdin if str(path) == "-" else open(path, newline="")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file") from None
        if len(set(header)) != len(header):
            raise ParseError("duplicate column names")
        cols: dict[str, list] = {h: [] for h in header}
        for no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"row {no}: expected {len(header)} fields, got {len(row)}")
            for h, cell in zip(header, row):
                cols[h].append(cell.strip() if h in text_columns else _number(cell, no, h))
    return header, cols


def _regression_inputs(path, intercept: bool):
    header, cols = read_table(path)
    for need in ("y", "cluster"):
        if need not in cols:
            raise ParseError(f"missing required column {need!r}")
    names = [h for h in header if h not in ("y", "cluster")]
    if intercept:
        names = ["const"] + names
        cols["const"] = [1.0] * len(cols["y"])
    if not names:
        raise ParseError("no regressors (use the intercept or add columns)")
    y = np.array(cols["y"], float)
    X = np.column_stack([np.array(cols[h], float) for h in names])
    cl, labels = labels_to_index(cols["cluster"])
    return ClusteredDataset(y, X, cl), names, labels


def _methods(raw: str | None, dof: str) -> list[str]:
    if raw is None:
        return list(DEFAULT_METHODS)
    out = []
    for m in (p.strip() for p in raw.split(",")):
        if not m:
            continue
        if m.upper() in ("UV1", "UV2", "UV3"):
            m = f"{m.upper()}({dof.upper()})"
        try:
            out.append(parse_method(m).name)
        except ValueError as exc:
            raise ConfigError(str(exc), field="methods") from None
    if not out:
        raise ConfigError("no methods selected", field="methods")
    return out


def _levels(raw: str) -> tuple[float, ...]:
    try:
        levels = tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad levels {raw!r}", field="levels") from None
    if not levels or any(not 0 < a < 1 for a in levels):
        raise ConfigError(f"levels must lie in (0, 1): {raw!r}", field="levels")
    return levels


# --- output --------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _write_rows(rows: list[dict], columns, buf) -> None:
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])


def _emit(rows, columns, out: str | None, manifest: RunManifest, extra: dict | None = None) -> None:
    """Write ``<out>.csv`` and ``<out>.json`` (results plus manifest), or CSV to stdout."""
    if out is None:
        _write_rows(rows, columns, sys.stdout)
        return
    base = Path(out)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    manifest.outputs = [str(csv_path), str(json_path)]
    with open(csv_path, "w", newline="") as fh:
        _write_rows(rows, columns, fh)
    doc = {"manifest": asdict(manifest), "results": rows, **(extra or {})}
    json_path.write_text(json.dumps(_jsonable(doc), indent=2) + "\n")


# --- subcommands ---------------------------------------------------------------

ESTIMATE_COLUMNS = (
    "coefficient", "method", "estimate", "std_error", "variance", "dof", "t_stat", "p_value",
    "reject", "negative_variance", "dof_clamped", "fallback", "error",
)


def estimate_rows(data: ClusteredDataset, names, methods, levels, coefficients=None, psd_repair="off"):
    """Rows of the ``estimate`` table; also used for round-trip checks."""
    fit = ClusterDesign(data.X, data.cluster_of).fit(data.y)
    ells = [names.index(c) for c in coefficients] if coefficients else list(range(len(names)))
    moments = None
    try:
        moments = estimate_re_moments(fit)
    except EstimatorUndefined:
        pass
    rows, any_ok = [], False
    for m in methods:
        outs = evaluate(fit, parse_method(m), ells, moments=moments, psd_repair=psd_repair)
        for ell, o in zip(ells, outs):
            ok = o.exists and not o.nonpositive_variance
            any_ok |= ok
            rows.append(
                {
                    "coefficient": names[ell],
                    "method": m,
                    "estimate": float(fit.beta_hat[ell]),
                    "std_error": math.sqrt(o.variance) if ok else math.nan,
                    "variance": o.variance,
                    "dof": o.dof,
                    "t_stat": o.t_stat,
                    "p_value": o.p_value,
                    "reject": ";".join(f"{a:g}" for a in levels if ok and o.p_value < a),
                    "negative_variance": o.nonpositive_variance,
                    "dof_clamped": o.dof_clamped,
                    "fallback": o.fallback,
                    "error": o.error,
                }
            )
    return rows, any_ok


def cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    methods = _methods(args.methods, args.dof)
    levels = _levels(args.levels)
    data, names, _ = _regression_inputs(args.input, not args.no_intercept)
    coefs = [c.strip() for c in args.coefficients.split(",")] if args.coefficients else None
    for c in coefs or ():
        if c not in names:
            raise ConfigError(f"unknown coefficient {c!r}; have {', '.join(names)}", field="coefficients")
    rows, any_ok = estimate_rows(data, names, methods, levels, coefs, args.psd_repair)
    manifest = RunManifest("estimate", inputs=[str(args.input)], options=_options(args))
    manifest.elapsed_seconds = time.perf_counter() - t0
    _emit(rows, ESTIMATE_COLUMNS, args.out, manifest)
    return EXIT_OK if any_ok else EXIT_ALL_FAILED


def cmd_simulate(args) -> int:
    from dataclasses import replace

    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.methods is not None:
        over["methods"] = tuple(_methods(args.methods, args.dof))
    if args.levels is not None:
        over["levels"] = _levels(args.levels)
    if args.replications is not None:
        over["replications"] = args.replications
    if over:
        cfg = replace(cfg, **over)
    res = run_study(cfg, workers=args.threads)
    manifest = RunManifest("simulate", config=str(args.config), seed=cfg.seed, options=_options(args))
    manifest.elapsed_seconds = res.elapsed
    d = res.to_dict()
    _emit(res.rows, res.CSV_COLUMNS, args.out, manifest, {"config": d["config"]})
    exists = any(r["n_exists"] > 0 for r in res.rows)
    return EXIT_OK if exists or cfg.replications == 0 else EXIT_ALL_FAILED


RESAMPLE_COLUMNS = (
    "method", "level", "rejection_rate", "mean_dof", "n_exists", "n_fallback", "n_nonpositive", "replications",
)


def _scheme(raw: str):
    kind, _, params = raw.partition(":")
    try:
        nums = [int(p) for p in params.split(",") if p.strip()]
        if kind == "random" and len(nums) == 1:
            return RandomWithReplacement(nums[0])
        if kind == "bysize" and len(nums) == 2:
            return BySize(*nums)
    except ValueError:
        pass
    raise ConfigError(f"bad scheme {raw!r}; use random:COUNT or bysize:TOP,BOTTOM", field="scheme")


def cmd_resample(args) -> int:
    t0 = time.perf_counter()
    methods = _methods(args.methods, args.dof)
    levels = _levels(args.levels)
    data, _, _ = _regression_inputs(args.input, not args.no_intercept)
    scheme = _scheme(args.scheme)
    try:
        rows = resample_study(
            data, scheme, args.within_fraction, args.treated, args.replications, methods, levels, args.seed
        )
    except ValueError as exc:
        if isinstance(exc, ClusterHRKError):
            raise
        raise ConfigError(str(exc)) from None
    manifest = RunManifest("resample", inputs=[str(args.input)], seed=args.seed, options=_options(args))
    manifest.elapsed_seconds = time.perf_counter() - t0
    _emit(rows, RESAMPLE_COLUMNS, args.out, manifest)
    return EXIT_OK if any(r["n_exists"] > 0 for r in rows) or args.replications == 0 else EXIT_ALL_FAILED


PANEL_COLUMNS = ("coefficient", "method", "estimate", "std_error", "variance", "error")


def cmd_panel(args) -> int:
    t0 = time.perf_counter()
    header, cols = read_table(args.input, text_columns=("unit", "wave"))
    for need in ("unit", "wave", "y"):
        if need not in cols:
            raise ParseError(f"missing required column {need!r}")
    names = [h for h in header if h not in ("unit", "wave", "y")]
    if not args.no_intercept:
        names = ["const"] + names
        cols["const"] = [1.0] * len(cols["y"])
    X = np.column_stack([np.array(cols[h], float) for h in names])
    data = PanelDataset.from_long(cols["unit"], cols["wave"], cols["y"], X)
    fit = panel_fit(data)
    rows, lambdas, any_ok = [], {}, False
    for label, fn in (("unbiased", panel_unbiased), ("plugin", panel_plugin)):
        try:
            lam, v = fn(fit)
        except EstimatorUndefined as exc:
            rows += [{"coefficient": c, "method": label, "error": type(exc).__name__} for c in names]
            continue
        lambdas[label] = lam.tolist()
        for ell, c in enumerate(names):
            var = float(v.V[ell, ell])
            any_ok |= var > 0
            rows.append(
                {
                    "coefficient": c,
                    "method": label,
                    "estimate": float(fit.beta_hat[ell]),
                    "std_error": math.sqrt(var) if var > 0 else math.nan,
                    "variance": var,
                    "error": "" if var > 0 else "NonpositiveVariance",
                }
            )
    manifest = RunManifest("panel", inputs=[str(args.input)], options=_options(args))
    manifest.elapsed_seconds = time.perf_counter() - t0
    _emit(rows, PANEL_COLUMNS, args.out, manifest, {"lambda_hat": lambdas, "N": data.N, "T": data.T})
    return EXIT_OK if any_ok else EXIT_ALL_FAILED


def generate_rows(cfg, treated: int, replication: int) -> list[dict]:
    """Synthetic data for one (treated count, replication) of a study."""
    X, cluster_of = generate_design(cfg, treated)
    sizes = cluster_sizes(cfg.n_clusters, cfg.n, cfg.balance)
    truth = np.array([cfg.alpha, cfg.beta, cfg.gamma_coef])
    y = X @ truth + draw_errors(cfg.design, sizes, X[:, 2], stream(cfg.seed, 1, replication))
    return [
        {"y": float(y[i]), "cluster": int(cluster_of[i]), "d": float(X[i, 1]), "x": float(X[i, 2])}
        for i in range(cfg.n)
    ]


def cmd_generate(args) -> int:
    from dataclasses import replace

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if not 1 <= args.treated <= cfg.n_clusters - 1:
        raise ConfigError(f"treated must lie in 1..{cfg.n_clusters - 1}", field="treated")
    rows = generate_rows(cfg, args.treated, args.replication)
    if args.out is None:
        _write_rows(rows, ("y", "cluster", "d", "x"), sys.stdout)
    else:
        csv_path, json_path = args.out + ".csv", args.out + ".json"
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            _write_rows(rows, ("y", "cluster", "d", "x"), fh)
        manifest = RunManifest("generate", config=str(args.config), outputs=[csv_path, json_path], seed=cfg.seed,
                               options=_options(args))
        Path(json_path).write_text(json.dumps({"manifest": asdict(manifest)}, indent=2) + "\n")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------


def _options(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clusterhrk", description="Unbiased cluster-robust variance estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--methods", help=f"comma list; default {','.join(DEFAULT_METHODS)}")
        sp.add_argument("--dof", choices=("rv0", "rv1"), default="rv1",
                        help="reference model for bare UV1/UV2/UV3 names (default rv1)")
        sp.add_argument("--out", help="output prefix; writes PREFIX.csv and PREFIX.json")
        if seed:
            sp.add_argument("--seed", type=int)

    e = sub.add_parser("estimate", help="estimate on a clustered CSV (columns y, cluster, regressors)")
    e.add_argument("input")
    common(e)
    e.add_argument("--levels", default="0.05")
    e.add_argument("--coefficients", help="comma list of regressor names (default all)")
    e.add_argument("--no-intercept", action="store_true")
    e.add_argument("--psd-repair", choices=("off", "truncate"), default="off")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="run a size study from an INI config")
    s.add_argument("config", help="config path, or 'full_design' / 'smoke'")
    common(s, seed=True)
    s.add_argument("--levels")
    s.add_argument("--replications", type=int)
    s.add_argument("--threads", type=int, default=1, help="worker processes")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("resample", help="resampling protocol with a fake policy dummy")
    r.add_argument("input")
    common(r)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--levels", default="0.05")
    r.add_argument("--scheme", default="random:14", help="random:COUNT or bysize:TOP,BOTTOM")
    r.add_argument("--within-fraction", type=float, default=1.0)
    r.add_argument("--treated", type=int, default=1, help="sampled clusters given the policy")
    r.add_argument("--replications", type=int, default=1000)
    r.add_argument("--no-intercept", action="store_true")
    r.set_defaults(func=cmd_resample)

    pa = sub.add_parser("panel", help="panel estimator on a long CSV (columns unit, wave, y, regressors)")
    pa.add_argument("input")
    pa.add_argument("--out")
    pa.add_argument("--no-intercept", action="store_true")
    pa.set_defaults(func=cmd_panel)

    g = sub.add_parser("generate", help="write one synthetic data set")
    g.add_argument("config")
    g.add_argument("--treated", type=int, default=1)
    g.add_argument("--replication", type=int, default=0)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output prefix; writes PREFIX.csv and PREFIX.json")
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ClusterHRKError, ValueError) as exc:
        if isinstance(exc, EstimatorUndefined):
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_ALL_FAILED
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
