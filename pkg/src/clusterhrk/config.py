"""INI study configuration.

Example::

    [study]
    n_clusters = 14
    n = 2800
    treated = all          ; or a list such as 1, 7, 13
    replications = 200000
    seed = 0
    levels = 0.05
    methods = STATA, LZIK, UV1(RV0), UV1(RV1)
    coefficients = beta, gamma
    alpha = 0
    beta = 0
    gamma = 0
    redraw_x = false

    [balance]
    kind = balanced        ; or unbalanced, with gamma = 2.0

    [design]
    kind = SV1             ; SV1/SV3: sigma2, tau2   SV2: rho, delta

Every key is optional; omitted keys take the defaults of
:class:`~clusterhrk.simulation.SimulationConfig`.
"""
from __future__ import annotations

import configparser
import re
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .simulation import SV1, SV2, SV3, Balanced, SimulationConfig, Unbalanced, cluster_sizes

__all__ = ["load_config", "parse_config", "builtin_config_path", "BUILTIN_CONFIGS"]

BUILTIN_CONFIGS = ("full_design", "smoke")

_KEYS = {
    "study": {
        "n_clusters", "n", "treated", "replications", "seed", "levels", "methods",
        "coefficients", "alpha", "beta", "gamma", "redraw_x",
    },
    "balance": {"kind", "gamma"},
    "design": {"kind", "sigma2", "tau2", "rho", "delta"},
}
_KEY_LINE = re.compile(r"^\s*([A-Za-z0-9_]+)\s*[=:]")
_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")


def builtin_config_path(name: str) -> Path:
    return Path(str(resources.files("clusterhrk") / "configs" / f"{name}.ini"))


def _line_index(text: str) -> dict[tuple[str, str], int]:
    where: dict[tuple[str, str], int] = {}
    section = ""
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_LINE.match(line)
        if m:
            section = m.group(1).strip().lower()
            where[(section, "")] = no
            continue
        m = _KEY_LINE.match(line)
        if m:
            where.setdefault((section, m.group(1).lower()), no)
    return where


def parse_config(text: str) -> SimulationConfig:
    """Build a :class:`SimulationConfig` from INI text.

    Raises
    ------
    ConfigError
        With ``field`` set to ``section.key`` and ``line`` to its line number.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", line=getattr(exc, "lineno", None)) from None
    lines = _line_index(text)

    def fail(section, key, msg):
        return ConfigError(msg, field=f"{section}.{key}" if key else section, line=lines.get((section, key)))

    for section in cp.sections():
        if section not in _KEYS:
            raise fail(section, "", f"unknown section [{section}]")
        for key in cp[section]:
            if key not in _KEYS[section]:
                raise fail(section, key, f"unknown key {key!r} in [{section}]")

    def get(section, key, conv, default=None):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except (TypeError, ValueError) as exc:
            raise fail(section, key, f"bad value {raw!r}: {exc}") from None

    def as_list(conv):
        return lambda raw: tuple(conv(p.strip()) for p in raw.split(",") if p.strip())

    def as_bool(raw):
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected true or false")

    kw = {}
    for key, conv in (
        ("n_clusters", int),
        ("n", int),
        ("replications", int),
        ("seed", int),
        ("levels", as_list(float)),
        ("methods", as_list(str)),
        ("coefficients", as_list(str)),
        ("alpha", float),
        ("beta", float),
        ("redraw_x", as_bool),
    ):
        v = get("study", key, conv)
        if v is not None:
            kw[key] = v
    g = get("study", "gamma", float)
    if g is not None:
        kw["gamma_coef"] = g

    kind = get("balance", "kind", str.lower, "balanced")
    if kind == "balanced":
        kw["balance"] = Balanced()
    elif kind == "unbalanced":
        kw["balance"] = Unbalanced(get("balance", "gamma", float, 2.0))
    else:
        raise fail("balance", "kind", f"unknown balance kind {kind!r}")

    kind = get("design", "kind", str.upper, "SV1")
    if kind in ("SV1", "SV3"):
        cls = SV1 if kind == "SV1" else SV3
        kw["design"] = cls(get("design", "sigma2", float, 1.0), get("design", "tau2", float, 0.1))
    elif kind == "SV2":
        d = SV2()
        kw["design"] = SV2(get("design", "rho", float, d.rho), get("design", "delta", float, d.delta))
    else:
        raise fail("design", "kind", f"unknown design kind {kind!r}")

    treated = get("study", "treated", str, None)
    try:
        if treated is not None and treated.strip().lower() != "all":
            kw["treated"] = as_list(int)(treated)
    except ValueError as exc:
        raise fail("study", "treated", f"bad value {treated!r}: {exc}") from None
    try:
        cfg = SimulationConfig(**kw)
        if treated is not None and treated.strip().lower() == "all":
            cfg = cfg.sweep()
        cluster_sizes(cfg.n_clusters, cfg.n, cfg.balance)
    except ConfigError as exc:
        if exc.field == "balance":
            raise fail("balance", "gamma", exc.message) from None
        key = {"gamma_coef": "gamma"}.get(exc.field, exc.field)
        raise fail("study", key, exc.message) from None
    return cfg


def load_config(path_or_name) -> SimulationConfig:
    """Read a config file, or one of :data:`BUILTIN_CONFIGS` by name."""
    p = Path(path_or_name)
    if not p.exists() and str(path_or_name) in BUILTIN_CONFIGS:
        p = builtin_config_path(str(path_or_name))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)
