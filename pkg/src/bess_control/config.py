"""YAML run configuration: defaults, validation and a generated reference page."""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

SUBCOMMANDS = ("simulate", "solve", "bound", "regime", "evaluate", "gap")
STOCHASTIC = ("simulate", "bound", "regime", "evaluate", "gap")

# (default, description) per key; the reference page is generated from this table
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "C": (1.0, "capacity of every battery"),
        "L": (1.0, "bound on the absolute charge rate"),
        "m": (1, "number of batteries"),
        "y0": (0.5, "initial charge, scalar or one value per battery"),
        "gamma": (0.0, "weight of the squared deviation from the moving average"),
        "phi_hat": (False, "add the default U-shaped regime preference"),
    },
    "market": {
        "preset": ("log-gbm", "constant | log-gbm | affine"),
        "x0": ([0.0, 0.0], "initial log price and log spot (plus extra factors)"),
        "nu": ([0.0, 0.0], "log-gbm: drift of each log factor"),
        "sigma": ([0.2, 0.2], "log-gbm: volatility of each log factor"),
        "corr": (None, "log-gbm: correlation matrix, identity when null"),
        "a": (None, "affine: drift intercept vector"),
        "B": (None, "affine: drift matrix"),
        "vol": (None, "affine/constant: constant diffusion matrix"),
        "drift": (None, "constant: constant drift vector"),
    },
    "time": {
        "T": (1.0, "horizon"),
        "N": (50, "number of time steps"),
    },
    "simulate": {
        "n_paths": (10000, "Monte-Carlo paths"),
        "seed": (None, "base seed; required by stochastic subcommands"),
    },
    "solve": {
        "eps": (0.05, "width of the boundary ramps, in (0, C/2)"),
        "n_y": (21, "charge nodes on [0, C]"),
        "factors": (None, "0-based factor indices with a grid axis; null grids all random ones"),
        "n_factor": (15, "nodes per factor axis"),
        "width_sd": (4.0, "factor box half-width in pilot standard deviations"),
        "n_controls": (21, "equispaced controls per battery"),
        "controls": (None, "explicit absolute control mesh, overrides n_controls"),
        "substeps": (1, "explicit substeps per time step, or 'auto'"),
        "mollified": (False, "convolve the ramps with the bump kernel and cap rewards"),
        "eps_schedule": (None, "decreasing list of eps values for the limit estimate"),
        "layers": ("first", "value/policy layers written: first | all"),
    },
    "evaluate": {
        "policy": ("hjb", "hjb | zero"),
        "lookup": ("linear", "policy interpolation: linear | nearest"),
    },
    "bound": {
        "k": (0, "number of backward integrations of the martingale"),
        "pieces": (8, "piecewise-constant segments of the integrand"),
        "weight": ("none", "state weight of the integrand: none | spot | log-spot"),
        "cap": (4.0, "bound on the state weight"),
        "theta": (None, "integrand coefficients (pieces x m x n); zeros when null"),
        "search": (False, "run the coordinate search over the coefficients"),
        "budget": (40, "maximum bound evaluations during the search"),
        "step": (1.0, "initial coordinate step"),
        "method": ("auto", "pathwise optimiser: auto | dp | lp | sqp | pga"),
        "n_paths": (None, "paths for the bound, defaults to simulate.n_paths"),
    },
    "regime": {
        "T": (1.0, "horizon"),
        "C": (1.0, "capacity"),
        "L": (100.0, "rate magnitude of the bang-bang candidates"),
        "N": (1000, "time steps"),
        "n_paths": (2000, "number of random candidates"),
        "seed": (None, "candidate seed; falls back to simulate.seed"),
        "v0": (None, "initial charge, C/2 when null"),
    },
}


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[0]) for k, v in keys.items()}
            for sec, keys in SCHEMA.items()}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for sec, vals in (override or {}).items():
        if sec == "run":
            continue  # manifest bookkeeping
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section {sec!r}")
        if not isinstance(vals, dict):
            raise ConfigError(f"section {sec!r} must be a mapping")
        for k, v in vals.items():
            if k not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{k}")
            out[sec][k] = v
    return out


def load(path) -> dict:
    """Defaults overlaid with the YAML file at ``path`` (which may be a manifest)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping of sections")
    return merge(defaults(), raw)


def _positive(cfg, sec, key, kind=float):
    v = cfg[sec][key]
    try:
        ok = kind(v) == v and v > 0
    except (TypeError, ValueError):
        ok = False
    if not ok:
        raise ConfigError(f"{sec}.{key} must be a positive {kind.__name__}, got {v!r}")


def validate(cfg: dict, subcommand: str) -> dict:
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    for key in ("C", "L"):
        _positive(cfg, "model", key)
    _positive(cfg, "model", "m", int)
    _positive(cfg, "time", "T")
    _positive(cfg, "time", "N", int)
    _positive(cfg, "simulate", "n_paths", int)
    for key in ("T", "C", "L"):
        _positive(cfg, "regime", key)
    for key in ("N", "n_paths"):
        _positive(cfg, "regime", key, int)
    if cfg["market"]["preset"] not in ("constant", "log-gbm", "affine"):
        raise ConfigError(f"unknown market preset {cfg['market']['preset']!r}")
    eps, C = cfg["solve"]["eps"], cfg["model"]["C"]
    if subcommand in ("solve", "evaluate", "gap") and not (0 < eps < C / 2):
        raise ConfigError(f"solve.eps must lie in (0, C/2), got {eps}")
    k = cfg["bound"]["k"]
    if not (isinstance(k, int) and k >= 0):
        raise ConfigError(f"bound.k must be a nonnegative integer, got {k!r}")
    if cfg["bound"]["method"] not in ("auto", "dp", "lp", "sqp", "pga"):
        raise ConfigError(f"unknown bound.method {cfg['bound']['method']!r}")
    if cfg["evaluate"]["policy"] not in ("hjb", "zero"):
        raise ConfigError("evaluate.policy must be 'hjb' or 'zero'")
    if cfg["solve"]["layers"] not in ("first", "all"):
        raise ConfigError("solve.layers must be 'first' or 'all'")
    sub = cfg["solve"]["substeps"]
    if sub != "auto" and not (isinstance(sub, int) and sub >= 1):
        raise ConfigError("solve.substeps must be a positive integer or 'auto'")
    if subcommand in STOCHASTIC:
        seed = cfg["regime"]["seed"] if subcommand == "regime" else None
        if seed is None:
            seed = cfg["simulate"]["seed"]
        if seed is None:
            raise ConfigError(f"subcommand {subcommand!r} needs a seed (--seed or simulate.seed)")
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


def reference() -> str:
    """Markdown page listing every key with its default."""
    lines = ["# Configuration reference", "",
             "Every key below may appear in the YAML config under its section. "
             "Unlisted keys are rejected.", ""]
    for sec, keys in SCHEMA.items():
        lines += [f"## `{sec}`", "", "| key | default | meaning |", "|---|---|---|"]
        for k, (default, text) in keys.items():
            shown = yaml.safe_dump(default, default_flow_style=True).strip()
            shown = shown.removesuffix("...").strip()
            lines.append(f"| `{k}` | `{shown}` | {text} |")
        lines.append("")
    return "\n".join(lines)


if __name__ == "__main__":
    print(reference())
