"""Command-line entry point: ``bess <subcommand> [--config FILE] [overrides]``.

Every run writes its CSVs plus ``manifest.yaml`` into the output directory.
The manifest holds the resolved configuration, so passing it back through
``--config`` repeats the run exactly.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .config import ConfigError, dump, load, defaults, merge, validate
from .dual_bound import (MartingaleSpec, SpecMismatch, duality_gap, minimize_over_v,
                         upper_bound, write_bound_csv, write_bound_paths_csv)
from .hjb_solver import (DimensionError, StabilityError, StateGrid, eps_refine,
                         evaluate_policy, solve, write_policy_csv, write_value_csv, zero_policy)
from .market_sim import SimulationError, simulate, spec_from_config, write_ensemble_csv
from .model_core import InadmissibleControl, ModelParams, RegimeCriterion, TimeGrid, _write_rows, fmt
from .regime import ExperimentConfig, run_experiment, write_best_path_csv, write_summary_csv
from .smoothing import SmoothedModel

log = logging.getLogger("bess_control")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 2, 3, 4


class InvariantViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# instance construction

def _params(cfg):
    mc = cfg["model"]
    return ModelParams(float(mc["C"]), float(mc["L"]), int(mc["m"]))


def _y0(cfg):
    m = int(cfg["model"]["m"])
    y0 = np.broadcast_to(np.asarray(cfg["model"]["y0"], dtype=float), (m,)).copy()
    if np.any(y0 < 0) or np.any(y0 > cfg["model"]["C"]):
        raise ConfigError("model.y0 must lie in [0, C]")
    return y0


def _crit(cfg):
    return RegimeCriterion(float(cfg["model"]["gamma"]), bool(cfg["model"]["phi_hat"]))


def _spec(cfg):
    market = {k: v for k, v in cfg["market"].items() if v is not None}
    try:
        return spec_from_config(market)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad market section: {exc}") from exc


def _tgrid(cfg):
    return TimeGrid(float(cfg["time"]["T"]), int(cfg["time"]["N"]))


def _seed(cfg):
    return int(cfg["simulate"]["seed"])


def _solve(cfg):
    params, spec, tgrid, crit = _params(cfg), _spec(cfg), _tgrid(cfg), _crit(cfg)
    sc = cfg["solve"]
    seed = cfg["simulate"]["seed"] or 0
    sgrid = StateGrid.build(spec, tgrid, params, int(sc["n_y"]), sc["factors"],
                            int(sc["n_factor"]), crit.needs_cma, float(sc["width_sd"]),
                            seed=int(seed))
    model = SmoothedModel(params, float(sc["eps"]), crit, bool(sc["mollified"]))
    kw = dict(controls=sc["controls"], n_controls=int(sc["n_controls"]))
    substeps = sc["substeps"]
    if substeps == "auto":
        try:
            vg, pol = solve(spec, sgrid, tgrid, model, substeps=1, **kw)
            return spec, sgrid, vg, pol, kw | {"substeps": 1}
        except StabilityError as exc:
            substeps = exc.required_substeps
            log.info("raising substeps to %d", substeps)
    kw["substeps"] = int(substeps)
    vg, pol = solve(spec, sgrid, tgrid, model, **kw)
    return spec, sgrid, vg, pol, kw


def _ensemble(cfg, spec, tgrid, threads, n_paths=None):
    n = int(n_paths or cfg["simulate"]["n_paths"])
    return simulate(spec, tgrid, n, _seed(cfg), threads)


def _kv(path, pairs):
    _write_rows(path, ["key", "value"],
                [[k, fmt(v) if isinstance(v, (float, np.floating)) else str(v)] for k, v in pairs])


# ---------------------------------------------------------------------------
# subcommands; each returns the list of files written

def cmd_simulate(cfg, out: Path, threads: int):
    spec, tgrid = _spec(cfg), _tgrid(cfg)
    ens = _ensemble(cfg, spec, tgrid, threads)
    write_ensemble_csv(out / "ensemble.csv", ens)
    ST = ens.S[:, -1]
    se = ST.std(ddof=1) / np.sqrt(ST.size) if ST.size > 1 else 0.0
    _kv(out / "simulate_summary.csv", [("n_paths", len(ens)), ("mean_S_T", float(ST.mean())),
                                       ("se_S_T", float(se))])
    print(f"simulated {len(ens)} paths; mean S(T) = {ST.mean():.6g} +- {se:.3g}")
    return ["ensemble.csv", "simulate_summary.csv"]


def cmd_solve(cfg, out: Path, threads: int):
    spec, sgrid, vg, pol, kw = _solve(cfg)
    layers = [0] if cfg["solve"]["layers"] == "first" else None
    write_value_csv(out / "value.csv", vg, layers)
    write_policy_csv(out / "policy.csv", pol, layers)
    y0 = _y0(cfg)
    v0 = vg.at(sgrid.state_point(spec.x0, y0))
    pairs = [("value_at_start", v0), ("eps", float(cfg["solve"]["eps"])),
             ("substeps", kw["substeps"]), ("grid_shape", "x".join(map(str, sgrid.shape)))]
    files = ["value.csv", "policy.csv", "solve_summary.csv"]
    schedule = cfg["solve"]["eps_schedule"]
    if schedule:
        ref = eps_refine(spec, sgrid, _tgrid(cfg), _params(cfg), schedule, y0, _crit(cfg),
                         bool(cfg["solve"]["mollified"]), **kw)
        rows = [[fmt(e), fmt(v)] for e, v in zip(ref.eps, ref.values)]
        _write_rows(out / "eps.csv", ["eps", "value"], rows)
        pairs += [("eps_limit", ref.limit), ("eps_ratio", ref.observed_ratio)]
        for w in ref.warnings:
            log.warning("eps refinement: %s", w)
        files.append("eps.csv")
    _kv(out / "solve_summary.csv", pairs)
    print(f"value at start = {v0:.10g}")
    return files


def _policy(cfg):
    if cfg["evaluate"]["policy"] == "zero":
        params, spec, tgrid = _params(cfg), _spec(cfg), _tgrid(cfg)
        sgrid = StateGrid.build(spec, tgrid, params, int(cfg["solve"]["n_y"]), (), 2)
        return spec, zero_policy(sgrid, tgrid, params)
    spec, _, _, pol, _ = _solve(cfg)
    return spec, pol


def _evaluate(cfg, spec, pol, ens, threads):
    return evaluate_policy(pol, ens, _y0(cfg), _crit(cfg), cfg["evaluate"]["lookup"], threads)


def cmd_evaluate(cfg, out: Path, threads: int):
    spec, pol = _policy(cfg)
    ens = _ensemble(cfg, spec, _tgrid(cfg), threads)
    res = _evaluate(cfg, spec, pol, ens, threads)
    _kv(out / "evaluate.csv", [("policy", cfg["evaluate"]["policy"]), ("mean", res.mean),
                               ("se", res.se), ("n_paths", len(ens)),
                               ("n_clamped", res.n_clamped)])
    _write_rows(out / "evaluate_paths.csv", ["path_id", "payoff"],
                [[str(i), fmt(v)] for i, v in enumerate(res.per_path)])
    print(f"policy value = {res.mean:.8g} +- {res.se:.3g}")
    return ["evaluate.csv", "evaluate_paths.csv"]


def _bound(cfg, spec, ens, out: Path, threads):
    bc = cfg["bound"]
    params, crit = _params(cfg), _crit(cfg)
    if crit.use_phi_hat or crit.gamma > 0:
        log.warning("the regime term is not concave; pathwise maxima are local, so the "
                    "reported bound may fall below the optimum")
    if bc["theta"] is None:
        fam = MartingaleSpec.zeros(params.m, spec.n, int(bc["pieces"]), int(bc["k"]),
                                   weight=bc["weight"], cap=float(bc["cap"]))
    else:
        fam = MartingaleSpec(np.asarray(bc["theta"], dtype=float), int(bc["k"]),
                             bc["weight"], float(bc["cap"]))
    if not bc["search"]:
        return upper_bound(fam, ens, _y0(cfg), params, crit, method=bc["method"],
                           threads=threads), []
    handler = logging.FileHandler(out / "bound.log", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    dlog = logging.getLogger("bess_control.dual_bound")
    dlog.addHandler(handler)
    dlog.setLevel(logging.INFO)
    try:
        res = minimize_over_v(fam, ens, _y0(cfg), params, crit, budget=int(bc["budget"]),
                              step=float(bc["step"]), method=bc["method"], threads=threads)
    finally:
        dlog.removeHandler(handler)
        handler.close()
    rows = [[str(i), ";".join(fmt(t) for t in th), fmt(mn), fmt(se)]
            for i, th, mn, se in res.trace]
    _write_rows(out / "trace.csv", ["evaluation", "theta", "mean", "se"], rows)
    return res.bound, ["trace.csv", "bound.log"]


def cmd_bound(cfg, out: Path, threads: int):
    spec = _spec(cfg)
    ens = _ensemble(cfg, spec, _tgrid(cfg), threads, cfg["bound"]["n_paths"])
    res, extra = _bound(cfg, spec, ens, out, threads)
    write_bound_csv(out / "bound.csv", [(spec.name, res)])
    write_bound_paths_csv(out / "bound_paths.csv", res)
    print(f"upper bound (k={res.k}) = {res.mean:.8g} +- {res.se:.3g}; "
          f"{res.n_flagged} paths flagged")
    return ["bound.csv", "bound_paths.csv"] + extra


def cmd_gap(cfg, out: Path, threads: int):
    spec, pol = _policy(cfg)
    ens = _ensemble(cfg, spec, _tgrid(cfg), threads, cfg["bound"]["n_paths"])
    low = _evaluate(cfg, spec, pol, ens, threads)
    up, extra = _bound(cfg, spec, ens, out, threads)
    gap = duality_gap(low, up)
    _kv(out / "gap.csv", [("lower", low.mean), ("lower_se", low.se), ("upper", up.mean),
                          ("upper_se", up.se), ("gap", gap.gap), ("gap_se", gap.se),
                          ("violation", int(gap.violation))])
    print(f"gap = {gap.gap:.6g} +- {gap.se:.3g}")
    if gap.violation:
        raise InvariantViolation(f"negative duality gap {gap.gap:.6g} beyond 3 SE ({gap.se:.3g})")
    return ["gap.csv"] + extra


def cmd_regime(cfg, out: Path, threads: int):
    rc = cfg["regime"]
    seed = rc["seed"] if rc["seed"] is not None else cfg["simulate"]["seed"]
    ec = ExperimentConfig(float(rc["T"]), float(rc["C"]), float(rc["L"]), int(rc["N"]),
                          int(rc["n_paths"]), int(seed), rc["v0"])
    res = run_experiment(ec, threads)
    write_best_path_csv(out / "best_path.csv", res)
    write_summary_csv(out / "summary.csv", res)
    b = res.best
    print(f"best candidate {b.index}: score = {b.score:.10g}, sign changes = {b.sign_changes}")
    return ["best_path.csv", "summary.csv"]


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "bound": cmd_bound,
            "regime": cmd_regime, "evaluate": cmd_evaluate, "gap": cmd_gap}


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bess", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML config or a manifest from an earlier run")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--out", help="output directory (default $BESS_OUT/<command>)")
        sp.add_argument("--eps", type=float)
        sp.add_argument("--k", type=int)
        sp.add_argument("--n-paths", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve(args) -> dict:
    cfg = load(args.config) if args.config else merge(defaults(), {})
    if args.seed is not None:
        cfg["simulate"]["seed"] = args.seed
        cfg["regime"]["seed"] = args.seed
    if args.eps is not None:
        cfg["solve"]["eps"] = args.eps
    if args.k is not None:
        cfg["bound"]["k"] = args.k
    if args.n_paths is not None:
        if args.command == "regime":
            cfg["regime"]["n_paths"] = args.n_paths
        else:
            cfg["simulate"]["n_paths"] = args.n_paths
            cfg["bound"]["n_paths"] = None
    return validate(cfg, args.command)


def output_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("BESS_OUT", "runs")) / args.command


def write_manifest(out: Path, cfg: dict, command: str, files: list) -> None:
    run = {"subcommand": command, "outputs": files,
           "versions": {"bess_control": __version__, "numpy": np.__version__,
                        "scipy": scipy.__version__, "pyyaml": yaml.__version__,
                        "python": platform.python_version()}}
    (out / "manifest.yaml").write_text(dump(cfg) + dump({"run": run}))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = resolve(args)
        out = output_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, out, args.threads)
        write_manifest(out, cfg, args.command, files)
    except (ConfigError, DimensionError, SpecMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StabilityError, SimulationError, FloatingPointError, InadmissibleControl) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return 0


if __name__ == "__main__":
    sys.exit(main())
