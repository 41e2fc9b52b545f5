"""Command-line entry point.

Commands: ``simulate``, ``allocate``, ``sample``, ``estimate`` and ``report``.
Settings come from an optional TOML file (sections ``sim``, ``budget``,
``allocate``, ``nuisance``, ``functional``, ``sample``, ``estimate``) with
command-line flags taking precedence. Every run writes ``run.json`` with the
fully resolved settings. Outputs are deterministic given inputs and seed.

Exit codes: 0 ok, 1 runtime failure, 2 config or schema error,
3 infeasible budget, 4 insufficient pattern coverage.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .allocate import (
    allocation_influences,
    optimize_agnostic,
    optimize_aware,
    preference_worth_check,
    trace_moments,
    variance_functional,
)
from .core import BudgetConfig, Dataset, MissingPattern, read_csv_dataset, write_csv_dataset
from .eif import functional_from_name
from .errors import ConfigError, PCALError, SchemaError
from .estimate import (
    METHODS,
    label_only_estimate,
    label_unlabel_estimate,
    pcal_ca_estimate,
    pcal_estimate,
)
from .nuisance import NuisanceConfig
from .policy import BASES, PolicyFunction, PolicyVector, policy_from_dict
from .sample import ArrayOracle, assign_patterns, spend_report
from .sim import RESULT_COLUMNS, SimConfig, run_monte_carlo, write_results

log = logging.getLogger("pcal")

DEFAULTS: dict[str, dict[str, Any]] = {
    "budget": {"rho": None, "tau": None},
    "allocate": {"mode": "agnostic", "grid_points": 512, "delta": None, "alpha_floor": 1e-6, "basis": "linear", "l2": 0.0},
    "nuisance": {"method": "ridge", "ridge_lambda": None, "knn_k": None},
    "functional": {"name": "least_squares", "intercept": False},
    "sample": {"hard_cap": False},
    "estimate": {"method": "pcal", "level": 0.9},
}


# Serialisation --------------------------------------------------------------------------


def _clean(obj: Any) -> Any:
    """Make a structure JSON-ready: numpy to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if math.isfinite(val) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj: Any, path: Path) -> Path:
    """Sorted keys and shortest round-trip float text, so reruns are byte-identical."""
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


def _load_json(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{p} is not valid JSON: {exc}") from exc


# Config resolution ----------------------------------------------------------------------


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc


def _section(file_cfg: dict[str, Any], name: str, overrides: dict[str, Any]) -> dict[str, Any]:
    out = dict(DEFAULTS.get(name, {}))
    sec = file_cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    if name in DEFAULTS:
        unknown = set(sec) - set(out)
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    out.update(sec)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _budget(cfg: dict[str, Any]) -> BudgetConfig:
    b, a = cfg["budget"], cfg["allocate"]
    if b["rho"] is None or b["tau"] is None:
        raise ConfigError("budget.rho and budget.tau are required (use --rho/--tau or the config file)")
    return BudgetConfig(float(b["rho"]), float(b["tau"]), float(a["alpha_floor"]), a["delta"])


def _nuisance(cfg: dict[str, Any]) -> NuisanceConfig:
    return NuisanceConfig(**cfg["nuisance"])


def _functional(cfg: dict[str, Any]):
    f = cfg["functional"]
    return functional_from_name(f["name"], bool(f["intercept"]))


def _out_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, command: str, args, cfg: dict[str, Any], outputs: list[Path]) -> None:
    dump_json(
        {
            "command": command,
            "version": __version__,
            "seed": args.seed,
            "config": cfg,
            "inputs": {k: getattr(args, k) for k in ("data", "pool", "policy", "results") if getattr(args, k, None)},
            "outputs": sorted(p.name for p in outputs),
        },
        out / "run.json",
    )


# Commands -------------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    file_cfg = load_config(args.config)
    sim = dict(file_cfg.get("sim", {}))
    flags = {
        "reps": args.reps, "c": args.c, "taus": args.taus, "n0": args.n0, "n1": args.n1,
        "noise_convention": args.noise_convention, "basis": args.basis, "level": args.level,
        "alpha_floor": args.alpha_floor, "seed": args.seed,
    }
    sim.update({k: v for k, v in flags.items() if v is not None})
    if "nuisance" in file_cfg:
        sim["nuisance"] = _section(file_cfg, "nuisance", {})
    config = SimConfig.from_dict(sim)
    result = run_monte_carlo(config, threads=args.threads)
    out = _out_dir(args)
    paths = list(write_results(result, out))
    resolved = {"sim": config.to_dict()}
    _write_run(out, "simulate", args, resolved, paths)
    for row in result.table:
        print(
            f"{row['method']:>13}  c={row['c']:g}  tau={row['tau']:g}  "
            f"length={row['mean_ci_length']:.4f}  coverage={row['coverage']:.3f}  failures={row['failures']}"
        )
    return 0


def cmd_allocate(args) -> int:
    file_cfg = load_config(args.config)
    cfg = {
        "budget": _section(file_cfg, "budget", {"rho": args.rho, "tau": args.tau}),
        "allocate": _section(file_cfg, "allocate", {
            "mode": args.mode, "grid_points": args.grid_points, "delta": args.delta,
            "alpha_floor": args.alpha_floor, "basis": args.basis,
        }),
        "nuisance": _section(file_cfg, "nuisance", {"method": args.nuisance}),
        "functional": _section(file_cfg, "functional", {"name": args.functional}),
    }
    budget = _budget(cfg)
    mode = cfg["allocate"]["mode"]
    if mode not in ("aware", "agnostic"):
        raise ConfigError(f"allocate.mode must be 'aware' or 'agnostic', got {mode!r}")
    data = read_csv_dataset(args.data)
    sample = allocation_influences(data, _functional(cfg), _nuisance(cfg), seed=args.seed)
    infl = sample.influences
    e = trace_moments(infl)
    grid = int(cfg["allocate"]["grid_points"])
    if mode == "agnostic":
        policy = optimize_agnostic(infl, budget, grid)
        spend = policy.spend(budget.rho)
        trace = variance_functional(infl, policy).trace
    else:
        policy = optimize_aware(
            infl, sample.x, sample.w1, sample.w2, budget, cfg["allocate"]["basis"],
            float(cfg["allocate"]["l2"]), grid_points=grid,
        )
        a = policy.at(sample.x, sample.w1, sample.w2)
        spend = float(np.mean(budget.rho * a[:, 0] + a[:, 1]))
        trace = variance_functional(infl, policy, sample.x, sample.w1, sample.w2).trace
    body = {
        "mode": mode,
        "policy": policy.to_dict(),
        "empirical_spend": spend,
        "variance_trace": trace,
        "e": list(e),
        "preference_check": preference_worth_check(*e, budget.rho).value,
        "budget": {"rho": budget.rho, "tau": budget.tau, "alpha_floor": budget.alpha_floor, "slack": budget.slack},
    }
    if isinstance(policy, PolicyVector):
        body["alpha"] = [policy.a1, policy.a2, policy.a3]
    out = _out_dir(args)
    paths = [dump_json(body, out / "policy.json")]
    _write_run(out, "allocate", args, cfg, paths)
    print(f"{mode} policy written to {paths[0]} (spend {spend:.6g}, variance trace {trace:.6g})")
    return 0


def cmd_sample(args) -> int:
    file_cfg = load_config(args.config)
    cfg = {
        "budget": _section(file_cfg, "budget", {"rho": args.rho, "tau": args.tau}),
        "allocate": _section(file_cfg, "allocate", {"alpha_floor": args.alpha_floor, "delta": args.delta}),
        "sample": _section(file_cfg, "sample", {"hard_cap": args.hard_cap or None}),
    }
    pool = read_csv_dataset(args.pool)
    if not np.isfinite(pool.y).all():
        raise SchemaError("the pool file must hold the true outcome y for every row (it serves as the label source)")
    policy = policy_from_dict(_load_json(args.policy).get("policy", {}))
    budget = _budget(cfg)
    oracle = ArrayOracle(pool.y, pool.w1, pool.w2)
    data, ledger = assign_patterns(
        pool.unlabeled(), policy, oracle, budget, seed=args.seed, hard_cap=bool(cfg["sample"]["hard_cap"])
    )
    out = _out_dir(args)
    paths = [write_csv_dataset(data, out / "sampled.csv"), dump_json(spend_report(ledger), out / "spend.json")]
    _write_run(out, "sample", args, cfg, [Path(p) for p in paths])
    print(f"sampled {ledger.n_full} full, {ledger.n_pref} preference, {ledger.n_unlabeled} unlabeled")
    return 0


def cmd_estimate(args) -> int:
    file_cfg = load_config(args.config)
    cfg = {
        "estimate": _section(file_cfg, "estimate", {"method": args.method, "level": args.level}),
        "nuisance": _section(file_cfg, "nuisance", {"method": args.nuisance}),
        "functional": _section(file_cfg, "functional", {"name": args.functional}),
    }
    method = cfg["estimate"]["method"]
    if method not in METHODS:
        raise ConfigError(f"estimate.method must be one of {METHODS}, got {method!r}")
    level = float(cfg["estimate"]["level"])
    data = read_csv_dataset(args.data)
    functional, nuisance = _functional(cfg), _nuisance(cfg)
    policy = None
    if method in ("pcal", "pcal-ca"):
        if args.policy is None:
            raise ConfigError(f"method {method} needs --policy")
        policy = policy_from_dict(_load_json(args.policy).get("policy", {}))
    if method == "pcal":
        report = pcal_estimate(data, policy, functional, nuisance, args.seed, level)
    elif method == "pcal-ca":
        if not isinstance(policy, PolicyVector):
            raise ConfigError("pcal-ca needs a constant policy (allocate --mode agnostic)")
        report = pcal_ca_estimate(data, policy, functional, nuisance, args.seed, level)
    elif method == "label-only":
        report = label_only_estimate(data, functional, level)
    else:
        report = label_unlabel_estimate(data, None, functional, nuisance, args.seed, level)
    body = report.to_dict()
    body["seed"] = args.seed
    out = _out_dir(args)
    report_path = dump_json(body, out / "report.json")
    ci_path = out / "ci.csv"
    with open(ci_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["coordinate", "theta_hat", "lower", "upper", "std_error"])
        se = np.sqrt(np.clip(np.diag(report.cov_hat), 0.0, None) / report.n_scale)
        for k in range(len(report.theta_hat)):
            w.writerow([k, repr(float(report.theta_hat[k])), repr(float(report.ci[k, 0])),
                        repr(float(report.ci[k, 1])), repr(float(se[k]))])
    _write_run(out, "estimate", args, cfg, [report_path, ci_path])
    print(f"{method}: theta_hat = {np.array2string(report.theta_hat, precision=5)}")
    return 0


def _pivot(rows: list[dict[str, str]], value: str) -> tuple[list[str], list[list[str]]]:
    taus = sorted({float(r["tau"]) for r in rows})
    keys = []
    for r in rows:
        key = (r["method"], float(r["c"]))
        if key not in keys:
            keys.append(key)
    cells = {(r["method"], float(r["c"]), float(r["tau"])): r[value] for r in rows}
    header = ["method", "c"] + [repr(t) for t in taus]
    body = [[m, repr(c)] + [cells.get((m, c, t), "") for t in taus] for m, c in keys]
    return header, body


def cmd_report(args) -> int:
    path = Path(args.results)
    if not path.is_file():
        raise ConfigError(f"results file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in RESULT_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path} is not a simulation results table; missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path} has no rows")
    for i, r in enumerate(rows, start=2):
        try:
            float(r["c"]), float(r["tau"])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path} line {i}: c and tau must be numeric") from exc
    out = _out_dir(args)
    paths = []
    for value, name in (("mean_ci_length", "mean_ci_length.csv"), ("coverage", "coverage.csv")):
        head, body = _pivot(rows, value)
        p = out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(head)
            w.writerows(body)
        paths.append(p)
    _write_run(out, "report", args, {}, paths)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return 0


# Parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with settings; flags override it")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--output-dir", default=".", help="directory for outputs (default .)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for simulation")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pcal", description="Budgeted label and preference acquisition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo comparison of the four estimators")
    p.add_argument("--reps", type=int)
    p.add_argument("--c", type=float, nargs="+", help="price ratio(s) of a full label")
    p.add_argument("--taus", type=float, nargs="+", help="per-record budgets")
    p.add_argument("--n0", type=int)
    p.add_argument("--n1", type=int)
    p.add_argument("--noise-convention", choices=("sd", "variance"))
    p.add_argument("--basis", choices=BASES)
    p.add_argument("--level", type=float)
    p.add_argument("--alpha-floor", type=float)
    p.set_defaults(func=cmd_simulate)

    def budget_flags(q):
        q.add_argument("--rho", type=float, help="price of a full label in preference units")
        q.add_argument("--tau", type=float, help="expected spend per pool record")
        q.add_argument("--alpha-floor", type=float)
        q.add_argument("--delta", type=float, help="slack on the estimated budget constraint")

    p = sub.add_parser("allocate", parents=[common], help="choose propensities from a labeled batch")
    p.add_argument("--data", required=True, help="CSV of labeled records")
    budget_flags(p)
    p.add_argument("--mode", choices=("aware", "agnostic"))
    p.add_argument("--basis", choices=BASES)
    p.add_argument("--grid-points", type=int)
    p.add_argument("--nuisance", choices=("ridge", "knn"))
    p.add_argument("--functional", choices=("least_squares", "mean"))
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("sample", parents=[common], help="apply a policy to a pool and buy labels")
    p.add_argument("--pool", required=True, help="CSV of pool records with their true outcomes")
    p.add_argument("--policy", required=True, help="policy.json from allocate")
    budget_flags(p)
    p.add_argument("--hard-cap", action="store_true", help="never exceed the budget, demoting late draws")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("estimate", parents=[common], help="estimate the target from acquired data")
    p.add_argument("--data", required=True, help="CSV of acquired records")
    p.add_argument("--policy", help="policy.json the data were sampled under")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--level", type=float)
    p.add_argument("--nuisance", choices=("ridge", "knn"))
    p.add_argument("--functional", choices=("least_squares", "mean"))
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", parents=[common], help="pivot a results table by method and tau")
    p.add_argument("results", help="results.csv from simulate")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except PCALError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
