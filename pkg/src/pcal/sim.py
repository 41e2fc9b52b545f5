"""Monte Carlo study on a linear model with two noisy AI predictors.

Each replication draws a labeled batch (used only to choose the allocation)
and a pool, then compares four estimators of the first regression
coefficient across a sweep of budgets: covariate-aware allocation,
covariate-agnostic allocation, labels plus unlabeled data, and labels only.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .allocate import allocation_influences, optimize_agnostic, optimize_aware
from .core import BudgetConfig, Dataset, MissingPattern, preference_labels
from .errors import ConfigError, PCALError
from .estimate import label_only_estimate, label_unlabel_estimate, pcal_ca_estimate, pcal_estimate
from .nuisance import NuisanceConfig
from .policy import BASES
from .sample import ArrayOracle, assign_fixed_labels, assign_patterns

__all__ = [
    "SimConfig",
    "MonteCarloResult",
    "generate_linear_data",
    "draw_theta_tilde",
    "run_monte_carlo",
    "write_results",
    "METHOD_ORDER",
    "RESULT_COLUMNS",
]

METHOD_ORDER = ("pcal", "pcal-ca", "label-unlabel", "label-only")
RESULT_COLUMNS = ("method", "c", "tau", "mean_ci_length", "coverage", "reps", "failures")
NOISE_CONVENTIONS = ("sd", "variance")


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    With ``noise_convention="sd"`` the outcome noise has standard deviation
    ``sigma_eps``; with ``"variance"`` it has variance ``sigma_eps``. The
    predictor noises ``eps_var`` and the perturbations ``theta_tilde_var`` are
    variances either way.
    """

    d: int = 5
    theta_star: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    sigma_x: float = 1.0
    sigma_eps: float = 16.0
    noise_convention: str = "sd"
    theta_tilde_var: tuple[float, float] = (0.2, 0.1)
    fix_theta_tilde: bool = False
    eta: tuple[float, float] = (0.075, 0.075)
    eps_var: tuple[float, float] = (16.0, 36.0)
    n0: int = 2000
    n1: int = 20000
    c: tuple[float, ...] = (10.0,)
    taus: tuple[float, ...] = (1.2, 1.6, 2.0, 2.4)
    reps: int = 200
    level: float = 0.9
    seed: int = 0
    alpha_floor: float = 1e-3
    slack: float | None = None
    basis: str = "squares"
    l2: float = 0.0
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    coordinate: int = 0

    def __post_init__(self) -> None:
        if self.d < 1 or len(self.theta_star) != self.d:
            raise ConfigError(f"theta_star must have d={self.d} entries, got {len(self.theta_star)}")
        if self.noise_convention not in NOISE_CONVENTIONS:
            raise ConfigError(f"noise_convention must be one of {NOISE_CONVENTIONS}, got {self.noise_convention!r}")
        if self.sigma_x <= 0 or self.sigma_eps < 0:
            raise ConfigError("sigma_x must be positive and sigma_eps non-negative")
        if min(self.eps_var) < 0 or min(self.theta_tilde_var) < 0:
            raise ConfigError("variances must be non-negative")
        if self.n0 < 4 or self.n1 < 3:
            raise ConfigError(f"n0 and n1 are too small: n0={self.n0}, n1={self.n1}")
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must lie in (0, 1), got {self.level}")
        if self.basis not in BASES:
            raise ConfigError(f"basis must be one of {BASES}, got {self.basis!r}")
        if not 0 <= self.coordinate < self.d:
            raise ConfigError(f"coordinate must lie in [0, {self.d}), got {self.coordinate}")
        for c in self.c:
            for tau in self.taus:
                BudgetConfig(c, tau, self.alpha_floor, self.slack)

    @property
    def eps_sd(self) -> float:
        return self.sigma_eps if self.noise_convention == "sd" else math.sqrt(self.sigma_eps)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["nuisance"] = asdict(self.nuisance)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulation keys: {sorted(unknown)}")
        kw = dict(d)
        if "nuisance" in kw and isinstance(kw["nuisance"], dict):
            kw["nuisance"] = NuisanceConfig(**kw["nuisance"])
        for key in ("theta_star", "theta_tilde_var", "eta", "eps_var", "c", "taus"):
            if key in kw:
                val = kw[key]
                kw[key] = tuple(float(t) for t in (val if isinstance(val, (list, tuple)) else [val]))
        return cls(**kw)


def draw_theta_tilde(config: SimConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of the two predictors: ``theta_star`` plus Gaussian error."""
    theta = np.asarray(config.theta_star, dtype=float)
    return tuple(theta + math.sqrt(v) * rng.standard_normal(config.d) for v in config.theta_tilde_var)


def generate_linear_data(
    config: SimConfig,
    n: int,
    seed: int | np.random.SeedSequence | np.random.Generator | None,
    theta_tilde: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Dataset, np.ndarray]:
    """Fully observed records from the linear model, with both predictors.

    ``y = x @ theta_star + eps`` and ``w_j = x @ theta_tilde_j + eta_j * eps + eps_j``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if theta_tilde is None:
        theta_tilde = draw_theta_tilde(config, rng)
    theta = np.asarray(config.theta_star, dtype=float)
    x = config.sigma_x * rng.standard_normal((n, config.d))
    eps = config.eps_sd * rng.standard_normal(n)
    y = x @ theta + eps
    w = [
        x @ np.asarray(tt, dtype=float) + eta * eps + math.sqrt(var) * rng.standard_normal(n)
        for tt, eta, var in zip(theta_tilde, config.eta, config.eps_var)
    ]
    v = preference_labels(y, w[0], w[1])
    data = Dataset(x=x, w1=w[0], w2=w[1], v=v, y=y, pattern=np.zeros(n, dtype=np.int8))
    return data, theta


@dataclass
class MonteCarloResult:
    """Aggregated table plus per-replication raw values.

    ``lengths`` and ``covered`` have shape ``(n_c, n_tau, n_methods, reps)``
    with NaN marking failed runs; ``spend`` holds realised and expected spend
    per record of the two allocation methods.
    """

    config: SimConfig
    table: list[dict[str, Any]]
    lengths: np.ndarray
    covered: np.ndarray
    estimates: np.ndarray
    spend: dict[str, np.ndarray]
    errors: list[str]


def _one_rep(config: SimConfig, rep_seed: np.random.SeedSequence, theta_tilde) -> dict[str, Any]:
    data_ss, alloc_ss, fold_ss, u_ss = rep_seed.spawn(4)
    rng = np.random.default_rng(data_ss)
    if theta_tilde is None:
        theta_tilde = draw_theta_tilde(config, rng)
    batch, theta = generate_linear_data(config, config.n0, rng, theta_tilde)
    pool_full, _ = generate_linear_data(config, config.n1, rng, theta_tilde)
    pool = pool_full.unlabeled()
    oracle = ArrayOracle(pool_full.y, pool_full.w1, pool_full.w2)
    u = np.random.default_rng(u_ss).random(config.n1)
    fold_seed = int(fold_ss.generate_state(1)[0])
    k = config.coordinate
    target = theta[k]

    nc, nt, nm = len(config.c), len(config.taus), len(METHOD_ORDER)
    lengths = np.full((nc, nt, nm), np.nan)
    covered = np.full((nc, nt, nm), np.nan)
    est = np.full((nc, nt, nm), np.nan)
    spend = np.full((nc, nt, 2, 2), np.nan)
    errors: list[str] = []
    try:
        sample = allocation_influences(batch, nuisance=config.nuisance, seed=alloc_ss)
    except PCALError as exc:
        return {"lengths": lengths, "covered": covered, "est": est, "spend": spend,
                "errors": [f"allocation sample: {exc}"]}

    for ci, c in enumerate(config.c):
        for ti, tau in enumerate(config.taus):
            budget = BudgetConfig(c, tau, config.alpha_floor, config.slack)

            def record(mi, report):
                lo, hi = report.ci[k]
                lengths[ci, ti, mi] = hi - lo
                covered[ci, ti, mi] = float(lo <= target <= hi)
                est[ci, ti, mi] = report.theta_hat[k]

            def attempt(mi, fn):
                try:
                    fn()
                except PCALError as exc:
                    errors.append(f"c={c} tau={tau} {METHOD_ORDER[mi]}: {type(exc).__name__}: {exc}")

            def run_aware():
                policy = optimize_aware(
                    sample.influences, sample.x, sample.w1, sample.w2, budget, config.basis, config.l2
                )
                policy = policy.fit_to_budget(pool.x, pool.w1, pool.w2, c, tau)
                data, ledger = assign_patterns(pool, policy, oracle, budget, uniforms=u)
                a = policy.at(pool.x, pool.w1, pool.w2)
                spend[ci, ti, 0] = (ledger.total_cost / config.n1, float(np.mean(c * a[:, 0] + a[:, 1])))
                record(0, pcal_estimate(data, policy, nuisance=config.nuisance, seed=fold_seed, level=config.level))

            def run_agnostic():
                alpha = optimize_agnostic(sample.influences, budget)
                data, ledger = assign_patterns(pool, alpha, oracle, budget, uniforms=u)
                spend[ci, ti, 1] = (ledger.total_cost / config.n1, alpha.spend(c))
                record(1, pcal_ca_estimate(data, alpha, nuisance=config.nuisance, seed=fold_seed, level=config.level))

            n_lab = int(math.floor(config.n1 * tau / c))
            fixed = {}

            def labeled():
                if "data" not in fixed:
                    fixed["data"] = assign_fixed_labels(pool, n_lab, oracle, budget, uniforms=u)[0]
                return fixed["data"]

            def run_lu():
                record(2, label_unlabel_estimate(
                    labeled(), n_lab / config.n1, nuisance=config.nuisance, seed=fold_seed, level=config.level
                ))

            def run_lo():
                record(3, label_only_estimate(labeled(), level=config.level))

            for mi, fn in enumerate((run_aware, run_agnostic, run_lu, run_lo)):
                attempt(mi, fn)
    return {"lengths": lengths, "covered": covered, "est": est, "spend": spend, "errors": errors}


def _rep_worker(args):
    config, ss, tt = args
    return _one_rep(config, ss, tt)


def run_monte_carlo(config: SimConfig, threads: int = 1) -> MonteCarloResult:
    """Run all replications and aggregate per ``(method, c, tau)``.

    Replications use independent child seeds of ``config.seed`` and are
    combined in order, so the output does not depend on ``threads``.
    """
    root = np.random.SeedSequence(config.seed)
    tt_ss, *rep_ss = root.spawn(config.reps + 1)
    fixed_tt = draw_theta_tilde(config, np.random.default_rng(tt_ss)) if config.fix_theta_tilde else None
    jobs = [(config, ss, fixed_tt) for ss in rep_ss]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(_rep_worker, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        outs = [_rep_worker(j) for j in jobs]

    lengths = np.stack([o["lengths"] for o in outs], axis=-1)
    covered = np.stack([o["covered"] for o in outs], axis=-1)
    est = np.stack([o["est"] for o in outs], axis=-1)
    spend_arr = np.stack([o["spend"] for o in outs], axis=-1)
    errors = [f"rep {r}: {e}" for r, o in enumerate(outs) for e in o["errors"]]
    table = []
    for ci, c in enumerate(config.c):
        for ti, tau in enumerate(config.taus):
            for mi, method in enumerate(METHOD_ORDER):
                ok = np.isfinite(lengths[ci, ti, mi])
                n_ok = int(ok.sum())
                table.append({
                    "method": method,
                    "c": float(c),
                    "tau": float(tau),
                    "mean_ci_length": float(np.mean(lengths[ci, ti, mi][ok])) if n_ok else float("nan"),
                    "coverage": float(np.mean(covered[ci, ti, mi][ok])) if n_ok else float("nan"),
                    "reps": n_ok,
                    "failures": config.reps - n_ok,
                })
    spend = {
        "pcal_realized": spend_arr[:, :, 0, 0], "pcal_expected": spend_arr[:, :, 0, 1],
        "pcal_ca_realized": spend_arr[:, :, 1, 0], "pcal_ca_expected": spend_arr[:, :, 1, 1],
    }
    return MonteCarloResult(config, table, lengths, covered, est, spend, errors)


def _fmt(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_results(result: MonteCarloResult, out_dir: str | Path, stem: str = "results") -> tuple[Path, Path]:
    """Write the aggregated table as CSV and JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in result.table:
            writer.writerow([_fmt(row[col]) for col in RESULT_COLUMNS])
    # NaN (every rep failed) becomes null so the file stays valid JSON
    rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()} for row in result.table]
    payload = {"rows": rows, "errors": result.errors}
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return csv_path, json_path
