"""Turn an unlabeled pool into a labeled dataset by randomising each record
into a missing pattern and buying the corresponding labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Protocol, Sequence

import numpy as np

from .core import BudgetConfig, Dataset, MissingPattern, preference_labels
from .errors import InvalidArgument
from .policy import PolicyFunction, PolicyVector, as_alpha_array

__all__ = [
    "SpendLedger",
    "Oracle",
    "ArrayOracle",
    "draw_uniforms",
    "assign_patterns",
    "assign_fixed_labels",
    "spend_report",
]


@dataclass(frozen=True)
class SpendLedger:
    """What an acquisition bought and what it cost, in preference-label units."""

    n_full: int
    n_pref: int
    n_unlabeled: int
    rho: float
    budget: float
    demoted: int = 0

    @property
    def total_cost(self) -> float:
        return self.rho * self.n_full + self.n_pref

    @property
    def n(self) -> int:
        return self.n_full + self.n_pref + self.n_unlabeled


class Oracle(Protocol):
    """Label source. ``y`` may only be requested for records drawn as full."""

    def fetch_y(self, record_id: int) -> float: ...

    def fetch_v(self, record_id: int) -> int: ...


class ArrayOracle:
    """Oracle backed by arrays of true outcomes, e.g. in simulation.

    Counts the requests so tests can check that nothing is read before the
    pattern draw.
    """

    def __init__(self, y: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> None:
        self._y = np.asarray(y, dtype=float)
        self._v = preference_labels(self._y, np.asarray(w1, float), np.asarray(w2, float))
        self.y_requests = 0
        self.v_requests = 0

    def fetch_y(self, record_id: int) -> float:
        self.y_requests += 1
        return float(self._y[record_id])

    def fetch_v(self, record_id: int) -> int:
        self.v_requests += 1
        return int(self._v[record_id])

    def fetch_y_many(self, ids: np.ndarray) -> np.ndarray:
        self.y_requests += len(ids)
        return self._y[ids]

    def fetch_v_many(self, ids: np.ndarray) -> np.ndarray:
        self.v_requests += len(ids)
        return self._v[ids]


def draw_uniforms(n: int, seed: int | np.random.SeedSequence | None) -> np.ndarray:
    """One uniform per record; sharing them across policies couples the draws."""
    return np.random.default_rng(seed).random(n)


def _fetch(oracle: Any, ids: np.ndarray, what: str) -> np.ndarray:
    batch = getattr(oracle, f"fetch_{what}_many", None)
    if batch is not None:
        return np.asarray(batch(ids), dtype=float)
    one = getattr(oracle, f"fetch_{what}")
    return np.array([one(int(i)) for i in ids], dtype=float)


def _materialize(pool: Dataset, pattern: np.ndarray, oracle: Any) -> Dataset:
    n = len(pool)
    y = np.full(n, np.nan)
    v = np.full(n, np.nan)
    full = np.flatnonzero(pattern == MissingPattern.FULL)
    pref = np.flatnonzero(pattern == MissingPattern.PREF)
    if full.size:
        y[full] = _fetch(oracle, full, "y")
        v[full] = preference_labels(y[full], pool.w1[full], pool.w2[full])
    if pref.size:
        v[pref] = _fetch(oracle, pref, "v")
    return Dataset(x=pool.x, w1=pool.w1, w2=pool.w2, v=v, y=y, pattern=pattern)


def assign_patterns(
    pool: Dataset,
    policy: PolicyVector | PolicyFunction | np.ndarray,
    oracle: Oracle,
    budget: BudgetConfig,
    seed: int | np.random.SeedSequence | None = None,
    hard_cap: bool = False,
    uniforms: np.ndarray | None = None,
) -> tuple[Dataset, SpendLedger]:
    """Draw each record's pattern from its propensities and buy the labels.

    The budget holds in expectation. With ``hard_cap`` the realised spend is
    also kept within ``n * (tau + slack)``: the latest paid draws are demoted
    to unlabeled until it fits.
    """
    n = len(pool)
    alpha = as_alpha_array(policy, pool.x, pool.w1, pool.w2, n=n)
    u = draw_uniforms(n, seed) if uniforms is None else np.asarray(uniforms, dtype=float)
    if u.shape != (n,):
        raise InvalidArgument(f"need one uniform per record ({n}), got shape {u.shape}")
    pattern = np.full(n, MissingPattern.UNLABELED, dtype=np.int8)
    pattern[u < alpha[:, 0] + alpha[:, 1]] = MissingPattern.PREF
    pattern[u < alpha[:, 0]] = MissingPattern.FULL

    demoted = 0
    rho = budget.rho
    if hard_cap:
        cap = n * (budget.tau + budget.slack)
        cost = np.where(pattern == MissingPattern.FULL, rho, np.where(pattern == MissingPattern.PREF, 1.0, 0.0))
        excess = cost.sum() - cap
        if excess > 0:
            # walk back from the last draw, dropping paid records until within the cap
            paid = np.flatnonzero(cost > 0)[::-1]
            freed = np.cumsum(cost[paid])
            k = int(np.searchsorted(freed, excess - 1e-9)) + 1
            pattern[paid[:k]] = MissingPattern.UNLABELED
            demoted = k

    data = _materialize(pool, pattern, oracle)
    ledger = SpendLedger(
        n_full=int(np.sum(pattern == MissingPattern.FULL)),
        n_pref=int(np.sum(pattern == MissingPattern.PREF)),
        n_unlabeled=int(np.sum(pattern == MissingPattern.UNLABELED)),
        rho=rho,
        budget=budget.total(n),
        demoted=demoted,
    )
    return data, ledger


def assign_fixed_labels(
    pool: Dataset,
    n_labels: int,
    oracle: Oracle,
    budget: BudgetConfig,
    seed: int | np.random.SeedSequence | None = None,
    uniforms: np.ndarray | None = None,
) -> tuple[Dataset, SpendLedger]:
    """Buy exactly ``n_labels`` full labels at random, nothing else.

    The records with the smallest uniforms are chosen, so with shared
    uniforms the labeled set nests inside any policy's full draws of at
    least the same rate.
    """
    n = len(pool)
    if not 0 <= n_labels <= n:
        raise InvalidArgument(f"n_labels must lie in [0, {n}], got {n_labels}")
    u = draw_uniforms(n, seed) if uniforms is None else np.asarray(uniforms, dtype=float)
    pattern = np.full(n, MissingPattern.UNLABELED, dtype=np.int8)
    pattern[np.argsort(u, kind="stable")[:n_labels]] = MissingPattern.FULL
    data = _materialize(pool, pattern, oracle)
    ledger = SpendLedger(n_labels, 0, n - n_labels, budget.rho, budget.total(n))
    return data, ledger


def spend_report(ledger: SpendLedger) -> dict[str, Any]:
    cost = ledger.total_cost
    util = cost / ledger.budget if ledger.budget > 0 else 0.0
    return {
        "n_full": ledger.n_full,
        "n_pref": ledger.n_pref,
        "n_unlabeled": ledger.n_unlabeled,
        "rho": ledger.rho,
        "total_cost": cost,
        "budget": ledger.budget,
        "utilization": util,
        "over_budget": bool(util > 1.0),
        "demoted": ledger.demoted,
    }
