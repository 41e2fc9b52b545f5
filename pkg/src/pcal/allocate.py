"""Budget allocation: estimate the asymptotic variance as a function of the
propensities and minimise its trace.

Two policy classes are supported. Constant triples reduce the problem to one
scalar ``a1`` because the budget pins ``a2 = tau - rho*a1``. Covariate-aware
policies are softmax maps over a basis of ``(x, w1, w2)``, fitted by L-BFGS.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .core import BudgetConfig, Dataset, MissingPattern
from .eif import Functional, InfluenceSet, LeastSquares, guarded_inverse
from .errors import InfeasibleAllocation, InfeasibleBudget, InsufficientData, InvalidArgument
from .nuisance import NuisanceConfig, NuisanceProvider
from .policy import (
    BASES,
    PolicyFunction,
    PolicyVector,
    _raw_basis,
    as_alpha_array,
    basis_names,
)

__all__ = [
    "VarianceEstimate",
    "WorthDecision",
    "variance_functional",
    "closed_form_loss_scalar",
    "constant_policy_trace",
    "optimize_agnostic",
    "optimize_aware",
    "preference_worth_check",
    "trace_moments",
    "allocation_influences",
    "AllocationSample",
    "PolicyVector",
    "PolicyFunction",
]

log = logging.getLogger(__name__)

TIE_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    cov_hat: np.ndarray
    trace: float


def _quadratic_parts(psi1, phi1, phi2, phi3, alpha):
    """``A``, ``C`` and ``B`` of the variance formula, averaged over rows."""
    n = psi1.shape[0]
    a1, a2, a3 = alpha[:, 0], alpha[:, 1], alpha[:, 2]
    A = (psi1 / a1[:, None]).T @ psi1 / n
    C = psi1.T @ phi1 / n
    B = ((phi1 * a1[:, None]).T @ phi1 + (phi2 * a2[:, None]).T @ phi2 + (phi3 * a3[:, None]).T @ phi3) / n
    return A, C, B


def variance_functional(
    influences: InfluenceSet,
    policy: PolicyVector | PolicyFunction | np.ndarray | None = None,
    x: np.ndarray | None = None,
    w1: np.ndarray | None = None,
    w2: np.ndarray | None = None,
) -> VarianceEstimate:
    """Plug-in asymptotic covariance of the final estimator under ``policy``.

    ``influences`` must come from fully labeled records. When ``policy`` is
    given the corrections are recomputed at it, otherwise the propensities
    stored in ``influences`` are used.
    """
    n = len(influences)
    if n == 0:
        raise InsufficientData("variance functional needs at least one labeled record")
    if policy is not None:
        influences = influences.at(as_alpha_array(policy, x, w1, w2, n=n))
    A, C, B = _quadratic_parts(
        influences.psi1, influences.phi1, influences.phi2, influences.phi3, influences.alpha
    )
    cov = A - C @ guarded_inverse(B) @ C.T
    cov = 0.5 * (cov + cov.T)
    return VarianceEstimate(cov, float(np.trace(cov)))


# Constant policies ----------------------------------------------------------------------


def _loss_scalar(e1, e2, e3, rho, tau, a1):
    """Closed-form trace for a constant policy on the budget line; no checks."""
    a1 = np.asarray(a1, dtype=float)
    g2 = tau + (1.0 - rho) * a1
    return e1 / a1 - (tau - rho * a1) / (a1 * g2) * e2 + (1.0 - 1.0 / g2) * e3


def closed_form_loss_scalar(
    e1: float, e2: float, e3: float, rho: float, tau: float, a1: float, alpha_floor: float = 0.0
) -> float:
    """Trace of the asymptotic variance for a scalar target under a constant policy.

    ``e_j`` are the second moments of ``psi_j``; the corrections are exact, so
    the ``e_j`` fully describe the problem.
    """
    lo = max(alpha_floor, (tau - 1.0) / (rho - 1.0)) if tau > 1.0 else alpha_floor
    hi = tau / rho
    tol = 1e-12 * max(1.0, hi)
    if not a1 > 0.0:
        raise InfeasibleAllocation(f"a1={a1} must be positive")
    if a1 < lo - tol:
        name = "alpha_floor" if lo == alpha_floor else "a3 >= 0 bound (tau-1)/(rho-1)"
        raise InfeasibleAllocation(f"a1={a1} is below the {name} = {lo}")
    if a1 > hi + tol:
        raise InfeasibleAllocation(f"a1={a1} exceeds the a2 >= 0 bound tau/rho = {hi}")
    return float(_loss_scalar(e1, e2, e3, rho, tau, a1))


@dataclass(frozen=True, eq=False)
class _Moments:
    s11: np.ndarray
    s12: np.ndarray
    s13: np.ndarray
    s22: np.ndarray
    s23: np.ndarray
    s33: np.ndarray


def trace_moments(influences: InfluenceSet) -> tuple[float, float, float]:
    """``(e1, e2, e3)``: traces of the second moments of ``psi1, psi2, psi3``."""
    return tuple(float(np.mean(np.sum(p * p, axis=1))) for p in (influences.psi1, influences.psi2, influences.psi3))


def _moments(influences: InfluenceSet) -> _Moments:
    n = len(influences)
    p1, p2, p3 = influences.psi1, influences.psi2, influences.psi3
    return _Moments(p1.T @ p1 / n, p1.T @ p2 / n, p1.T @ p3 / n, p2.T @ p2 / n, p2.T @ p3 / n, p3.T @ p3 / n)


def _constant_trace(m: _Moments, a: np.ndarray) -> float:
    a1, a2, a3 = a
    g = a1 + a2
    p, q = -a2 / (g * a1), -a3 / g
    r, s = 1.0 / g, -a3 / g
    cross = m.s23 + m.s23.T
    f1 = p * p * m.s22 + p * q * cross + q * q * m.s33
    f2 = r * r * m.s22 + r * s * cross + s * s * m.s33
    C = p * m.s12 + q * m.s13
    B = a1 * f1 + a2 * f2 + a3 * m.s33
    cov = m.s11 / a1 - C @ guarded_inverse(B) @ C.T
    return float(np.trace(cov))


def constant_policy_trace(influences: InfluenceSet, alpha: PolicyVector) -> float:
    return _constant_trace(_moments(influences), alpha.as_array())


def _minimize_interval(loss, lo: float, hi: float, grid_points: int, xtol: float = 1e-6) -> float:
    """Grid search then bounded Brent refinement; ties go to the larger point."""
    if hi - lo <= xtol:
        return hi
    grid = np.linspace(lo, hi, grid_points)
    vals = np.array([loss(t) for t in grid])
    best = float(np.min(vals))
    near = np.flatnonzero(vals <= best + TIE_RTOL * max(abs(best), 1e-300))
    k = int(near[-1])
    a1 = float(grid[k])
    if len(near) == 1:
        left, right = grid[max(k - 1, 0)], grid[min(k + 1, grid_points - 1)]
        res = minimize_scalar(loss, bounds=(left, right), method="bounded", options={"xatol": xtol})
        if res.success and res.fun < best - TIE_RTOL * abs(best):
            a1 = float(res.x)
    return a1


def optimize_agnostic(
    target: InfluenceSet | Sequence[float],
    budget: BudgetConfig,
    grid_points: int = 512,
) -> PolicyVector:
    """Best constant policy on the budget line.

    ``target`` is either an :class:`InfluenceSet` over fully labeled records or
    a triple ``(e1, e2, e3)`` for the scalar closed form.
    """
    lo, hi = budget.a1_bounds()
    if lo > hi:
        raise InfeasibleBudget(
            f"no constant policy satisfies the budget: a1 must lie in [{lo}, {hi}]"
        )
    rho, tau = budget.rho, budget.tau
    if isinstance(target, InfluenceSet):
        if len(target) == 0:
            raise InsufficientData("no labeled records to allocate from")
        m = _moments(target)
        loss = lambda t: _constant_trace(m, PolicyVector.from_a1(t, rho, tau).as_array())  # noqa: E731
    else:
        e1, e2, e3 = (float(t) for t in target)
        loss = lambda t: float(_loss_scalar(e1, e2, e3, rho, tau, t))  # noqa: E731
    return PolicyVector.from_a1(_minimize_interval(loss, lo, hi, grid_points), rho, tau)


class WorthDecision(str, enum.Enum):
    INCLUDE = "include-preference"
    UNDETERMINED = "boundary-undetermined"
    NOT_IMPLIED = "exclude-not-implied"


def preference_worth_check(e1: float, e2: float, e3: float, rho: float) -> WorthDecision:
    """Whether the price ratio alone proves preferences belong in the optimum.

    Preferences are needed when ``rho > (e1 - e3) / (e2 - e3)``. The converse
    does not hold, so the other outcome only says exclusion is not implied.
    """
    if e2 <= e3:
        return WorthDecision.UNDETERMINED
    return WorthDecision.INCLUDE if rho > (e1 - e3) / (e2 - e3) else WorthDecision.NOT_IMPLIED


# Covariate-aware policies ---------------------------------------------------------------


@dataclass
class _AwareProblem:
    psi1: np.ndarray
    psi2: np.ndarray
    psi3: np.ndarray
    design: np.ndarray
    rho: float
    limit: float
    floor: float
    l2: float
    sq1: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.sq1 = np.sum(self.psi1 * self.psi1, axis=1)

    def alpha(self, weights: np.ndarray):
        z = self.design @ weights
        z = np.column_stack([z, np.zeros(z.shape[0])])
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)
        f = self.floor
        m = float(np.mean(self.rho * s[:, 0] + s[:, 1]))
        ratio = (self.limit - self.rho * f) / ((1.0 - f) * m)
        t = min(1.0, ratio)
        a1 = f + (1.0 - f) * t * s[:, 0]
        a2 = (1.0 - f) * t * s[:, 1]
        a3 = np.clip(1.0 - a1 - a2, 0.0, None)
        return s, t, m, ratio < 1.0, np.column_stack([a1, a2, a3])

    def value_and_grad(self, flat: np.ndarray) -> tuple[float, np.ndarray]:
        p = self.design.shape[1]
        W = flat.reshape(p, 2)
        s, t, m, active, a = self.alpha(W)
        n = a.shape[0]
        a1, a2, a3 = a[:, :1], a[:, 1:2], a[:, 2:]
        g = a1 + a2
        psi1, psi2, psi3 = self.psi1, self.psi2, self.psi3
        phi1 = -a2 * psi2 / (g * a1) - a3 * psi3 / g
        phi2 = psi2 / g - a3 * psi3 / g
        A = float(np.mean(self.sq1 / a1[:, 0]))
        C = psi1.T @ phi1 / n
        B = ((phi1 * a1).T @ phi1 + (phi2 * a2).T @ phi2 + (psi3 * a3).T @ psi3) / n
        Binv = guarded_inverse(B)
        K = Binv @ C.T
        S = K @ K.T
        value = A - float(np.trace(C @ K))

        # derivatives of phi with respect to a1 and a2 (a3 = 1 - a1 - a2)
        g2 = g * g
        common = (psi3 - psi2) / g2
        dphi1_da1 = a2 * (a1 + g) / (g2 * a1 * a1) * psi2 + psi3 / g2
        dphi1_da2 = common
        dphi2_da = common
        Kpsi1 = psi1 @ K.T
        Sphi1 = phi1 @ S
        Sphi2 = phi2 @ S
        q1 = np.sum(phi1 * Sphi1, axis=1)
        q2 = np.sum(phi2 * Sphi2, axis=1)
        q3 = np.sum(psi3 * (psi3 @ S), axis=1)
        shared2 = 2.0 * a2[:, 0] * np.sum(Sphi2 * dphi2_da, axis=1)
        G1 = (
            -self.sq1 / a1[:, 0] ** 2
            - 2.0 * np.sum(dphi1_da1 * Kpsi1, axis=1)
            + q1 - q3
            + 2.0 * a1[:, 0] * np.sum(Sphi1 * dphi1_da1, axis=1)
            + shared2
        ) / n
        G2 = (
            -2.0 * np.sum(dphi1_da2 * Kpsi1, axis=1)
            + q2 - q3
            + 2.0 * a1[:, 0] * np.sum(Sphi1 * dphi1_da2, axis=1)
            + shared2
        ) / n

        f = self.floor
        dL_ds1 = (1.0 - f) * t * G1
        dL_ds2 = (1.0 - f) * t * G2
        if active:
            dL_dt = (1.0 - f) * float(np.sum(s[:, 0] * G1 + s[:, 1] * G2))
            dt_common = -t / m / n
            dL_ds1 = dL_ds1 + dL_dt * dt_common * self.rho
            dL_ds2 = dL_ds2 + dL_dt * dt_common
        # softmax Jacobian: ds_k/dz_l = s_k (delta_kl - s_l)
        inner = dL_ds1 * s[:, 0] + dL_ds2 * s[:, 1]
        dz1 = s[:, 0] * (dL_ds1 - inner)
        dz2 = s[:, 1] * (dL_ds2 - inner)
        grad = np.column_stack([self.design.T @ dz1, self.design.T @ dz2])
        if self.l2 > 0:
            pen = W.copy()
            pen[0] = 0.0
            value += 0.5 * self.l2 * float(np.sum(pen * pen))
            grad += self.l2 * pen
        return value, grad.ravel()


def _initial_logits(alpha: PolicyVector, floor: float) -> np.ndarray:
    s = np.array([(alpha.a1 - floor) / (1.0 - floor), alpha.a2 / (1.0 - floor), alpha.a3 / (1.0 - floor)])
    s = np.clip(s, 1e-6, None)
    s /= s.sum()
    return np.log(s[:2] / s[2])


def optimize_aware(
    influences: InfluenceSet,
    x: np.ndarray,
    w1: np.ndarray,
    w2: np.ndarray,
    budget: BudgetConfig,
    basis: str = "linear",
    l2: float = 0.0,
    maxiter: int = 500,
    grid_points: int = 512,
) -> PolicyFunction:
    """Softmax policy minimising the estimated variance trace.

    The empirical spend on the given records never exceeds ``tau + slack``
    (the budget enters through the ``scale`` reparametrisation, so every
    iterate is feasible). The best constant policy seeds the optimiser and is
    kept whenever the optimiser fails to beat it.
    """
    if basis not in BASES:
        raise InvalidArgument(f"unknown basis {basis!r}; choose from {BASES}")
    n = len(influences)
    if n == 0:
        raise InsufficientData("no labeled records to allocate from")
    floor = budget.alpha_floor
    limit = budget.tau + budget.slack
    if limit <= budget.rho * floor:
        raise InfeasibleBudget(f"budget {limit} cannot fund the floor cost {budget.rho * floor}")
    raw = _raw_basis(basis, x, w1, w2)
    center = raw.mean(axis=0)
    spread = raw.std(axis=0)
    spread[spread < 1e-12] = 1.0
    design = np.column_stack([np.ones(n), (raw - center) / spread])
    p = design.shape[1]

    const = optimize_agnostic(influences, budget, grid_points)
    W0 = np.zeros((p, 2))
    W0[0] = _initial_logits(const, floor)
    prob = _AwareProblem(influences.psi1, influences.psi2, influences.psi3, design, budget.rho, limit, floor, l2)
    f0, _ = prob.value_and_grad(W0.ravel())
    res = minimize(
        prob.value_and_grad, W0.ravel(), jac=True, method="L-BFGS-B",
        options={"maxiter": maxiter, "gtol": 1e-9, "ftol": 1e-12},
    )
    W, fval = W0, f0
    if np.isfinite(res.fun) and res.fun < f0:
        W, fval = res.x.reshape(p, 2), float(res.fun)
    _, t, _, _, a = prob.alpha(W)
    info: dict[str, Any] = {
        "converged": bool(res.success),
        "iterations": int(res.nit),
        "message": str(res.message),
        "objective": fval,
        "constant_objective": f0,
        "used_constant": W is W0,
        "basis_names": basis_names(basis, np.atleast_2d(np.asarray(x).T).shape[0]),
        "empirical_spend": float(np.mean(budget.rho * a[:, 0] + a[:, 1])),
    }
    if not res.success:
        log.info("covariate-aware allocation stopped early: %s", res.message)
    return PolicyFunction(basis, W, center, spread, floor, float(t), info)


# Building the inputs from a labeled batch -----------------------------------------------


@dataclass(frozen=True, eq=False)
class AllocationSample:
    """Influence values on the held-out half of the labeled batch."""

    influences: InfluenceSet
    x: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


def allocation_influences(
    data: Dataset,
    functional: Functional | None = None,
    nuisance: NuisanceConfig | NuisanceProvider | None = None,
    seed: int | np.random.SeedSequence | None = None,
) -> AllocationSample:
    """Split a fully labeled batch in halves, fit on one and evaluate on the other.

    The first half fits the target functional, its influence ``psi1`` and the
    projection models; the second half receives the resulting ``psi`` values.
    """
    functional = LeastSquares() if functional is None else functional
    nuisance = NuisanceConfig() if nuisance is None else nuisance
    full = data.subset(np.flatnonzero(data.pattern == MissingPattern.FULL))
    n = len(full)
    if n < 4:
        raise InsufficientData(f"need labeled records to allocate from, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    half1, half2 = np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
    d1, d2 = full.subset(half1), full.subset(half2)
    fit = functional.fit(d1.x, d1.y)
    models = nuisance.fit(d1.x, d1.w1, d1.w2, d1.v, fit.influence(d1.x, d1.y))
    psi1 = fit.influence(d2.x, d2.y)
    psi2 = models.psi2(d2.x, d2.w1, d2.w2, d2.v)
    psi3 = models.psi3(d2.x, d2.w1, d2.w2)
    # propensities are a placeholder here; every consumer re-evaluates at its policy
    infl = InfluenceSet(psi1, psi2, psi3, np.array([1.0, 0.0, 0.0]))
    return AllocationSample(infl, np.asarray(d2.x), np.asarray(d2.w1), np.asarray(d2.w2))
