import numpy as np
import pytest
from conftest import random_e, scalar_influences
from hypothesis import given, settings
from hypothesis import strategies as st

from pcal.allocate import (
    WorthDecision,
    closed_form_loss_scalar,
    constant_policy_trace,
    optimize_agnostic,
    optimize_aware,
    preference_worth_check,
    trace_moments,
    variance_functional,
)
from pcal.core import BudgetConfig
from pcal.eif import InfluenceSet
from pcal.errors import InfeasibleAllocation, InfeasibleBudget
from pcal.policy import PolicyFunction, PolicyVector


def _grid_min(e, rho, tau, floor=1e-6, points=10_000):
    lo = max(floor, (tau - 1) / (rho - 1)) if tau > 1 else floor
    grid = np.linspace(lo, tau / rho, points)
    vals = [closed_form_loss_scalar(*e, rho, tau, a, floor) for a in grid]
    k = int(np.argmin(vals))
    return grid[k], vals[k]


def test_closed_form_example():
    assert closed_form_loss_scalar(3, 2, 1, 2, 1, 0.4) == pytest.approx(31 / 6, rel=1e-12)


def test_closed_form_boundary_without_preferences():
    assert closed_form_loss_scalar(3, 2, 0, 4, 2, 0.5) == pytest.approx(3 * 4 / 2)


def test_closed_form_flat_when_moments_equal():
    vals = [closed_form_loss_scalar(2.0, 2.0, 2.0, 5.0, 1.5, a) for a in np.linspace(0.13, 0.3, 50)]
    np.testing.assert_allclose(vals, 2.0, rtol=1e-12)


def test_closed_form_names_violated_bound():
    with pytest.raises(InfeasibleAllocation, match="tau/rho"):
        closed_form_loss_scalar(3, 2, 1, 2, 1, 0.6)
    with pytest.raises(InfeasibleAllocation, match=r"\(tau-1\)/\(rho-1\)"):
        closed_form_loss_scalar(3, 2, 1, 4, 2, 0.2)
    with pytest.raises(InfeasibleAllocation, match="alpha_floor"):
        closed_form_loss_scalar(3, 2, 1, 4, 0.5, 1e-4, alpha_floor=1e-3)


def test_closed_form_matches_variance_functional(rng):
    psi1, psi2, psi3 = scalar_influences(3, 2, 1, 500, rng)
    infl = InfluenceSet(psi1, psi2, psi3, PolicyVector(1, 0, 0))
    alpha = PolicyVector.from_a1(0.4, 2.0, 1.0)
    vf = variance_functional(infl, alpha)
    assert vf.trace == pytest.approx(31 / 6, rel=1e-10)
    assert trace_moments(infl) == pytest.approx((3, 2, 1), rel=1e-12)
    assert constant_policy_trace(infl, alpha) == pytest.approx(vf.trace, rel=1e-10)


def test_variance_functional_zero_nuisance_and_scaling(rng):
    psi1 = rng.normal(size=(300, 2))
    zero = np.zeros_like(psi1)
    infl = InfluenceSet(psi1, zero, zero, PolicyVector(1, 0, 0))
    a = variance_functional(infl, PolicyVector(0.4, 0.2, 0.4))
    np.testing.assert_allclose(a.cov_hat, psi1.T @ psi1 / 300 / 0.4, rtol=1e-9)
    b = variance_functional(infl, PolicyVector(0.2, 0.2, 0.6))
    assert b.trace == pytest.approx(2 * a.trace, rel=1e-9)
    np.testing.assert_allclose(a.cov_hat, a.cov_hat.T, atol=1e-10)
    assert a.trace == pytest.approx(np.trace(a.cov_hat))


def test_agnostic_includes_preferences_above_threshold():
    e = (10.0, 4.0, 2.0)
    b = BudgetConfig(rho=4.0 * 1.01, tau=1.0)
    assert optimize_agnostic(e, b).a2 > 0


def test_agnostic_excludes_preferences_far_below_threshold():
    e = (10.0, 4.0, 2.0)
    b = BudgetConfig(rho=1.1, tau=1.0)
    pol = optimize_agnostic(e, b)
    assert pol.a1 == pytest.approx(1 / 1.1, abs=1e-9) and pol.a2 == 0.0
    a_grid, _ = _grid_min(e, 1.1, 1.0)
    assert pol.a1 == pytest.approx(a_grid, abs=1e-4)


def test_agnostic_flat_loss_takes_largest_a1():
    pol = optimize_agnostic((2.0, 2.0, 2.0), BudgetConfig(5.0, 1.5))
    assert pol.a1 == pytest.approx(0.3, abs=1e-12) and pol.a2 == 0.0


def test_agnostic_infeasible():
    with pytest.raises(InfeasibleBudget):
        optimize_agnostic((3, 2, 1), BudgetConfig(2.0, 3.0))


@given(st.floats(1.5, 20.0), st.floats(0.2, 0.95), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_agnostic_matches_grid_oracle(rho, frac, seed):
    e = random_e(np.random.default_rng(seed))
    tau = frac * rho
    pol = optimize_agnostic(e, BudgetConfig(rho, tau))
    _, best = _grid_min(e, rho, tau)
    assert closed_form_loss_scalar(*e, rho, tau, pol.a1, 1e-6) <= best * (1 + 1e-9)
    assert pol.a1 + pol.a2 + pol.a3 == pytest.approx(1.0, abs=1e-10)
    assert min(pol.a2, pol.a3) >= 0 and pol.a1 >= 1e-6
    assert rho * pol.a1 + pol.a2 == pytest.approx(tau, rel=1e-9)


def test_budget_relief_is_monotone():
    e, rho = (8.0, 5.0, 1.0), 6.0
    mins = [_grid_min(e, rho, tau, points=2000)[1] for tau in np.linspace(0.3, 5.5, 25)]
    assert np.all(np.diff(mins) <= 1e-9 * np.abs(mins[:-1]))


@pytest.mark.parametrize(
    "e, rho, expected",
    [((10, 4, 2), 5, WorthDecision.INCLUDE), ((10, 4, 2), 3, WorthDecision.NOT_IMPLIED),
     ((10, 2, 2), 7, WorthDecision.UNDETERMINED)],
)
def test_worth_check(e, rho, expected):
    assert preference_worth_check(*e, rho) is expected
    assert expected.value in {"include-preference", "exclude-not-implied", "boundary-undetermined"}


def _influences(n, rng, high_half=False):
    x = rng.normal(size=(n, 1))
    w1, w2 = rng.normal(size=n), rng.normal(size=n)
    scale = np.where(x[:, 0] > 0, np.sqrt(10.0), 1.0) if high_half else np.ones(n)
    g = rng.normal(size=(n, 3)) * scale[:, None]
    psi3 = g[:, :1]
    psi2 = psi3 + 0.8 * g[:, 1:2]
    psi1 = psi2 + 0.5 * g[:, 2:3]
    return InfluenceSet(psi1, psi2, psi3, PolicyVector(1, 0, 0)), x, w1, w2


def test_aware_intercept_only_recovers_agnostic(rng):
    infl, x, w1, w2 = _influences(2000, rng)
    b = BudgetConfig(5.0, 1.5, alpha_floor=1e-3, slack=0.0)
    pol = optimize_aware(infl, x, w1, w2, b, basis="intercept")
    const = optimize_agnostic(infl, b)
    np.testing.assert_allclose(pol.at(x[:3], w1[:3], w2[:3]), np.tile(const.as_array(), (3, 1)), atol=1e-4)


def test_aware_puts_labels_where_variance_is_high(rng):
    infl, x, w1, w2 = _influences(4000, rng, high_half=True)
    rho, tau = 5.0, 1.5
    b = BudgetConfig(rho, tau, alpha_floor=1e-3)
    pol = optimize_aware(infl, x, w1, w2, b, basis="linear")
    a = pol.at(x, w1, w2)
    hi = x[:, 0] > 0
    assert a[hi, 0].mean() > a[~hi, 0].mean()
    # two-region oracle over region-constant policies
    best, arg = np.inf, None
    grid = np.linspace(0.01, 0.6, 60)
    for a1h in grid:
        for a1l in grid:
            for a2 in np.linspace(0, 1, 11):
                rows = np.where(hi[:, None], [a1h, a2, 0], [a1l, a2, 0])
                rows[:, 2] = 1 - rows[:, 0] - rows[:, 1]
                if rows[:, 2].min() < 0 or np.mean(rho * rows[:, 0] + rows[:, 1]) > tau + b.slack:
                    continue
                t = variance_functional(infl, rows).trace
                if t < best:
                    best, arg = t, (a1h, a1l)
    assert arg[0] > arg[1]
    assert pol.info["objective"] < pol.info["constant_objective"]


def test_aware_budget_and_fallback(rng):
    infl, x, w1, w2 = _influences(1500, rng)
    spends = []
    for slack in (0.0, 0.05 * 1.5):
        b = BudgetConfig(5.0, 1.5, alpha_floor=1e-3, slack=slack)
        pol = optimize_aware(infl, x, w1, w2, b, basis="squares")
        a = pol.at(x, w1, w2)
        spend = float(np.mean(5.0 * a[:, 0] + a[:, 1]))
        assert spend <= 1.5 + slack + 1e-9
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-10)
        assert a[:, 0].min() >= 1e-3 and a[:, 1:].min() >= 0
        assert pol.info["objective"] <= pol.info["constant_objective"]
        spends.append(spend)
    assert abs(spends[1] - spends[0]) <= 0.05 * 1.5 + 1e-9


def test_policy_function_round_trip(rng):
    infl, x, w1, w2 = _influences(800, rng)
    pol = optimize_aware(infl, x, w1, w2, BudgetConfig(5.0, 1.5, alpha_floor=1e-3), basis="linear")
    again = PolicyFunction.from_dict(pol.to_dict())
    np.testing.assert_array_equal(again.at(x, w1, w2), pol.at(x, w1, w2))
