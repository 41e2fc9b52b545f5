import csv
import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from pcal.errors import ConfigError
from pcal.sim import METHOD_ORDER, RESULT_COLUMNS, SimConfig, generate_linear_data, run_monte_carlo, write_results

SMALL = dict(n0=400, n1=3000, taus=(1.6,), reps=2)


def test_noiseless_collapse():
    cfg = SimConfig(sigma_eps=0.0, eta=(0.0, 0.0), eps_var=(0.0, 0.0), theta_tilde_var=(0.0, 0.0))
    ds, theta = generate_linear_data(cfg, 200, 0)
    np.testing.assert_allclose(ds.w1, ds.x @ theta)
    np.testing.assert_allclose(ds.w2, ds.x @ theta)
    assert np.all(ds.v == 1)


def test_covariate_and_outcome_model():
    n = 100_000
    ds, theta = generate_linear_data(SimConfig(), n, 1)
    cov = np.cov(ds.x, rowvar=False)
    # sd of a sample covariance entry is about sqrt((1 + delta_ij) / n); the band is
    # Bonferroni-adjusted over the 15 distinct entries for a 1% familywise miss rate
    band = norm.ppf(1 - 0.005 / 15) * np.sqrt((1 + np.eye(5)) / n)
    assert np.all(np.abs(cov - np.eye(5)) < band)
    beta, res, *_ = np.linalg.lstsq(ds.x, ds.y, rcond=None)
    se = np.sqrt(res[0] / (n - 5) * np.diag(np.linalg.inv(ds.x.T @ ds.x)))
    assert np.all(np.abs(beta - theta) < 3 * se)
    assert np.std(ds.y - ds.x @ theta) == pytest.approx(16.0, rel=0.02)


def test_noise_convention_variance():
    ds, theta = generate_linear_data(SimConfig(noise_convention="variance"), 50_000, 2)
    assert np.std(ds.y - ds.x @ theta) == pytest.approx(4.0, rel=0.02)


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        SimConfig(reps=0)
    with pytest.raises(ConfigError):
        SimConfig(noise_convention="both")
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"bogus": 1})
    cfg = SimConfig(c=(5.0, 10.0), taus=(1.2,), reps=3)
    assert SimConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_single_rep_table():
    res = run_monte_carlo(SimConfig(reps=1, **{k: v for k, v in SMALL.items() if k != "reps"}))
    assert [r["method"] for r in res.table] == list(METHOD_ORDER)
    assert all(r["coverage"] in (0.0, 1.0) and r["failures"] == 0 for r in res.table)


def test_deterministic_and_thread_independent(tmp_path):
    cfg = SimConfig(seed=7, **SMALL)
    a = run_monte_carlo(cfg)
    b = run_monte_carlo(cfg, threads=2)
    np.testing.assert_array_equal(a.lengths, b.lengths)
    pa = write_results(a, tmp_path / "a")
    pb = write_results(run_monte_carlo(cfg), tmp_path / "b")
    for x, y in zip(pa, pb):
        assert x.read_bytes() == y.read_bytes()
    with open(pa[0]) as fh:
        assert tuple(next(csv.reader(fh))) == RESULT_COLUMNS


def test_budget_fidelity():
    cfg = SimConfig(seed=3, n0=400, n1=3000, taus=(1.2, 2.0), reps=3)
    res = run_monte_carlo(cfg)
    slack = [max(1e-3 * t, 1e-4) for t in cfg.taus]
    for key in ("pcal_expected", "pcal_ca_expected"):
        assert np.all(res.spend[key] <= np.array(cfg.taus)[None, :, None] + np.array(slack)[None, :, None] + 1e-9)
    # realised spend fluctuates around the expectation with sd about sqrt(c^2 a1 / n1)
    for key in ("pcal_realized", "pcal_ca_realized"):
        assert np.all(np.abs(res.spend[key] - np.array(cfg.taus)[None, :, None]) < 5 * math.sqrt(100 * 0.2 / 3000))
