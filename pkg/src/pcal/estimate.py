"""Cross-fitted estimators with preference-augmented corrections, plus the two
label-based baselines and normal confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.stats import norm

from .core import Dataset, MissingPattern, split_folds
from .eif import Functional, LeastSquares, guarded_inverse, phi_from_psi
from .errors import InsufficientData, InsufficientPatternCoverage, InvalidArgument
from .nuisance import NuisanceConfig, NuisanceProvider
from .policy import PolicyFunction, PolicyVector, as_alpha_array

__all__ = [
    "EstimateReport",
    "decorrelation_matrix",
    "confidence_interval",
    "pcal_estimate",
    "pcal_ca_estimate",
    "label_only_estimate",
    "label_unlabel_estimate",
    "METHODS",
]

METHODS = ("pcal", "pcal-ca", "label-only", "label-unlabel")
FULL, PREF, UNLAB = int(MissingPattern.FULL), int(MissingPattern.PREF), int(MissingPattern.UNLABELED)


@dataclass(frozen=True, eq=False)
class EstimateReport:
    theta_hat: np.ndarray
    cov_hat: np.ndarray
    ci: np.ndarray
    method: str
    n_full: int
    n_pref: int
    n_unlabeled: int
    n_scale: int
    level: float
    seed: int | None = None
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "cov_hat": self.cov_hat.tolist(),
            "ci": self.ci.tolist(),
            "method": self.method,
            "n_full": self.n_full,
            "n_pref": self.n_pref,
            "n_unlabeled": self.n_unlabeled,
            "n_scale": self.n_scale,
            "level": self.level,
            "seed": self.seed,
        }

    def ci_length(self, k: int = 0) -> float:
        return float(self.ci[k, 1] - self.ci[k, 0])


def confidence_interval(theta: np.ndarray, cov: np.ndarray, n: int, level: float = 0.9) -> np.ndarray:
    """Per-coordinate normal intervals ``theta +- z * sqrt(diag(cov) / n)``."""
    if not 0.0 < level < 1.0:
        raise InvalidArgument(f"level must lie in (0, 1), got {level}")
    if n < 1:
        raise InvalidArgument(f"n must be positive, got {n}")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    half = norm.ppf(0.5 + level / 2.0) * np.sqrt(np.clip(np.diag(np.atleast_2d(cov)), 0.0, None) / n)
    return np.column_stack([theta - half, theta + half])


def _psd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= 0.0:
        return cov
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def decorrelation_matrix(
    psi1: np.ndarray,
    phi: tuple[np.ndarray, np.ndarray, np.ndarray],
    pattern: np.ndarray,
    alpha: np.ndarray,
    mode: str = "aware",
) -> np.ndarray:
    """Matrix ``M`` that projects the correction onto the initial estimator.

    ``psi1`` may be NaN on records that do not observe ``y``, and ``phi1``,
    ``phi2`` on records that do not observe ``v``; only the entries matching
    each record's own pattern are read.

    ``aware`` averages inverse-propensity weighted terms over all records;
    ``agnostic`` averages within each pattern and mixes with the constant
    propensities, skipping patterns the policy never draws.
    """
    pattern = np.asarray(pattern)
    alpha = np.asarray(alpha, dtype=float)
    n = pattern.shape[0]
    if n == 0:
        raise InsufficientData("empty fold")
    phi1, phi2, phi3 = phi
    full = pattern == FULL
    if not full.any():
        raise InsufficientPatternCoverage("no fully labeled records in the fold")
    p1, f1 = psi1[full], phi1[full]
    if mode == "aware":
        A = (p1 / alpha[full, :1]).T @ f1 / n
        B = f1.T @ f1
        for j, ph in ((PREF, phi2), (UNLAB, phi3)):
            m = pattern == j
            if m.any():
                B = B + ph[m].T @ ph[m]
        B = B / n
    elif mode == "agnostic":
        a = alpha[0] if alpha.ndim == 2 else alpha
        A = p1.T @ f1 / full.sum()
        B = np.zeros_like(A)
        for j, ph in ((FULL, phi1), (PREF, phi2), (UNLAB, phi3)):
            if a[j] <= 0.0:
                continue
            m = pattern == j
            if not m.any():
                raise InsufficientPatternCoverage(f"the fold has no {MissingPattern(j).label} records")
            B = B + a[j] * ph[m].T @ ph[m] / m.sum()
    else:
        raise InvalidArgument(f"mode must be 'aware' or 'agnostic', got {mode!r}")
    return -A @ guarded_inverse(B)


def _check_coverage(pattern: np.ndarray, alpha: np.ndarray, d: int, where: str) -> None:
    counts = np.bincount(pattern.astype(np.int64), minlength=3)
    if counts[FULL] < d + 1:
        raise InsufficientPatternCoverage(
            f"{where} has {counts[FULL]} fully labeled records, need at least {d + 1}"
        )
    expected = alpha.sum(axis=0)
    for j in (PREF, UNLAB):
        if expected[j] >= 2 * (d + 1) and counts[j] < d + 1:
            raise InsufficientPatternCoverage(
                f"{where} has {counts[j]} {MissingPattern(j).label} records but the policy "
                f"expects about {expected[j]:.1f}"
            )


def _fold_psi(models, data: Dataset, rows: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Predicted ``psi2`` (NaN where ``v`` is missing) and ``psi3`` on ``rows``."""
    x, w1, w2, v = data.x[rows], data.w1[rows], data.w2[rows], data.v[rows]
    psi3 = np.asarray(models.psi3(x, w1, w2), dtype=float).reshape(len(rows), d)
    psi2 = np.full((len(rows), d), np.nan)
    has_v = np.isfinite(v)
    if has_v.any():
        psi2[has_v] = np.asarray(models.psi2(x[has_v], w1[has_v], w2[has_v], v[has_v]), dtype=float).reshape(-1, d)
    return psi2, psi3


def _corrections(pattern: np.ndarray, phi1, phi2, phi3) -> np.ndarray:
    out = np.where((pattern == FULL)[:, None], phi1, phi3)
    pref = pattern == PREF
    out[pref] = phi2[pref]
    return out


def _fit_full(functional: Functional, data: Dataset, rows: np.ndarray, alpha: np.ndarray, weighted: bool):
    full = rows[data.pattern[rows] == FULL]
    w = 1.0 / alpha[full, 0] if weighted else None
    return functional.fit(data.x[full], data.y[full], w), full


def _cross_fit(
    data: Dataset,
    alpha: np.ndarray,
    functional: Functional,
    nuisance: NuisanceConfig | NuisanceProvider,
    seed: int | None,
    mode: str,
    level: float,
    method: str,
) -> EstimateReport:
    n = len(data)
    pattern = np.asarray(data.pattern)
    folds = split_folds(n, 3, seed)
    parts = [folds.indices(k) for k in range(3)]
    weighted = mode == "aware"
    d = None
    thetas, sizes, details = [], [], []
    influence = None
    for e, m, t in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        r1, r2, r3 = parts[e], parts[m], parts[t]
        for r, name in ((r1, "evaluation fold"), (r2, "decorrelation fold"), (r3, "nuisance fold")):
            _check_coverage(pattern[r], alpha[r], data.dim, name)
        fit3, full3 = _fit_full(functional, data, r3, alpha, weighted)
        psi1_3 = fit3.influence(data.x[full3], data.y[full3])
        d = psi1_3.shape[1]
        models = nuisance.fit(data.x[full3], data.w1[full3], data.w2[full3], data.v[full3], psi1_3)

        # decorrelation fold
        psi2, psi3 = _fold_psi(models, data, r2, d)
        phis = phi_from_psi(np.nan_to_num(psi2), psi3, alpha[r2])
        psi1 = np.full((len(r2), d), np.nan)
        f2 = pattern[r2] == FULL
        psi1[f2] = fit3.influence(data.x[r2][f2], data.y[r2][f2])
        M = decorrelation_matrix(psi1, phis, pattern[r2], alpha[r2], mode)

        # evaluation fold
        fit1, full1 = _fit_full(functional, data, r1, alpha, weighted)
        psi2, psi3 = _fold_psi(models, data, r1, d)
        phis = phi_from_psi(np.nan_to_num(psi2), psi3, alpha[r1])
        corr = _corrections(pattern[r1], *phis)
        theta = fit1.theta + M @ corr.mean(axis=0)
        thetas.append(theta)
        sizes.append(len(r1))
        details.append({"M": M.tolist(), "theta_initial": fit1.theta.tolist()})

        if influence is None:
            influence = np.zeros((n, d))
        vals = corr @ M.T
        f1 = pattern[r1] == FULL
        vals[f1] += fit1.influence(data.x[r1][f1], data.y[r1][f1]) / alpha[r1][f1, :1]
        influence[r1] = vals

    sizes_arr = np.array(sizes, dtype=float)
    theta_hat = (np.array(thetas) * sizes_arr[:, None]).sum(axis=0) / n
    cov = _psd(np.atleast_2d(np.cov(influence, rowvar=False, bias=True)))
    counts = np.bincount(pattern.astype(np.int64), minlength=3)
    return EstimateReport(
        theta_hat, cov, confidence_interval(theta_hat, cov, n, level), method,
        int(counts[FULL]), int(counts[PREF]), int(counts[UNLAB]), n, level, seed,
        {"folds": details},
    )


def pcal_estimate(
    data: Dataset,
    policy: PolicyFunction | PolicyVector | np.ndarray,
    functional: Functional | None = None,
    nuisance: NuisanceConfig | NuisanceProvider | None = None,
    seed: int | None = None,
    level: float = 0.9,
) -> EstimateReport:
    """Covariate-aware estimator: inverse-propensity weighted initial fit plus
    a decorrelated correction from all three patterns, cross-fitted over three
    folds. ``policy`` must be the one the data were sampled under."""
    alpha = as_alpha_array(policy, data.x, data.w1, data.w2, n=len(data))
    return _cross_fit(
        data, alpha, functional or LeastSquares(), nuisance or NuisanceConfig(), seed, "aware", level, "pcal"
    )


def pcal_ca_estimate(
    data: Dataset,
    alpha: PolicyVector | np.ndarray,
    functional: Functional | None = None,
    nuisance: NuisanceConfig | NuisanceProvider | None = None,
    seed: int | None = None,
    level: float = 0.9,
    method: str = "pcal-ca",
) -> EstimateReport:
    """Covariate-agnostic estimator for data sampled under a constant policy."""
    a = as_alpha_array(alpha, n=len(data))
    if not np.allclose(a, a[0]):
        raise InvalidArgument("the covariate-agnostic estimator needs a constant policy")
    return _cross_fit(
        data, a, functional or LeastSquares(), nuisance or NuisanceConfig(), seed, "agnostic", level, method
    )


def label_only_estimate(data: Dataset, functional: Functional | None = None, level: float = 0.9) -> EstimateReport:
    """Efficient estimator on the fully labeled records alone."""
    functional = functional or LeastSquares()
    pattern = np.asarray(data.pattern)
    full = np.flatnonzero(pattern == FULL)
    if len(full) < data.dim + 1:
        raise InsufficientData(f"need at least {data.dim + 1} labeled records, got {len(full)}")
    fit = functional.fit(data.x[full], data.y[full])
    psi1 = fit.influence(data.x[full], data.y[full])
    cov = _psd(np.atleast_2d(np.cov(psi1, rowvar=False, bias=True)))
    counts = np.bincount(pattern.astype(np.int64), minlength=3)
    return EstimateReport(
        fit.theta, cov, confidence_interval(fit.theta, cov, len(full), level), "label-only",
        int(counts[FULL]), int(counts[PREF]), int(counts[UNLAB]), len(full), level,
    )


def label_unlabel_estimate(
    data: Dataset,
    alpha1: float | None = None,
    functional: Functional | None = None,
    nuisance: NuisanceConfig | NuisanceProvider | None = None,
    seed: int | None = None,
    level: float = 0.9,
) -> EstimateReport:
    """Labels plus the unlabeled pool, no preferences.

    ``alpha1`` defaults to the realised labeled fraction.
    """
    pattern = np.asarray(data.pattern)
    n = len(data)
    if np.any(pattern == PREF):
        raise InvalidArgument("label-unlabel data must not contain preference-only records")
    n_full = int(np.sum(pattern == FULL))
    if n_full == 0 or n_full == n:
        raise InsufficientData("label-unlabel needs both labeled and unlabeled records")
    a1 = n_full / n if alpha1 is None else float(alpha1)
    alpha = PolicyVector(a1, 0.0, 1.0 - a1)
    return pcal_ca_estimate(data, alpha, functional, nuisance, seed, level, method="label-unlabel")
