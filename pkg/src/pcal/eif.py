"""Efficient influence functions under nested missingness.

A target functional contributes its full-data influence function ``psi1``.
Its conditional means ``psi2 = E[psi1 | x, w1, w2, v]`` and
``psi3 = E[psi1 | x, w1, w2]`` combine with the propensities into correction
terms ``phi1, phi2, phi3``; the observed-data EIF is

    1{full} * psi1 / a1 + sum_j 1{pattern j} * phi_j.

Everything here is vectorised over records (leading axis).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import MissingPattern
from .errors import InconsistentRecord, InvalidArgument, InvalidPolicy, NearSingularPolicy
from .policy import PolicyVector, SUM_TOL

__all__ = [
    "Gamma",
    "gamma",
    "phi_from_psi",
    "linreg_eif",
    "mean_eif",
    "full_eif",
    "InfluenceSet",
    "Functional",
    "FittedFunctional",
    "LeastSquares",
    "Mean",
    "functional_from_name",
    "guarded_inverse",
]

SINGULAR_GAMMA = 1e-12


class Gamma(NamedTuple):
    g1: float
    g2: float
    g3: float


def _alpha_rows(alpha: PolicyVector | np.ndarray) -> np.ndarray:
    if isinstance(alpha, PolicyVector):
        return alpha.as_array()
    return np.asarray(alpha, dtype=float)


def _check_alpha(a: np.ndarray, alpha_floor: float = 0.0) -> None:
    if not np.isfinite(a).all():
        raise InvalidPolicy("propensities must be finite")
    if (a < -SUM_TOL).any():
        raise InvalidPolicy("propensities must be non-negative")
    if (np.abs(a.sum(axis=-1) - 1.0) > SUM_TOL).any():
        raise InvalidPolicy("propensities must sum to 1")
    if (a[..., 0] < alpha_floor).any():
        raise InvalidPolicy(f"a1 below the floor {alpha_floor}")


def gamma(alpha: PolicyVector | np.ndarray, alpha_floor: float = 0.0) -> Gamma | np.ndarray:
    """Cumulative propensities ``(a1, a1 + a2, 1)``.

    A :class:`PolicyVector` or 1-D triple gives a :class:`Gamma`; an ``(n, 3)``
    array gives an ``(n, 3)`` array.
    """
    a = _alpha_rows(alpha)
    _check_alpha(a, alpha_floor)
    g = np.cumsum(a, axis=-1)
    g[..., 2] = 1.0
    if a.ndim == 1:
        return Gamma(float(g[0]), float(g[1]), 1.0)
    return g


def phi_from_psi(
    psi2: np.ndarray, psi3: np.ndarray, alpha: PolicyVector | np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Correction terms for each missing pattern.

    ``psi2`` and ``psi3`` are ``(d,)`` or ``(n, d)``; ``alpha`` is a constant
    triple or per-record ``(n, 3)`` rows.
    """
    a = _alpha_rows(alpha)
    _check_alpha(a)
    psi2 = np.asarray(psi2, dtype=float)
    psi3 = np.asarray(psi3, dtype=float)
    a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2]
    g1 = a1
    g2 = a1 + a2
    if np.min(g1) < SINGULAR_GAMMA or np.min(g2) < SINGULAR_GAMMA:
        raise NearSingularPolicy(
            f"cumulative propensity below {SINGULAR_GAMMA}: min g1={np.min(g1)}, min g2={np.min(g2)}"
        )
    if a.ndim == 2:
        a1, a2, a3, g1, g2 = (t[:, None] for t in (a1, a2, a3, g1, g2))
    phi1 = -a2 * psi2 / (g2 * g1) - a3 * psi3 / g2
    phi2 = psi2 / g2 - a3 * psi3 / g2  # g3 = 1
    phi3 = psi3.copy()
    return phi1, phi2, phi3


def linreg_eif(x: np.ndarray, y: np.ndarray | float, theta: np.ndarray, gram_inv: np.ndarray) -> np.ndarray:
    """Least-squares influence ``gram_inv @ x * (y - x @ theta)``, row-wise."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    gram_inv = np.asarray(gram_inv, dtype=float)
    d = theta.shape[0]
    if x.shape[-1] != d or gram_inv.shape != (d, d):
        raise InvalidArgument(
            f"dimension mismatch: x {x.shape}, theta {theta.shape}, gram_inv {gram_inv.shape}"
        )
    resid = np.asarray(y, dtype=float) - x @ theta
    return (x @ gram_inv.T) * np.expand_dims(resid, -1)


def mean_eif(y: np.ndarray | float, theta: float) -> np.ndarray | float:
    """Mean influence ``y - theta``."""
    out = np.asarray(y, dtype=float) - float(np.squeeze(theta))
    return float(out) if out.ndim == 0 else out


def full_eif(
    pattern: MissingPattern | np.ndarray,
    psi1: np.ndarray | None,
    phi: tuple[np.ndarray, np.ndarray, np.ndarray],
    alpha: PolicyVector | np.ndarray,
) -> np.ndarray:
    """Observed-data EIF for records with the given pattern(s).

    ``psi1`` may be ``None`` (or NaN) on records that do not observe ``y``;
    requesting it for a full record raises.
    """
    a = _alpha_rows(alpha)
    phi1, phi2, phi3 = (np.asarray(p, dtype=float) for p in phi)
    if np.ndim(pattern) == 0:
        p = MissingPattern(int(pattern))
        if p == MissingPattern.FULL:
            if psi1 is None or not np.isfinite(psi1).all():
                raise InconsistentRecord("a full record needs psi1")
            return np.asarray(psi1, dtype=float) / a[..., 0] + phi1
        return phi2.copy() if p == MissingPattern.PREF else phi3.copy()
    pattern = np.asarray(pattern)
    full = pattern == MissingPattern.FULL
    out = np.where((pattern == MissingPattern.PREF)[:, None], phi2, phi3)
    if full.any():
        if psi1 is None or not np.isfinite(psi1[full]).all():
            raise InconsistentRecord("full records need psi1")
        a1 = a[full, 0] if a.ndim == 2 else a[0]
        out[full] = psi1[full] / np.reshape(a1, (-1, 1)) + phi1[full]
    return out


@dataclass(frozen=True, eq=False)
class InfluenceSet:
    """Per-record ``psi`` values and the ``phi`` corrections at ``alpha``.

    ``psi1`` rows are NaN on records without ``y``; ``psi2`` rows are NaN on
    records without ``v`` (their ``phi1``/``phi2`` are then NaN as well and
    never used).
    """

    psi1: np.ndarray
    psi2: np.ndarray
    psi3: np.ndarray
    alpha: np.ndarray
    phi1: np.ndarray = field(init=False)
    phi2: np.ndarray = field(init=False)
    phi3: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        psi3 = np.atleast_2d(np.asarray(self.psi3, dtype=float))
        n, d = psi3.shape
        psi1 = np.asarray(self.psi1, dtype=float).reshape(n, d)
        psi2 = np.asarray(self.psi2, dtype=float).reshape(n, d)
        alpha = self.alpha
        alpha = np.asarray(alpha.as_array() if isinstance(alpha, PolicyVector) else alpha, dtype=float)
        if alpha.ndim == 1:
            alpha = np.tile(alpha, (n, 1))
        if alpha.shape != (n, 3):
            raise InvalidArgument(f"alpha must be (n, 3) with n={n}, got {alpha.shape}")
        phi1, phi2, phi3 = phi_from_psi(psi2, psi3, alpha)
        for name, val in (
            ("psi1", psi1), ("psi2", psi2), ("psi3", psi3), ("alpha", alpha),
            ("phi1", phi1), ("phi2", phi2), ("phi3", phi3),
        ):
            object.__setattr__(self, name, val)

    def __len__(self) -> int:
        return self.psi3.shape[0]

    @property
    def dim(self) -> int:
        return self.psi3.shape[1]

    def at(self, alpha: PolicyVector | np.ndarray) -> "InfluenceSet":
        """Same ``psi`` values, corrections recomputed at another policy."""
        a = _alpha_rows(alpha)
        return InfluenceSet(self.psi1, self.psi2, self.psi3, a)

    def observed_eif(self, pattern: np.ndarray) -> np.ndarray:
        return full_eif(pattern, self.psi1, (self.phi1, self.phi2, self.phi3), self.alpha)

    def corrections(self, pattern: np.ndarray) -> np.ndarray:
        """``sum_j 1{pattern j} * phi_j`` per record."""
        pattern = np.asarray(pattern)
        out = np.where((pattern == MissingPattern.FULL)[:, None], self.phi1, self.phi3)
        pref = pattern == MissingPattern.PREF
        out[pref] = self.phi2[pref]
        return out


# Target functionals -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FittedFunctional:
    """Parameter estimate plus whatever the influence function needs."""

    theta: np.ndarray
    context: np.ndarray | None
    functional: "Functional"

    def influence(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.functional.influence(x, y, self.theta, self.context)


class Functional(ABC):
    """A target parameter with an efficient (optionally weighted) estimator.

    Subclasses provide ``fit`` (a weighted Z-estimator on complete cases) and
    ``influence`` (the full-data EIF evaluated at a plug-in estimate).
    """

    name: str = "functional"

    @abstractmethod
    def dim(self, x_dim: int) -> int: ...

    @abstractmethod
    def fit(self, x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> FittedFunctional: ...

    @abstractmethod
    def influence(
        self, x: np.ndarray, y: np.ndarray, theta: np.ndarray, context: np.ndarray | None
    ) -> np.ndarray: ...


def guarded_inverse(mat: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric PSD matrix with a small ridge if near singular."""
    d = mat.shape[0]
    smin = np.linalg.svd(mat, compute_uv=False).min() if d else 1.0
    if smin < 1e-10:
        tr = float(np.trace(mat))
        mat = mat + (1e-10 * tr / d if tr > 0 else 1e-10) * np.eye(d)
    return np.linalg.inv(mat)


class LeastSquares(Functional):
    """Coefficients of the best linear predictor of ``y`` from ``x``.

    With weights this is weighted least squares; the Gram matrix is normalised
    by the total weight so ``gram_inv`` estimates ``E[x x^T]^{-1}``.
    """

    name = "least_squares"

    def __init__(self, intercept: bool = False) -> None:
        self.intercept = intercept

    def _design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if self.intercept:
            x = np.column_stack([np.ones(x.shape[0]), x])
        return x

    def dim(self, x_dim: int) -> int:
        return x_dim + int(self.intercept)

    def fit(self, x, y, weights=None):
        z = self._design(x)
        y = np.asarray(y, dtype=float)
        w = np.ones(z.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        if z.shape[0] == 0:
            raise InvalidArgument("cannot fit least squares on zero rows")
        wsum = w.sum()
        gram = (z * w[:, None]).T @ z / wsum
        gram_inv = guarded_inverse(gram)
        theta = gram_inv @ ((z * w[:, None]).T @ y / wsum)
        return FittedFunctional(theta, gram_inv, self)

    def influence(self, x, y, theta, context):
        return linreg_eif(self._design(x), y, theta, context)


class Mean(Functional):
    """Population mean of ``y``; covariates are ignored."""

    name = "mean"

    def dim(self, x_dim: int) -> int:
        return 1

    def fit(self, x, y, weights=None):
        y = np.asarray(y, dtype=float)
        if y.shape[0] == 0:
            raise InvalidArgument("cannot take the mean of zero rows")
        w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
        return FittedFunctional(np.array([np.sum(w * y) / np.sum(w)]), None, self)

    def influence(self, x, y, theta, context):
        return (np.asarray(y, dtype=float) - theta[0])[:, None]


def functional_from_name(name: str, intercept: bool = False) -> Functional:
    if name in ("least_squares", "linreg", "ols"):
        return LeastSquares(intercept=intercept)
    if name == "mean":
        return Mean()
    raise InvalidArgument(f"unknown functional {name!r}; choose 'least_squares' or 'mean'")
