"""Regression models for the conditional projections of the full-data influence.

``psi2`` regresses ``psi1`` on ``(x, w1, w2, v)`` and ``psi3`` regresses it on
``(x, w1, w2)``. Both are fitted on fully labeled records only. Two learners
ship: ridge on a quadratic feature expansion (default) and k-nearest
neighbours. Anything with the same ``fit`` signature as
:class:`NuisanceConfig` can be passed to the estimators instead, which is how
exact or deliberately broken nuisances are injected in experiments.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientData, InvalidArgument

__all__ = [
    "Target",
    "NuisanceConfig",
    "ProjectionModel",
    "ProjectionPair",
    "NuisanceProvider",
    "NoiseNuisance",
    "ZeroNuisance",
    "features",
    "midpoint_side",
    "fit_projection",
    "predict_projection",
    "min_train_rows",
]

METHODS = ("ridge", "knn")


class Target(enum.Enum):
    PSI2 = "psi2"
    PSI3 = "psi3"


def min_train_rows(d: int) -> int:
    return max(20, 5 * d)


def midpoint_side(v, w1, w2) -> np.ndarray:
    """``+1`` if the preference puts ``y`` above ``(w1 + w2) / 2``, else ``-1``.

    ``v = 1`` means ``y`` is at least as close to ``w1``, which is the upper
    side of the midpoint exactly when ``w1 > w2``. Ties in ``w`` give ``0``.
    """
    v = np.asarray(v, dtype=float)
    return (2.0 * v - 1.0) * np.sign(np.asarray(w1, float) - np.asarray(w2, float))


def _base_columns(x, w1, w2, v=None) -> tuple[np.ndarray, int]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    w1 = np.asarray(w1, float)
    w2 = np.asarray(w2, float)
    cols = [x, w1[:, None], w2[:, None]]
    n_binary = 0
    if v is not None:
        cols += [np.asarray(v, float)[:, None], midpoint_side(v, w1, w2)[:, None]]
        n_binary = 2
    return np.hstack(cols), n_binary


def features(x, w1, w2, v=None) -> np.ndarray:
    """Quadratic expansion of the base variables, without an intercept.

    Base variables are ``x, w1, w2`` and, when given, ``v`` and its
    :func:`midpoint_side` encoding. Columns are the base variables followed
    by all pairwise products. Squares of the two label columns duplicate
    existing columns (``v*v = v``, ``side*side = |side|``) and are dropped.
    """
    base, n_binary = _base_columns(x, w1, w2, v)
    p = base.shape[1]
    i, j = np.triu_indices(p)
    if n_binary:
        keep = ~((i == j) & (i >= p - n_binary))
        i, j = i[keep], j[keep]
    return np.hstack([base, base[:, i] * base[:, j]])


@dataclass(frozen=True)
class NuisanceConfig:
    """Learner choice for the projections.

    ``ridge_lambda=None`` picks ``1e-3 * trace(Z^T Z) / p`` on the standardised
    design ``Z``; ``0`` gives plain least squares. ``knn_k=None`` picks
    ``ceil(n ** 0.4)``.
    """

    method: str = "ridge"
    ridge_lambda: float | None = None
    knn_k: int | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown nuisance method {self.method!r}; choose from {METHODS}")
        if self.ridge_lambda is not None and not self.ridge_lambda >= 0:
            raise InvalidArgument(f"ridge_lambda must be >= 0, got {self.ridge_lambda}")
        if self.knn_k is not None and self.knn_k < 1:
            raise InvalidArgument(f"knn_k must be >= 1, got {self.knn_k}")

    def fit(self, x, w1, w2, v, psi1) -> "ProjectionPair":
        return ProjectionPair(
            fit_projection(x, w1, w2, v, psi1, Target.PSI2, self),
            fit_projection(x, w1, w2, v, psi1, Target.PSI3, self),
        )


@dataclass(frozen=True, eq=False)
class ProjectionModel:
    target: Target
    method: str
    params: dict[str, Any]
    dim: int

    def _design(self, x, w1, w2, v) -> np.ndarray:
        if self.target is Target.PSI2:
            if v is None or not np.isfinite(np.asarray(v, float)).all():
                raise InvalidArgument("the psi2 model needs an observed preference label v")
            raw = features(x, w1, w2, v)
        else:
            raw = features(x, w1, w2)
        return (raw - self.params["center"]) / self.params["spread"]

    def predict(self, x, w1, w2, v=None) -> np.ndarray:
        z = self._design(x, w1, w2, v)
        if self.method == "ridge":
            return self.params["intercept"] + z @ self.params["coef"]
        tree, values, k = self.params["tree"], self.params["values"], self.params["k"]
        _, idx = tree.query(z, k=k)
        if k == 1:
            return values[idx]
        return values[idx].mean(axis=1)


def _ridge(z: np.ndarray, t: np.ndarray, lam: float | None) -> tuple[np.ndarray, np.ndarray, float]:
    """Ridge with an unpenalised intercept on a standardised design."""
    t_mean = t.mean(axis=0)
    tc = t - t_mean
    gram = z.T @ z
    p = gram.shape[0]
    if lam is None:
        lam = 1e-3 * float(np.trace(gram)) / max(p, 1)
    rhs = z.T @ tc
    if lam == 0.0:
        coef = np.linalg.lstsq(z, tc, rcond=None)[0]
        return t_mean, coef, 0.0
    eye = np.eye(p)
    scale = max(float(np.trace(gram)) / max(p, 1), 1.0)
    for _ in range(12):
        mat = gram + lam * eye
        # tiny penalties on collinear designs can leave the system numerically singular
        if np.linalg.cond(mat) < 1e12:
            break
        lam = max(10.0 * lam, 1e-8 * scale)
    coef = np.linalg.solve(mat, rhs)
    return t_mean, coef, lam


def fit_projection(x, w1, w2, v, psi1, target: Target, config: NuisanceConfig | None = None) -> ProjectionModel:
    """Fit one projection model on fully labeled rows."""
    config = NuisanceConfig() if config is None else config
    psi1 = np.asarray(psi1, dtype=float)
    if psi1.ndim == 1:
        psi1 = psi1[:, None]
    n, d = psi1.shape
    if n < min_train_rows(d):
        raise InsufficientData(f"need at least {min_train_rows(d)} labeled rows to fit {target.value}, got {n}")
    raw = features(x, w1, w2, v if target is Target.PSI2 else None)
    center = raw.mean(axis=0)
    spread = raw.std(axis=0)
    spread[spread < 1e-12] = 1.0
    z = (raw - center) / spread
    if config.method == "ridge":
        intercept, coef, lam = _ridge(z, psi1, config.ridge_lambda)
        params = {"center": center, "spread": spread, "intercept": intercept, "coef": coef, "lambda": lam}
    else:
        k = config.knn_k if config.knn_k is not None else math.ceil(n**0.4)
        params = {"center": center, "spread": spread, "tree": cKDTree(z), "values": psi1, "k": min(k, n)}
    return ProjectionModel(target, config.method, params, d)


def predict_projection(model: ProjectionModel, x, w1, w2, v=None) -> np.ndarray:
    return model.predict(x, w1, w2, v)


@dataclass(frozen=True, eq=False)
class ProjectionPair:
    """Fitted ``psi2`` and ``psi3`` predictors."""

    psi2_model: Any
    psi3_model: Any

    def psi2(self, x, w1, w2, v) -> np.ndarray:
        return self.psi2_model.predict(x, w1, w2, v)

    def psi3(self, x, w1, w2) -> np.ndarray:
        return self.psi3_model.predict(x, w1, w2)


class NuisanceProvider(Protocol):
    def fit(self, x, w1, w2, v, psi1) -> ProjectionPair: ...


class _Const:
    def __init__(self, fn):
        self.predict = fn


class ZeroNuisance:
    """Predicts zero for both projections; the correction then vanishes."""

    def fit(self, x, w1, w2, v, psi1) -> ProjectionPair:
        d = np.atleast_2d(np.asarray(psi1).T).shape[0]
        zero = lambda x, w1, w2, v=None: np.zeros((np.asarray(w1).shape[0], d))  # noqa: E731
        return ProjectionPair(_Const(zero), _Const(zero))


class NoiseNuisance:
    """Pure-noise projections, independent of everything observed.

    Each prediction is Gaussian with the per-coordinate spread of the training
    ``psi1``. Useful for checking that the estimators stay safe when the
    nuisance models carry no information.
    """

    def __init__(self, seed: int | np.random.SeedSequence | None = None) -> None:
        self.rng = np.random.default_rng(seed)

    def fit(self, x, w1, w2, v, psi1) -> ProjectionPair:
        psi1 = np.asarray(psi1, dtype=float)
        sd = psi1.std(axis=0)
        rng = self.rng

        def draw(x, w1, w2, v=None):
            return rng.normal(size=(np.asarray(w1).shape[0], sd.shape[0])) * sd

        return ProjectionPair(_Const(draw), _Const(draw))
