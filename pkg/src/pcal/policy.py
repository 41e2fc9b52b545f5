"""Propensity policies: constant triples and covariate-dependent softmax maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import InvalidArgument, InvalidPolicy

__all__ = ["PolicyVector", "PolicyFunction", "BASES", "basis_names", "as_alpha_array"]

SUM_TOL = 1e-10


@dataclass(frozen=True)
class PolicyVector:
    """Constant probabilities of drawing a full label, a preference, or nothing."""

    a1: float
    a2: float
    a3: float

    def __post_init__(self) -> None:
        vals = [float(t) for t in (self.a1, self.a2, self.a3)]
        if not all(math.isfinite(t) for t in vals):
            raise InvalidPolicy(f"propensities must be finite, got {vals}")
        if min(vals) < -SUM_TOL:
            raise InvalidPolicy(f"propensities must be non-negative, got {vals}")
        if abs(sum(vals) - 1.0) > SUM_TOL:
            raise InvalidPolicy(f"propensities must sum to 1, got sum {sum(vals)!r}")
        if vals[0] <= 0.0:
            raise InvalidPolicy("the full-label propensity a1 must be positive")
        vals = [max(t, 0.0) for t in vals]
        for name, t in zip(("a1", "a2", "a3"), vals):
            object.__setattr__(self, name, t)

    @classmethod
    def from_a1(cls, a1: float, rho: float, tau: float) -> "PolicyVector":
        """The constant policy that spends exactly ``tau`` per record."""
        a2 = tau - rho * a1
        if abs(a2) < 1e-12:  # rounding at the a1 = tau/rho end
            a2 = 0.0
        a3 = 1.0 - a1 - a2
        if abs(a3) < 1e-12:
            a3, a2 = 0.0, 1.0 - a1
        return cls(a1, a2, a3)

    def as_array(self) -> np.ndarray:
        return np.array([self.a1, self.a2, self.a3])

    def at(self, x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
        """Broadcast to one row per record."""
        n = np.asarray(w1).shape[0]
        return np.tile(self.as_array(), (n, 1))

    def spend(self, rho: float) -> float:
        return rho * self.a1 + self.a2

    def check_floor(self, alpha_floor: float) -> None:
        if self.a1 < alpha_floor:
            raise InvalidPolicy(f"a1={self.a1} is below the floor {alpha_floor}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "constant", "alpha": [self.a1, self.a2, self.a3]}


# Basis recipes ------------------------------------------------------------------------

BASES = ("intercept", "linear", "squares", "quadratic")


def basis_names(kind: str, dim: int) -> list[str]:
    xs = [f"x{j + 1}" for j in range(dim)]
    raw = xs + ["w1", "w2"]
    if kind == "intercept":
        return ["1"]
    if kind == "linear":
        return ["1"] + raw
    if kind == "squares":
        return ["1"] + raw + [f"{c}^2" for c in raw]
    if kind == "quadratic":
        prods = [f"{a}*{b}" for i, a in enumerate(raw) for b in raw[i:]]
        return ["1"] + raw + prods
    raise InvalidArgument(f"unknown basis {kind!r}; choose from {BASES}")


def _raw_basis(kind: str, x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Basis columns without the intercept."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    raw = np.column_stack([x, w1, w2])
    if kind == "intercept":
        return np.empty((raw.shape[0], 0))
    if kind == "linear":
        return raw
    if kind == "squares":
        return np.column_stack([raw, raw**2])
    if kind == "quadratic":
        i, j = np.triu_indices(raw.shape[1])
        return np.column_stack([raw, raw[:, i] * raw[:, j]])
    raise InvalidArgument(f"unknown basis {kind!r}; choose from {BASES}")


@dataclass(frozen=True, eq=False)
class PolicyFunction:
    """Softmax propensities over a standardised basis of ``(x, w1, w2)``.

    For basis row ``b`` the logits are ``(b @ weights[:, 0], b @ weights[:, 1], 0)``
    and ``s = softmax(logits)``. The propensities are::

        a1 = floor + (1 - floor) * scale * s1
        a2 = (1 - floor) * scale * s2
        a3 = 1 - a1 - a2

    so ``a1 >= floor`` and ``a2, a3 >= 0`` hold by construction. ``scale`` in
    ``(0, 1]`` moves mass to the unlabeled class and is how the budget
    constraint is met. The map never sees ``y`` or ``v``.
    """

    basis: str
    weights: np.ndarray
    center: np.ndarray
    spread: np.ndarray
    alpha_floor: float
    scale: float = 1.0
    info: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[1] != 2:
            raise InvalidPolicy(f"weights must have shape (p, 2), got {w.shape}")
        if not 0.0 < self.scale <= 1.0:
            raise InvalidPolicy(f"scale must lie in (0, 1], got {self.scale}")
        if not 0.0 < self.alpha_floor < 1.0:
            raise InvalidPolicy(f"alpha_floor must lie in (0, 1), got {self.alpha_floor}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "center", np.array(self.center, dtype=float))
        object.__setattr__(self, "spread", np.array(self.spread, dtype=float))

    def design(self, x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
        raw = _raw_basis(self.basis, x, np.asarray(w1, float), np.asarray(w2, float))
        raw = (raw - self.center) / self.spread
        return np.column_stack([np.ones(raw.shape[0]), raw])

    def softmax(self, design: np.ndarray) -> np.ndarray:
        z = design @ self.weights
        z = np.column_stack([z, np.zeros(z.shape[0])])
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def alpha_from_softmax(self, s: np.ndarray, scale: float | None = None) -> np.ndarray:
        t = self.scale if scale is None else scale
        f = self.alpha_floor
        a1 = f + (1.0 - f) * t * s[:, 0]
        a2 = (1.0 - f) * t * s[:, 1]
        return np.column_stack([a1, a2, np.clip(1.0 - a1 - a2, 0.0, None)])

    def at(self, x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
        """Propensity rows ``(a1, a2, a3)`` for each record."""
        return self.alpha_from_softmax(self.softmax(self.design(x, w1, w2)))

    def with_scale(self, scale: float) -> "PolicyFunction":
        return PolicyFunction(
            self.basis, self.weights, self.center, self.spread,
            self.alpha_floor, float(scale), dict(self.info),
        )

    def spend(self, x: np.ndarray, w1: np.ndarray, w2: np.ndarray, rho: float) -> float:
        """Average expected cost per record over the given covariates."""
        a = self.at(x, w1, w2)
        return float(np.mean(rho * a[:, 0] + a[:, 1]))

    def fit_to_budget(
        self, x: np.ndarray, w1: np.ndarray, w2: np.ndarray, rho: float, limit: float
    ) -> "PolicyFunction":
        """Rescale so the average spend on these records is ``limit``.

        ``scale`` is capped at 1, so when even the unscaled map spends less
        than ``limit`` the spend stays below it. Only covariates and
        pseudo-outcomes are read, so this can be applied to a pool before any
        label is bought.
        """
        s = self.softmax(self.design(x, w1, w2))
        f = self.alpha_floor
        base = rho * f
        per_unit = (1.0 - f) * float(np.mean(rho * s[:, 0] + s[:, 1]))
        if limit <= base:
            raise InvalidPolicy(f"spend limit {limit} is below the floor cost {base}")
        return self.with_scale(min(1.0, (limit - base) / per_unit))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "softmax",
            "basis": self.basis,
            "weights": self.weights.tolist(),
            "center": self.center.tolist(),
            "spread": self.spread.tolist(),
            "alpha_floor": self.alpha_floor,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PolicyFunction":
        return cls(
            basis=d["basis"],
            weights=np.array(d["weights"], dtype=float).reshape(-1, 2),
            center=np.array(d["center"], dtype=float),
            spread=np.array(d["spread"], dtype=float),
            alpha_floor=float(d["alpha_floor"]),
            scale=float(d.get("scale", 1.0)),
        )


def policy_from_dict(d: dict[str, Any]) -> PolicyVector | PolicyFunction:
    kind = d.get("kind")
    if kind == "constant":
        return PolicyVector(*d["alpha"])
    if kind == "softmax":
        return PolicyFunction.from_dict(d)
    raise InvalidPolicy(f"unknown policy kind {kind!r}")


def as_alpha_array(
    policy: PolicyVector | PolicyFunction | np.ndarray | Sequence[float],
    x: np.ndarray | None = None,
    w1: np.ndarray | None = None,
    w2: np.ndarray | None = None,
    n: int | None = None,
) -> np.ndarray:
    """Per-record ``(n, 3)`` propensities from any policy representation."""
    if isinstance(policy, PolicyFunction):
        if x is None:
            raise InvalidArgument("a covariate-dependent policy needs x, w1, w2")
        return policy.at(x, w1, w2)
    if isinstance(policy, PolicyVector):
        arr = policy.as_array()
    else:
        arr = np.asarray(policy, dtype=float)
    if arr.ndim == 1:
        if arr.shape != (3,):
            raise InvalidPolicy(f"a constant policy needs 3 entries, got {arr.shape}")
        if n is None:
            n = np.asarray(w1).shape[0] if w1 is not None else 1
        arr = np.tile(arr, (n, 1))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidPolicy(f"propensities must have shape (n, 3), got {arr.shape}")
    return arr
