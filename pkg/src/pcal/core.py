"""Data model: missing patterns, records, datasets, budgets, folds and CSV I/O."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ConsistencyError,
    DomainError,
    InconsistentRecord,
    InvalidArgument,
    SchemaError,
)

__all__ = [
    "MissingPattern",
    "Record",
    "Dataset",
    "BudgetConfig",
    "FoldAssignment",
    "preference_label",
    "preference_labels",
    "split_folds",
    "read_csv_dataset",
    "write_csv_dataset",
    "DEFAULT_SCHEMA",
]


class MissingPattern(enum.IntEnum):
    """Which variables of ``(x, y, w1, w2, v)`` a record observes.

    The patterns are nested: everything ``UNLABELED`` observes is also observed
    by ``PREF``, and everything ``PREF`` observes is observed by ``FULL``.
    """

    FULL = 0
    PREF = 1
    UNLABELED = 2

    @property
    def observed(self) -> frozenset[str]:
        return _OBSERVED[self]

    @property
    def label(self) -> str:
        return self.name.lower()


_OBSERVED = {
    MissingPattern.FULL: frozenset({"x", "y", "w1", "w2", "v"}),
    MissingPattern.PREF: frozenset({"x", "w1", "w2", "v"}),
    MissingPattern.UNLABELED: frozenset({"x", "w1", "w2"}),
}


def preference_label(y: float, w1: float, w2: float) -> int:
    """Return 1 when the first pseudo-outcome is at least as close to ``y``.

    Ties go to the first model.
    """
    if not (math.isfinite(y) and math.isfinite(w1) and math.isfinite(w2)):
        raise DomainError(f"preference_label needs finite inputs, got {(y, w1, w2)}")
    return int(abs(w1 - y) <= abs(w2 - y))


def preference_labels(y: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Vectorised :func:`preference_label`; returns a float array of 0/1."""
    y, w1, w2 = (np.asarray(a, dtype=float) for a in (y, w1, w2))
    if not (np.isfinite(y).all() and np.isfinite(w1).all() and np.isfinite(w2).all()):
        raise DomainError("preference_labels needs finite inputs")
    return (np.abs(w1 - y) <= np.abs(w2 - y)).astype(float)


@dataclass(frozen=True)
class Record:
    """One observation. ``y`` and ``v`` are ``None`` when not observed."""

    x: tuple[float, ...]
    w1: float
    w2: float
    v: int | None
    y: float | None
    pattern: MissingPattern

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", tuple(float(t) for t in self.x))
        object.__setattr__(self, "pattern", MissingPattern(self.pattern))
        has_y = self.y is not None
        has_v = self.v is not None
        expected = {
            MissingPattern.FULL: (True, True),
            MissingPattern.PREF: (False, True),
            MissingPattern.UNLABELED: (False, False),
        }[self.pattern]
        if (has_y, has_v) != expected:
            raise InconsistentRecord(
                f"pattern {self.pattern.label} expects y present={expected[0]}, "
                f"v present={expected[1]}; got y={self.y!r}, v={self.v!r}"
            )
        if has_v and self.v not in (0, 1):
            raise InconsistentRecord(f"preference must be 0 or 1, got {self.v!r}")
        if has_y and self.v != preference_label(self.y, self.w1, self.w2):
            raise ConsistencyError(
                f"v={self.v} contradicts y={self.y}, w1={self.w1}, w2={self.w2}"
            )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of records sharing one covariate dimension.

    Arrays are copied and frozen on construction. Missing ``y`` / ``v`` entries
    are held as NaN internally; the pattern column is authoritative.
    """

    x: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    v: np.ndarray
    y: np.ndarray
    pattern: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] < 1:
            raise InvalidArgument(f"x must be (n, d) with d >= 1, got shape {x.shape}")
        n = x.shape[0]
        cols = {}
        for name in ("w1", "w2", "v", "y"):
            a = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if a.shape[0] != n:
                raise InvalidArgument(f"{name} has {a.shape[0]} rows, x has {n}")
            cols[name] = a
        pattern = np.asarray(self.pattern).reshape(-1).astype(np.int8)
        if pattern.shape[0] != n:
            raise InvalidArgument(f"pattern has {pattern.shape[0]} rows, x has {n}")
        if n and (pattern.min() < 0 or pattern.max() > 2):
            raise InvalidArgument("pattern codes must be 0 (full), 1 (pref) or 2 (unlabeled)")
        if not (np.isfinite(x).all() and np.isfinite(cols["w1"]).all() and np.isfinite(cols["w2"]).all()):
            raise DomainError("x, w1 and w2 must be finite")

        full = pattern == MissingPattern.FULL
        has_v = pattern != MissingPattern.UNLABELED
        y, v = cols["y"], cols["v"]
        if not np.isfinite(y[full]).all():
            raise InconsistentRecord("full records need a finite y")
        if not np.isnan(y[~full]).all():
            raise InconsistentRecord("only full records may carry y")
        if not np.isin(v[has_v], (0.0, 1.0)).all():
            raise InconsistentRecord("preference records need v in {0, 1}")
        if not np.isnan(v[~has_v]).all():
            raise InconsistentRecord("unlabeled records may not carry v")
        implied = preference_labels(y[full], cols["w1"][full], cols["w2"][full])
        bad = np.flatnonzero(implied != v[full])
        if bad.size:
            row = int(np.flatnonzero(full)[bad[0]])
            raise ConsistencyError(f"record {row}: v contradicts the preference implied by y")

        object.__setattr__(self, "x", _readonly(x))
        for name, a in cols.items():
            object.__setattr__(self, name, _readonly(a))
        pattern = pattern.copy()
        pattern.setflags(write=False)
        object.__setattr__(self, "pattern", pattern)

    # construction -----------------------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        x: np.ndarray,
        w1: np.ndarray,
        w2: np.ndarray,
        *,
        y: np.ndarray | None = None,
        v: np.ndarray | None = None,
        pattern: np.ndarray | None = None,
    ) -> "Dataset":
        """Build a dataset, filling ``v`` from ``y`` and inferring patterns.

        With ``pattern=None`` the pattern follows from which of ``y`` / ``v``
        are finite. With an explicit pattern, unobserved entries are blanked.
        """
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        w1 = np.asarray(w1, dtype=float)
        w2 = np.asarray(w2, dtype=float)
        y = np.full(n, np.nan) if y is None else np.asarray(y, dtype=float).copy()
        v = np.full(n, np.nan) if v is None else np.asarray(v, dtype=float).copy()
        has_y = np.isfinite(y)
        fill = has_y & ~np.isfinite(v)
        if fill.any():
            v[fill] = preference_labels(y[fill], w1[fill], w2[fill])
        if pattern is None:
            pattern = np.where(has_y, 0, np.where(np.isfinite(v), 1, 2))
        else:
            pattern = np.asarray(pattern).astype(np.int8)
            y = np.where(pattern == 0, y, np.nan)
            v = np.where(pattern == 2, np.nan, v)
        return cls(x=x, w1=w1, w2=w2, v=v, y=y, pattern=pattern)

    @classmethod
    def from_records(cls, records: Sequence[Record]) -> "Dataset":
        if not records:
            raise InvalidArgument("cannot build a dataset from zero records")
        dims = {len(r.x) for r in records}
        if len(dims) != 1:
            raise SchemaError(f"records have mixed covariate dimensions {sorted(dims)}")
        return cls(
            x=np.array([r.x for r in records], dtype=float),
            w1=np.array([r.w1 for r in records]),
            w2=np.array([r.w2 for r in records]),
            v=np.array([np.nan if r.v is None else r.v for r in records], dtype=float),
            y=np.array([np.nan if r.y is None else r.y for r in records], dtype=float),
            pattern=np.array([int(r.pattern) for r in records]),
        )

    # access -------------------------------------------------------------------------

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __getitem__(self, i: int) -> Record:
        p = MissingPattern(int(self.pattern[i]))
        return Record(
            x=tuple(self.x[i]),
            w1=float(self.w1[i]),
            w2=float(self.w2[i]),
            v=None if p == MissingPattern.UNLABELED else int(self.v[i]),
            y=float(self.y[i]) if p == MissingPattern.FULL else None,
            pattern=p,
        )

    def __iter__(self) -> Iterator[Record]:
        return (self[i] for i in range(len(self)))

    @property
    def records(self) -> list[Record]:
        return list(self)

    def subset(self, index: np.ndarray | Sequence[int]) -> "Dataset":
        """Rows selected by an integer index or boolean mask, in that order."""
        idx = np.asarray(index)
        return Dataset(
            x=self.x[idx], w1=self.w1[idx], w2=self.w2[idx],
            v=self.v[idx], y=self.y[idx], pattern=self.pattern[idx],
        )

    def mask(self, pattern: MissingPattern) -> np.ndarray:
        return self.pattern == pattern

    def counts(self) -> dict[str, int]:
        return {p.label: int((self.pattern == p).sum()) for p in MissingPattern}

    def unlabeled(self) -> "Dataset":
        """The same rows with every label hidden (a pool)."""
        n = len(self)
        return Dataset(
            x=self.x, w1=self.w1, w2=self.w2,
            v=np.full(n, np.nan), y=np.full(n, np.nan), pattern=np.full(n, 2),
        )


@dataclass(frozen=True)
class BudgetConfig:
    """Labeling prices and the per-sample budget.

    ``rho`` is the price of a full label in units of a preference label, ``tau``
    the expected spend per pool record (``B / n``), ``alpha_floor`` the lower
    bound on the full-label propensity and ``slack`` the tolerance allowed on
    an empirically estimated budget constraint.
    """

    rho: float
    tau: float
    alpha_floor: float = 1e-6
    slack: float | None = None

    def __post_init__(self) -> None:
        rho, tau, floor = float(self.rho), float(self.tau), float(self.alpha_floor)
        if not all(math.isfinite(t) for t in (rho, tau, floor)):
            raise ConfigError("budget parameters must be finite")
        if rho <= 1.0:
            raise ConfigError(f"rho must exceed 1 (full labels cost more), got {rho}")
        if not tau > 0.0:
            raise ConfigError(f"tau must be positive, got {tau}")
        if not 0.0 < floor < 1.0:
            raise ConfigError(f"alpha_floor must lie in (0, 1), got {floor}")
        if tau <= rho * floor:
            raise ConfigError(
                f"tau={tau} cannot fund the floor allocation rho*alpha_floor={rho * floor}"
            )
        slack = max(1e-3 * tau, 1e-4) if self.slack is None else float(self.slack)
        if not (math.isfinite(slack) and slack >= 0.0):
            raise ConfigError(f"slack must be >= 0, got {slack}")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "alpha_floor", floor)
        object.__setattr__(self, "slack", slack)

    def a1_bounds(self) -> tuple[float, float]:
        """Feasible range of a constant full-label propensity.

        The spend equation ``rho*a1 + a2 = tau`` with ``a2, a3 >= 0`` pins
        ``a1`` between ``(tau-1)/(rho-1)`` and ``tau/rho``.
        """
        lo = max(self.alpha_floor, (self.tau - 1.0) / (self.rho - 1.0))
        return lo, self.tau / self.rho

    def total(self, n: int) -> float:
        """Total budget ``B`` for a pool of ``n`` records."""
        return self.tau * n


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_index: np.ndarray
    k: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.fold_index, dtype=np.int64).copy()
        idx.setflags(write=False)
        object.__setattr__(self, "fold_index", idx)

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_index == fold)

    def sizes(self) -> list[int]:
        return [int((self.fold_index == j).sum()) for j in range(self.k)]


def split_folds(n: int, k: int, seed: int | np.random.SeedSequence | None) -> FoldAssignment:
    """Random balanced partition of ``range(n)`` into ``k`` folds."""
    if k < 2:
        raise InvalidArgument(f"need at least 2 folds, got k={k}")
    if n < k:
        raise InvalidArgument(f"cannot split n={n} records into k={k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    fold[perm] = np.arange(n) % k
    return FoldAssignment(fold, k)


# CSV ---------------------------------------------------------------------------------

DEFAULT_SCHEMA: Mapping[str, object] = {"x": "x", "w1": "w1", "w2": "w2", "v": "v", "y": "y"}


def _x_columns(header: Sequence[str], layout: object) -> list[str]:
    if isinstance(layout, str):
        found = []
        j = 1
        while f"{layout}{j}" in header:
            found.append(f"{layout}{j}")
            j += 1
        return found
    return list(layout)  # type: ignore[arg-type]


def _cell(value: str, column: str, line: int) -> float:
    value = value.strip()
    if value == "":
        return math.nan
    try:
        out = float(value)
    except ValueError:
        raise SchemaError(f"line {line}: column {column!r} is not numeric: {value!r}") from None
    if not math.isfinite(out):
        raise SchemaError(f"line {line}: column {column!r} must be finite or empty")
    return out


def read_csv_dataset(path: str | Path, schema: Mapping[str, object] | None = None) -> Dataset:
    """Load records from a comma-separated file with a header row.

    ``schema`` maps the roles ``x``, ``w1``, ``w2``, ``v`` and ``y`` onto column
    names. ``x`` is either a prefix (``"x"`` matches ``x1, x2, ...``) or an
    explicit list. The ``v`` and ``y`` columns may be absent or blank; a row's
    pattern is inferred from which of them are filled. A filled ``y`` with a
    blank ``v`` gets ``v`` computed from the outcome.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        xcols = _x_columns(header, schema["x"])
        if not xcols:
            raise SchemaError(f"{path}: no covariate columns matching {schema['x']!r}")
        required = xcols + [str(schema["w1"]), str(schema["w2"])]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {missing}")
        pos = {name: header.index(name) for name in header}
        vcol, ycol = str(schema["v"]), str(schema["y"])
        rows: list[list[float]] = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}: line {line} has {len(row)} fields, header has {len(header)}"
                )
            xs = [_cell(row[pos[c]], c, line) for c in xcols]
            w1 = _cell(row[pos[str(schema['w1'])]], "w1", line)
            w2 = _cell(row[pos[str(schema['w2'])]], "w2", line)
            if any(math.isnan(t) for t in xs + [w1, w2]):
                raise SchemaError(f"{path}: line {line} has a blank covariate or pseudo-outcome")
            v = _cell(row[pos[vcol]], vcol, line) if vcol in pos else math.nan
            y = _cell(row[pos[ycol]], ycol, line) if ycol in pos else math.nan
            if not math.isnan(v) and v not in (0.0, 1.0):
                raise SchemaError(f"{path}: line {line}: v must be 0 or 1, got {v}")
            if not math.isnan(y) and not math.isnan(v) and v != preference_label(y, w1, w2):
                raise ConsistencyError(
                    f"{path}: line {line}: v={int(v)} contradicts y={y}, w1={w1}, w2={w2}"
                )
            rows.append(xs + [w1, w2, v, y])
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    d = len(xcols)
    return Dataset.from_arrays(arr[:, :d], arr[:, d], arr[:, d + 1], y=arr[:, d + 3], v=arr[:, d + 2])


def _fmt(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def write_csv_dataset(
    dataset: Dataset,
    path: str | Path,
    schema: Mapping[str, object] | None = None,
    extra: Mapping[str, Iterable[object]] | None = None,
) -> Path:
    """Write ``dataset`` in the layout :func:`read_csv_dataset` reads.

    Floats are written with ``repr`` so values round-trip exactly. ``extra``
    appends further columns (e.g. propensities) after the standard ones.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    xlayout = schema["x"]
    xcols = [f"{xlayout}{j + 1}" for j in range(dataset.dim)] if isinstance(xlayout, str) else list(xlayout)  # type: ignore[arg-type]
    extra = {k: list(v) for k, v in (extra or {}).items()}
    header = xcols + [str(schema[k]) for k in ("w1", "w2", "v", "y")] + list(extra)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(dataset)):
            v = dataset.v[i]
            row = [_fmt(t) for t in dataset.x[i]]
            row += [_fmt(dataset.w1[i]), _fmt(dataset.w2[i])]
            row += ["" if math.isnan(v) else str(int(v)), _fmt(dataset.y[i])]
            row += [str(col[i]) for col in extra.values()]
            writer.writerow(row)
    return Path(path)
