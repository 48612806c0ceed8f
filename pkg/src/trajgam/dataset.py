"""Long-format trajectory data: loading, factor handling and series bookkeeping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

NUMERIC = "numeric"
FACTOR = "factor"

MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan", "N/A"})


class DatasetError(ValueError):
    """Raised for malformed data or invalid column operations."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Column:
    """One named column. Factors keep integer codes into ``levels``; level 0 is the reference."""

    name: str
    kind: str
    data: np.ndarray
    levels: tuple[str, ...] = ()
    ordered: bool = False
    units: str | None = None

    def __post_init__(self):
        if self.kind not in (NUMERIC, FACTOR):
            raise DatasetError(f"unknown column kind {self.kind!r}")
        object.__setattr__(self, "data", _frozen(self.data))

    @property
    def is_factor(self) -> bool:
        return self.kind == FACTOR

    @property
    def reference(self) -> str | None:
        return self.levels[0] if self.levels else None

    def labels(self) -> np.ndarray:
        """Level names per row (factors) or the raw values (numerics)."""
        if not self.is_factor:
            return self.data
        return np.asarray(self.levels, dtype=object)[self.data]


@dataclass(frozen=True)
class Dataset:
    """Immutable long-format table; row order is exactly as read."""

    columns: Mapping[str, Column]
    n: int

    def __post_init__(self):
        cols = dict(self.columns)
        for name, col in cols.items():
            if len(col.data) != self.n:
                raise DatasetError(f"column {name!r} has {len(col.data)} entries, expected {self.n}")
        object.__setattr__(self, "columns", cols)

    @classmethod
    def from_columns(cls, columns: Iterable[Column]) -> "Dataset":
        columns = list(columns)
        n = len(columns[0].data) if columns else 0
        out = {}
        for c in columns:
            if c.name in out:
                raise DatasetError(f"duplicate column {c.name!r}")
            out[c.name] = c
        return cls(out, n)

    @classmethod
    def from_dict(
        cls,
        data: Mapping[str, Sequence],
        factors: Iterable[str] = (),
        levels: Mapping[str, Sequence[str]] | None = None,
    ) -> "Dataset":
        """Build from in-memory arrays. Columns named in ``factors`` (or holding strings) become factors."""
        factors = set(factors)
        levels = dict(levels or {})
        cols = []
        for name, values in data.items():
            arr = np.asarray(values)
            if name in factors or arr.dtype.kind in "OUSb":
                cols.append(make_factor(name, [str(v) for v in arr], levels.get(name)))
            else:
                arr = arr.astype(float)
                if not np.all(np.isfinite(arr)):
                    raise DatasetError(f"column {name!r} contains non-finite values")
                cols.append(Column(name, NUMERIC, arr))
        return cls.from_columns(cols)

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise DatasetError(f"unknown column {name!r}") from None

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def numeric(self, name: str) -> np.ndarray:
        col = self[name]
        if col.is_factor:
            raise DatasetError(f"column {name!r} is a factor, expected numeric")
        return col.data

    def factor(self, name: str) -> Column:
        col = self[name]
        if not col.is_factor:
            raise DatasetError(f"column {name!r} is numeric, expected a factor")
        return col

    def with_column(self, col: Column, replace: bool = False) -> "Dataset":
        if col.name in self.columns and not replace:
            raise DatasetError(f"column {col.name!r} already exists")
        if len(col.data) != self.n:
            raise DatasetError(f"column {col.name!r} has wrong length")
        cols = dict(self.columns)
        cols[col.name] = col
        return Dataset(cols, self.n)

    def take(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        cols = {
            name: Column(c.name, c.kind, c.data[rows], c.levels, c.ordered, c.units)
            for name, c in self.columns.items()
        }
        n = int(rows.sum()) if rows.dtype == bool else len(rows)
        return Dataset(cols, n)

    def as_arrays(self) -> dict[str, np.ndarray]:
        """Column name -> numeric values or per-row level labels."""
        return {name: c.labels() for name, c in self.columns.items()}


def make_factor(
    name: str,
    labels: Sequence[str],
    levels: Sequence[str] | None = None,
    ordered: bool = False,
) -> Column:
    """Encode string labels; levels default to first-appearance order."""
    if levels is None:
        levels = list(dict.fromkeys(labels))
    else:
        levels = list(levels)
        if len(set(levels)) != len(levels):
            raise DatasetError(f"duplicate levels for factor {name!r}")
    index = {lev: i for i, lev in enumerate(levels)}
    try:
        codes = np.array([index[v] for v in labels], dtype=np.int64)
    except KeyError as e:
        raise DatasetError(f"value {e.args[0]!r} of {name!r} is not a declared level") from None
    return Column(name, FACTOR, codes, tuple(levels), ordered)


def _parse_number(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if math.isinf(value):
        raise DatasetError(f"row {row}, column {col!r}: infinite value {text!r}")
    return value


def _infer_kind(values: Sequence[str]) -> str:
    for v in values:
        if v.strip() in MISSING_TOKENS:
            continue
        try:
            float(v)
        except ValueError:
            return FACTOR
    return NUMERIC


def load_long_csv(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    drop_na: bool = False,
    levels: Mapping[str, Sequence[str]] | None = None,
) -> Dataset:
    """Read a long-format CSV.

    ``schema`` maps column names to ``"numeric"`` or ``"factor"``; only those
    columns are kept. Without a schema every column is loaded and its type
    inferred (numeric when every non-missing cell parses as a float).
    Rows with missing cells raise unless ``drop_na`` is set, in which case the
    whole row is dropped.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, no header row") from None
        rows = [r for r in reader if r]

    header = [h.strip() for h in header]
    seen = set()
    for h in header:
        if h in seen:
            raise DatasetError(f"{path}: duplicate header {h!r}")
        seen.add(h)

    if schema is None:
        wanted = {h: _infer_kind([r[i] for r in rows if i < len(r)]) for i, h in enumerate(header)}
    else:
        wanted = dict(schema)
        missing = [c for c in wanted if c not in seen]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {', '.join(missing)}")
    for kind in wanted.values():
        if kind not in (NUMERIC, FACTOR):
            raise DatasetError(f"schema kind must be 'numeric' or 'factor', got {kind!r}")

    pos = {h: i for i, h in enumerate(header)}
    raw: dict[str, list[str]] = {c: [] for c in wanted}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DatasetError(f"{path}: row {lineno} has {len(r)} fields, header has {len(header)}")
        cells = {c: r[pos[c]].strip() for c in wanted}
        if any(v in MISSING_TOKENS for v in cells.values()):
            if drop_na:
                continue
            bad = [c for c, v in cells.items() if v in MISSING_TOKENS]
            raise DatasetError(f"{path}: row {lineno} has missing value(s) in {', '.join(bad)}")
        for c, v in cells.items():
            raw[c].append(v)
        raw.setdefault("__lineno__", []).append(str(lineno))

    linenos = [int(v) for v in raw.pop("__lineno__", [])]
    levels = dict(levels or {})
    cols = []
    for name, kind in wanted.items():
        vals = raw[name]
        if kind == NUMERIC:
            data = np.array([_parse_number(v, linenos[i], name) for i, v in enumerate(vals)], dtype=float)
            cols.append(Column(name, NUMERIC, data))
        else:
            cols.append(make_factor(name, vals, levels.get(name)))
    return Dataset({c.name: c for c in cols}, len(linenos))


def write_csv(d: Dataset, path) -> None:
    """Write ``d`` to a path or an open text stream; floats use the shortest exact repr."""
    if hasattr(path, "write"):
        _write_rows(d, path)
        return
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _write_rows(d, fh)


def _write_rows(d: Dataset, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(d.names)
    cols = [d[c] for c in d.names]
    for i in range(d.n):
        w.writerow([
            c.levels[c.data[i]] if c.is_factor else repr(float(c.data[i]))
            for c in cols
        ])


@dataclass(frozen=True)
class SeriesIndex:
    """Start-of-series flags and the row span of each contiguous series."""

    series_column: str
    start_flags: np.ndarray
    ranges: tuple[tuple[str, int, int], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "start_flags", _frozen(np.asarray(self.start_flags, dtype=bool)))

    @property
    def n(self) -> int:
        return len(self.start_flags)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([b - a for _, a, b in self.ranges], dtype=int)

    @classmethod
    def from_flags(cls, flags: Sequence[bool], series_column: str = "AR.start") -> "SeriesIndex":
        """Rebuild from flags alone (series labels become their ordinal)."""
        flags = np.asarray(flags, dtype=bool).copy()
        if len(flags) and not flags[0]:
            raise DatasetError("the first row must start a series")
        starts = np.flatnonzero(flags)
        ends = np.append(starts[1:], len(flags))
        ranges = tuple((str(i), int(a), int(b)) for i, (a, b) in enumerate(zip(starts, ends)))
        return cls(series_column, flags, ranges)


def mark_series_starts(d: Dataset, series_col: str, order_col: str) -> SeriesIndex:
    """Flag the first row of each series block.

    Each level of ``series_col`` must occupy one contiguous block of rows and
    ``order_col`` must be strictly increasing inside the block.
    """
    col = d.factor(series_col)
    order = d.numeric(order_col)
    codes = col.data
    flags = np.zeros(d.n, dtype=bool)
    ranges = []
    seen: set[int] = set()
    start = 0
    for i in range(d.n):
        if i == 0 or codes[i] != codes[i - 1]:
            if codes[i] in seen:
                raise DatasetError(
                    f"series {col.levels[codes[i]]!r} of {series_col!r} is not contiguous "
                    f"(reappears at row {i})"
                )
            seen.add(int(codes[i]))
            if i > 0:
                ranges.append((col.levels[codes[i - 1]], start, i))
            flags[i] = True
            start = i
        elif not order[i] > order[i - 1]:
            raise DatasetError(
                f"{order_col!r} is not strictly increasing within series "
                f"{col.levels[codes[i]]!r} at row {i}"
            )
    if d.n:
        ranges.append((col.levels[codes[-1]], start, d.n))
    return SeriesIndex(series_col, flags, tuple(ranges))


def to_ordered_treatment(d: Dataset, col: str, reference: str, name: str | None = None) -> Dataset:
    """Mark a factor as ordered with ``reference`` moved to level 0.

    With ``name`` given the result is added as a new column (mirroring
    ``word.ord <- as.ordered(word)``); otherwise the column is replaced.
    """
    c = d.factor(col)
    if reference not in c.levels:
        raise DatasetError(f"{reference!r} is not a level of {col!r}; levels are {list(c.levels)}")
    levels = [reference] + [lev for lev in c.levels if lev != reference]
    new = make_factor(name or col, list(c.labels()), levels, ordered=True)
    return d.with_column(new, replace=name is None)


def treatment_dummies(c: Column) -> tuple[list[str], np.ndarray]:
    """One 0/1 column per non-reference level, labelled ``<name><level>``."""
    labels = [f"{c.name}{lev}" for lev in c.levels[1:]]
    mat = np.zeros((len(c.data), len(c.levels) - 1))
    for j in range(1, len(c.levels)):
        mat[:, j - 1] = c.data == j
    return labels, mat


def combine_factors(d: Dataset, a: str, b: str, name: str | None = None) -> Dataset:
    """Add a factor with one level ``"<a>.<b>"`` per observed pair."""
    ca, cb = d.factor(a), d.factor(b)
    name = name or f"{a}{b[:1].upper()}{b[1:]}"
    if name in d:
        raise DatasetError(f"column {name!r} already exists")
    labels = [f"{ca.levels[i]}.{cb.levels[j]}" for i, j in zip(ca.data, cb.data)]
    return d.with_column(make_factor(name, labels))
