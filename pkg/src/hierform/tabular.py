"""Columnar datasets: CSV ingestion, column summaries and the multi-membership simulator."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

NUMERIC = "numeric"
INTEGER = "integer"
FACTOR = "factor"
KINDS = (NUMERIC, INTEGER, FACTOR)


class DataError(ValueError):
    """Raised for malformed input data or invalid dataset operations."""


@dataclass(frozen=True, eq=False)
class Column:
    """One typed column.

    Factor columns store integer codes into ``levels``; numeric and integer
    columns store their values directly.
    """

    kind: str
    values: np.ndarray
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown column kind {self.kind!r}")
        vals = np.asarray(self.values)
        if self.kind == FACTOR:
            if self.levels is None:
                raise DataError("factor column needs a level list")
            vals = vals.astype(np.int64)
            if vals.size and (vals.min() < 0 or vals.max() >= len(self.levels)):
                raise DataError("factor code outside level range")
            if len(set(self.levels)) != len(self.levels):
                raise DataError("duplicate factor levels")
        elif self.kind == INTEGER:
            vals = vals.astype(np.int64)
        else:
            vals = vals.astype(np.float64)
            if not np.all(np.isfinite(vals)):
                raise DataError("numeric cells must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    @property
    def labels(self) -> list[str]:
        """Cell values as strings (level labels for factors)."""
        if self.kind == FACTOR:
            return [self.levels[c] for c in self.values]
        return [_fmt(v) for v in self.values]

    def as_float(self) -> np.ndarray:
        if self.kind == FACTOR:
            raise DataError("factor column has no numeric value")
        return self.values.astype(np.float64)

    def take(self, idx) -> "Column":
        return Column(self.kind, self.values[idx], self.levels)

    def equals(self, other: "Column") -> bool:
        return (
            self.kind == other.kind
            and self.levels == other.levels
            and self.values.shape == other.values.shape
            and bool(np.all(self.values == other.values))
        )


def factor(labels: Sequence, levels: Sequence[str] | None = None) -> Column:
    """Build a factor column; levels default to first-appearance order."""
    labels = [_fmt(v) if not isinstance(v, str) else v for v in labels]
    if levels is None:
        levels = list(dict.fromkeys(labels))
    levels = tuple(str(l) for l in levels)
    index = {l: i for i, l in enumerate(levels)}
    try:
        codes = np.array([index[v] for v in labels], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"value {exc.args[0]!r} is not a declared level") from None
    return Column(FACTOR, codes, levels)


def numeric(values) -> Column:
    return Column(NUMERIC, np.asarray(values, dtype=np.float64))


def integer(values) -> Column:
    return Column(INTEGER, np.asarray(values, dtype=np.int64))


class Dataset:
    """An immutable, ordered collection of equally long named columns."""

    def __init__(self, columns: Mapping[str, Column], n_rows: int | None = None):
        cols = dict(columns)
        for name, col in cols.items():
            if not isinstance(name, str) or not name:
                raise DataError("column names must be non-empty strings")
            if not isinstance(col, Column):
                raise DataError(f"column {name!r} is not a Column")
        lengths = {len(c) for c in cols.values()}
        if len(lengths) > 1:
            raise DataError(f"columns have differing lengths {sorted(lengths)}")
        if n_rows is None:
            n_rows = lengths.pop() if lengths else 0
        elif lengths and lengths.pop() != n_rows:
            raise DataError("n_rows does not match column length")
        self._columns = cols
        self.n_rows = int(n_rows)

    @property
    def columns(self) -> Mapping[str, Column]:
        return dict(self._columns)

    @property
    def names(self) -> list[str]:
        return list(self._columns)

    def __contains__(self, name) -> bool:
        return name in self._columns

    def __getitem__(self, name: str) -> Column:
        try:
            return self._columns[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def __len__(self):
        return self.n_rows

    def __repr__(self):
        kinds = ", ".join(f"{k}:{c.kind}" for k, c in self._columns.items())
        return f"Dataset(n_rows={self.n_rows}, {kinds})"

    def with_column(self, name: str, col: Column) -> "Dataset":
        cols = dict(self._columns)
        cols[name] = col
        return Dataset(cols, self.n_rows if self._columns else None)

    def select_rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset({k: c.take(idx) for k, c in self._columns.items()})

    def equals(self, other: "Dataset") -> bool:
        return (
            self.names == other.names
            and self.n_rows == other.n_rows
            and all(self[k].equals(other[k]) for k in self.names)
        )


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse_int(s: str):
    s = s.strip()
    if not s or not (s.lstrip("+-").isdigit()):
        return None
    return int(s)


def _parse_float(s: str):
    try:
        v = float(s)
    except ValueError:
        return None
    return v


_MISSING = {"", "na", "nan", "null", "none", ".", "inf", "-inf", "+inf", "infinity", "-infinity"}


def read_csv(source, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read a header-first CSV into a typed Dataset.

    ``source`` may be a path, a text/binary stream, or raw bytes. Without a
    schema, all-integer columns become integer, numeric-parseable columns
    numeric, and anything else a factor with levels in first-appearance order.
    Missing or non-finite cells are rejected.
    """
    text = _read_text(source)
    if not text.strip():
        raise DataError("empty CSV input")
    rows = list(csv.reader(io.StringIO(text)))
    while rows and not any(cell.strip() for cell in rows[-1]):
        rows.pop()
    header = [h.strip() for h in rows[0]]
    if any(not h for h in header):
        raise DataError("empty column name in header")
    dupes = sorted({h for h in header if header.count(h) > 1})
    if dupes:
        raise DataError(f"duplicate column names: {', '.join(dupes)}")
    body = rows[1:]
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, found {len(row)}")
    schema = dict(schema or {})
    unknown = set(schema) - set(header)
    if unknown:
        raise DataError(f"schema names unknown columns: {sorted(unknown)}")
    cols = {}
    for j, name in enumerate(header):
        cells = [row[j].strip() for row in body]
        cols[name] = _type_column(name, cells, schema.get(name))
    return Dataset(cols, len(body))


def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8-sig")
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8-sig", newline="") as fh:
            return fh.read()
    if hasattr(source, "read"):
        data = source.read()
        return data.decode("utf-8-sig") if isinstance(data, bytes) else data
    with open(source, "r", encoding="utf-8-sig", newline="") as fh:
        return fh.read()


def _type_column(name: str, cells: list[str], kind: str | None) -> Column:
    for i, c in enumerate(cells):
        if c.lower() in _MISSING and kind != FACTOR:
            # inf/nan strings are only legal as factor labels
            raise DataError(f"column {name!r}, row {i + 1}: missing or non-finite value {c!r}")
        if c == "":
            raise DataError(f"column {name!r}, row {i + 1}: missing value")
    if kind is None:
        if all(_parse_int(c) is not None for c in cells):
            kind = INTEGER
        elif all(_parse_float(c) is not None for c in cells):
            kind = NUMERIC
        else:
            kind = FACTOR
        if not cells:
            kind = NUMERIC
    if kind == INTEGER:
        vals = []
        for i, c in enumerate(cells):
            v = _parse_int(c)
            if v is None:
                raise DataError(f"column {name!r}, row {i + 1}: {c!r} is not an integer")
            vals.append(v)
        return integer(vals)
    if kind == NUMERIC:
        vals = []
        for i, c in enumerate(cells):
            v = _parse_float(c)
            if v is None or not math.isfinite(v):
                raise DataError(f"column {name!r}, row {i + 1}: {c!r} is not a finite number")
            vals.append(v)
        return numeric(vals)
    if kind == FACTOR:
        return factor(cells)
    raise DataError(f"unknown column kind {kind!r} for {name!r}")


def write_csv(d: Dataset, dest=None) -> str:
    """Serialize ``d`` as CSV; floats use 17 significant digits.

    Returns the text; also writes it to ``dest`` (path or stream) when given.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(d.names)
    cols = [d[n] for n in d.names]
    rendered = []
    for c in cols:
        if c.kind == NUMERIC:
            rendered.append([f"{v:.17g}" for v in c.values])
        else:
            rendered.append(c.labels)
    for i in range(d.n_rows):
        w.writerow([r[i] for r in rendered])
    text = buf.getvalue()
    if dest is not None:
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    return text


@dataclass(frozen=True)
class Summary:
    kind: str
    mean: float | None = None
    min: float | None = None
    max: float | None = None
    levels: tuple[str, ...] | None = None
    modal_level: str | None = None
    reference_level: str | None = None


def column_summary(d: Dataset, name: str) -> Summary:
    col = d[name]
    if col.kind == FACTOR:
        counts = np.bincount(col.values, minlength=len(col.levels))
        modal = col.levels[int(np.argmax(counts))] if len(col.levels) else None
        return Summary(
            FACTOR,
            levels=col.levels,
            modal_level=modal,
            reference_level=col.levels[0] if col.levels else None,
        )
    if d.n_rows == 0:
        raise DataError(f"column {name!r} is empty")
    x = col.as_float()
    return Summary(col.kind, mean=float(np.mean(x)), min=float(np.min(x)), max=float(np.max(x)))


@dataclass(frozen=True)
class MultiMemberTruth:
    intercept: float = 20.0
    sd_school: float = 3.0
    sigma: float = 3.5


@dataclass(frozen=True)
class MultiMemberSim:
    """Simulated data plus the latent school effects it was drawn from."""

    data: Dataset
    school_effects: np.ndarray
    noise: np.ndarray
    truth: MultiMemberTruth = field(default_factory=MultiMemberTruth)


def simulate_multi_membership(
    nschools: int = 10,
    nstudents: int = 1000,
    change: float = 0.1,
    truth: MultiMemberTruth | Mapping | None = None,
    seed: int = 0,
) -> MultiMemberSim:
    if nschools < 2:
        raise DataError("nschools must be at least 2")
    if nstudents < 1:
        raise DataError("nstudents must be at least 1")
    if not 0.0 <= change <= 1.0:
        raise DataError(f"change must lie in [0, 1], got {change}")
    if truth is None:
        truth = MultiMemberTruth()
    elif not isinstance(truth, MultiMemberTruth):
        truth = MultiMemberTruth(**dict(truth))
    rng = np.random.default_rng(seed)
    n_change = int(math.floor(change * nstudents))
    u = rng.normal(0.0, 1.0, size=nschools) * truth.sd_school
    s1 = np.empty(nstudents, dtype=np.int64)
    s2 = np.empty(nstudents, dtype=np.int64)
    for i in range(n_change):
        a, b = rng.choice(nschools, size=2, replace=False)
        s1[i], s2[i] = a, b
    stay = rng.integers(0, nschools, size=nstudents - n_change)
    s1[n_change:] = stay
    s2[n_change:] = stay
    w1 = np.full(nstudents, 0.5)
    w2 = np.full(nstudents, 0.5)
    eps = rng.normal(0.0, 1.0, size=nstudents) * truth.sigma
    y = truth.intercept + w1 * u[s1] + w2 * u[s2] + eps
    levels = [str(k + 1) for k in range(nschools)]
    data = Dataset(
        {
            "s1": Column(FACTOR, s1, tuple(levels)),
            "s2": Column(FACTOR, s2, tuple(levels)),
            "w1": numeric(w1),
            "w2": numeric(w2),
            "y": numeric(y),
        }
    )
    u.setflags(write=False)
    eps.setflags(write=False)
    return MultiMemberSim(data, u, eps, truth)


def sim_multi_mem(nschools=10, nstudents=1000, change=0.1, truth=None, seed=0) -> Dataset:
    """Simulate students nested in (possibly two) schools.

    The first ``floor(change * nstudents)`` rows change school (``s1 != s2``);
    all rows carry equal weights 0.5/0.5.
    """
    return simulate_multi_membership(nschools, nstudents, change, truth, seed).data


def from_columns(data: Mapping[str, Iterable], factors: Iterable[str] = ()) -> Dataset:
    """Convenience constructor from plain Python sequences."""
    factors = set(factors)
    cols = {}
    for name, vals in data.items():
        vals = list(vals)
        if name in factors or any(isinstance(v, str) for v in vals):
            cols[name] = factor(vals)
        elif all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in vals):
            cols[name] = integer(vals)
        else:
            cols[name] = numeric(vals)
    return Dataset(cols)
