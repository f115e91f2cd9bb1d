"""Contingency tables of couples, the race-by-education layout, and moments.

A table counts couples by husband type (rows) and wife type (columns).
Race-by-education tables are laid out race-major with education ascending
inside each race block::

            B:L  B:M  B:H  W:L  W:M  W:H
    B:L
    ...
    W:H

Cells are real-valued: observed tables are nonnegative, counterfactual ones
can be fractional or negative.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    NegativeWeight,
    NonContiguousGroup,
    ParseError,
    UnknownLabel,
    ZeroTotal,
)

__all__ = [
    "ContingencyTable",
    "RaceEduLayout",
    "CoupleRecord",
    "from_microdata",
    "marginals",
    "sehc",
    "sirm",
    "diagonal_share",
    "off_diagonal_share",
    "race_aggregate",
    "edu_aggregate",
    "block_extract",
    "merge_categories",
    "read_table_csv",
    "write_table_csv",
    "read_microdata_csv",
]


def _default_labels(k: int) -> tuple[str, ...]:
    return tuple(str(i + 1) for i in range(k))


@dataclass(frozen=True, eq=False)
class ContingencyTable:
    """Immutable labeled matrix of couple counts.

    Parameters
    ----------
    counts : array_like
        ``n_rows x n_cols`` matrix; rows are husband types, columns wife types.
    row_labels, col_labels : sequence of str, optional
        Type labels. Defaults to ``"1", "2", ...``.
    """

    counts: np.ndarray
    row_labels: tuple[str, ...] = ()
    col_labels: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.array(self.counts, dtype=float)
        if arr.ndim != 2:
            raise DimensionMismatch(f"table must be 2-dimensional, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("table cells must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)
        rows = tuple(self.row_labels) or _default_labels(arr.shape[0])
        cols = tuple(self.col_labels) or _default_labels(arr.shape[1])
        if len(rows) != arr.shape[0] or len(cols) != arr.shape[1]:
            raise DimensionMismatch("label count does not match table shape")
        object.__setattr__(self, "row_labels", rows)
        object.__setattr__(self, "col_labels", cols)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    @property
    def total(self) -> float:
        return math.fsum(self.counts.ravel())

    def is_nonnegative(self) -> bool:
        return bool(np.all(self.counts >= 0))

    def transpose(self) -> "ContingencyTable":
        return ContingencyTable(self.counts.T, self.col_labels, self.row_labels)

    def __eq__(self, other):
        if not isinstance(other, ContingencyTable):
            return NotImplemented
        return (
            self.row_labels == other.row_labels
            and self.col_labels == other.col_labels
            and np.array_equal(self.counts, other.counts)
        )

    def __hash__(self):
        return hash((self.row_labels, self.col_labels, self.counts.tobytes()))

    def __repr__(self):
        return f"ContingencyTable({self.counts.tolist()!r})"


@dataclass(frozen=True)
class RaceEduLayout:
    """Two races crossed with ordered education levels for each gender.

    ``male_edu_labels`` defaults to ``edu_labels``; ``female_edu_labels``
    likewise. Education labels are listed from lowest to highest.
    """

    race_labels: tuple[str, str] = ("B", "W")
    edu_labels: tuple[str, ...] = ("L", "M", "H")
    male_edu_labels: tuple[str, ...] | None = None
    female_edu_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "race_labels", tuple(self.race_labels))
        object.__setattr__(self, "edu_labels", tuple(self.edu_labels))
        male = tuple(self.male_edu_labels or self.edu_labels)
        female = tuple(self.female_edu_labels or self.edu_labels)
        object.__setattr__(self, "male_edu_labels", male)
        object.__setattr__(self, "female_edu_labels", female)
        if len(self.race_labels) != 2 or len(set(self.race_labels)) != 2:
            raise ValueError("layout needs exactly two distinct race labels")
        for labels in (male, female):
            if len(labels) < 2 or len(set(labels)) != len(labels):
                raise ValueError("education labels must be >= 2 distinct, ordered values")

    @property
    def n_edu_male(self) -> int:
        return len(self.male_edu_labels)

    @property
    def n_edu_female(self) -> int:
        return len(self.female_edu_labels)

    @property
    def shape(self) -> tuple[int, int]:
        return 2 * self.n_edu_male, 2 * self.n_edu_female

    def row_labels(self) -> tuple[str, ...]:
        return tuple(r + e for r in self.race_labels for e in self.male_edu_labels)

    def col_labels(self) -> tuple[str, ...]:
        return tuple(r + e for r in self.race_labels for e in self.female_edu_labels)

    def race_index(self, race: str) -> int:
        try:
            return self.race_labels.index(race)
        except ValueError:
            raise UnknownLabel(f"unknown race label {race!r}") from None

    def row_index(self, race: str, edu: str) -> int:
        try:
            k = self.male_edu_labels.index(edu)
        except ValueError:
            raise UnknownLabel(f"unknown husband education label {edu!r}") from None
        return self.race_index(race) * self.n_edu_male + k

    def col_index(self, race: str, edu: str) -> int:
        try:
            k = self.female_edu_labels.index(edu)
        except ValueError:
            raise UnknownLabel(f"unknown wife education label {edu!r}") from None
        return self.race_index(race) * self.n_edu_female + k

    def homogamy_mask(self) -> np.ndarray:
        """Boolean ``n x m`` mask of husband/wife education pairs with equal labels."""
        return np.array(
            [[hm == fw for fw in self.female_edu_labels] for hm in self.male_edu_labels]
        )

    def empty_table(self) -> ContingencyTable:
        return ContingencyTable(np.zeros(self.shape), self.row_labels(), self.col_labels())

    def check(self, t: ContingencyTable) -> None:
        if t.shape != self.shape:
            raise DimensionMismatch(f"table shape {t.shape} does not match layout {self.shape}")


@dataclass(frozen=True)
class CoupleRecord:
    husband_race: str
    husband_edu: str
    wife_race: str
    wife_edu: str
    weight: float = 1.0


def from_microdata(records: Iterable[CoupleRecord], layout: RaceEduLayout) -> ContingencyTable:
    """Weighted cross-tabulation of couple records into a race-by-education table."""
    counts = np.zeros(layout.shape)
    for rec in records:
        if not rec.weight >= 0:
            raise NegativeWeight(f"record weight must be >= 0, got {rec.weight!r}")
        r = layout.row_index(rec.husband_race, rec.husband_edu)
        c = layout.col_index(rec.wife_race, rec.wife_edu)
        counts[r, c] += rec.weight
    return ContingencyTable(counts, layout.row_labels(), layout.col_labels())


def marginals(t: ContingencyTable) -> tuple[np.ndarray, np.ndarray]:
    """Row sums (husband types) and column sums (wife types)."""
    return t.counts.sum(axis=1), t.counts.sum(axis=0)


def _positive_total(t: ContingencyTable) -> float:
    total = t.total
    if not total > 0:
        raise ZeroTotal("moment undefined for a table with nonpositive grand total")
    return total


def sehc(t: ContingencyTable, layout: RaceEduLayout) -> float:
    """Share of educationally homogamous couples, across all four racial blocks."""
    layout.check(t)
    total = _positive_total(t)
    mask = np.tile(layout.homogamy_mask(), (2, 2))
    return math.fsum(t.counts[mask]) / total


def sirm(t: ContingencyTable, layout: RaceEduLayout) -> float:
    """Share of inter-racial marriages."""
    layout.check(t)
    total = _positive_total(t)
    n, m = layout.n_edu_male, layout.n_edu_female
    mixed = np.concatenate([t.counts[:n, m:].ravel(), t.counts[n:, :m].ravel()])
    return math.fsum(mixed) / total


def diagonal_share(t: ContingencyTable) -> float:
    """Share of couples on the main diagonal of a one-trait table."""
    total = _positive_total(t)
    return math.fsum(np.diagonal(t.counts)) / total


def off_diagonal_share(t: ContingencyTable) -> float:
    return 1.0 - diagonal_share(t)


def race_aggregate(t: ContingencyTable, layout: RaceEduLayout) -> ContingencyTable:
    """2x2 table of couples by (husband race, wife race)."""
    layout.check(t)
    n, m = layout.n_edu_male, layout.n_edu_female
    z = t.counts.reshape(2, n, 2, m).sum(axis=(1, 3))
    return ContingencyTable(z, layout.race_labels, layout.race_labels)


def edu_aggregate(t: ContingencyTable, layout: RaceEduLayout) -> ContingencyTable:
    """n x m table of couples by (husband education, wife education), summed over race."""
    layout.check(t)
    n, m = layout.n_edu_male, layout.n_edu_female
    z = t.counts.reshape(2, n, 2, m).sum(axis=(0, 2))
    return ContingencyTable(z, layout.male_edu_labels, layout.female_edu_labels)


def block_extract(
    t: ContingencyTable, layout: RaceEduLayout, husband_race: str, wife_race: str
) -> ContingencyTable:
    """Education sub-table of one racial block."""
    layout.check(t)
    n, m = layout.n_edu_male, layout.n_edu_female
    i, j = layout.race_index(husband_race), layout.race_index(wife_race)
    sub = t.counts[i * n : (i + 1) * n, j * m : (j + 1) * m]
    return ContingencyTable(sub, layout.male_edu_labels, layout.female_edu_labels)


def _check_partition(groups: Sequence[Sequence[int]], size: int, axis: str) -> None:
    expected = 0
    for g in groups:
        g = list(g)
        if not g or g != list(range(expected, expected + len(g))):
            raise NonContiguousGroup(
                f"{axis} groups must be contiguous, ordered and exhaustive; got {groups!r}"
            )
        expected += len(g)
    if expected != size:
        raise NonContiguousGroup(f"{axis} groups cover {expected} of {size} categories")


def merge_categories(
    t: ContingencyTable,
    row_groups: Sequence[Sequence[int]],
    col_groups: Sequence[Sequence[int]],
) -> ContingencyTable:
    """Sum adjacent categories.

    Groups are 0-based index lists, e.g. ``[[0], [1, 2]]`` merges the two
    upper categories of a three-level axis.
    """
    n, m = t.shape
    _check_partition(row_groups, n, "row")
    _check_partition(col_groups, m, "column")
    rows = np.array([t.counts[list(g)].sum(axis=0) for g in row_groups])
    out = np.array([rows[:, list(g)].sum(axis=1) for g in col_groups]).T
    row_labels = tuple("+".join(t.row_labels[i] for i in g) for g in row_groups)
    col_labels = tuple("+".join(t.col_labels[j] for j in g) for g in col_groups)
    return ContingencyTable(out, row_labels, col_labels)


# --- CSV --------------------------------------------------------------------


def _parse_number(text: str, line: int, column: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", line, column) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value: {text!r}", line, column)
    return value


def read_table_csv(
    source: str | io.TextIOBase, *, observed: bool = True
) -> tuple[ContingencyTable, RaceEduLayout | None]:
    """Read a table from CSV.

    The leading label columns and header rows are detected from the blank
    top-left corner. With two label levels (race, education) the layout is
    inferred and returned; with one level the layout is ``None``.
    """
    if isinstance(source, str):
        with open(source, newline="") as fh:
            rows = list(csv.reader(fh))
    else:
        rows = list(csv.reader(source))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty table file", 1)
    first = [c.strip() for c in rows[0]]
    k = 0
    while k < len(first) and first[k] == "":
        k += 1
    if k == 0 or k == len(first):
        raise ParseError("missing blank top-left corner or column labels", 1, 1)
    n_header = 0
    while n_header < len(rows) and all(c.strip() == "" for c in rows[n_header][:k]):
        n_header += 1
    if n_header != k:
        raise ParseError(
            f"{k} label columns but {n_header} header rows; the two must match", n_header + 1
        )
    width = len(first)
    headers = []
    for h in range(k):
        row = [c.strip() for c in rows[h]]
        if len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", h + 1)
        headers.append(row[k:])
    col_keys = list(zip(*headers))
    row_keys, data = [], []
    for idx, raw in enumerate(rows[k:], start=k + 1):
        row = [c.strip() for c in raw]
        if len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", idx)
        row_keys.append(tuple(row[:k]))
        values = [_parse_number(v, idx, j + 1) for j, v in enumerate(row[k:], start=k)]
        if observed:
            for j, v in enumerate(values):
                if v < 0:
                    raise ParseError(f"negative count {v!r} in observed table", idx, k + j + 1)
        data.append(values)
    counts = np.array(data, dtype=float)
    if counts.shape[0] < 2 or counts.shape[1] < 2:
        raise ParseError("a table needs at least two rows and two columns", k + 1)
    if k == 1:
        return (
            ContingencyTable(counts, [r[0] for r in row_keys], [c[0] for c in col_keys]),
            None,
        )
    if k != 2:
        raise ParseError("at most two label levels (race, education) are supported", 1)
    layout = _infer_layout(row_keys, col_keys)
    return ContingencyTable(counts, layout.row_labels(), layout.col_labels()), layout


def _levels(keys: list[tuple[str, str]], axis: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    races: list[str] = []
    for race, _ in keys:
        if race not in races:
            races.append(race)
    if len(races) != 2:
        raise ParseError(f"{axis} labels must name exactly two races, got {races}", 1)
    half = len(keys) // 2
    edus = tuple(e for _, e in keys[:half])
    expected = [(r, e) for r in races for e in edus]
    if list(keys) != expected:
        raise ParseError(f"{axis} labels must be race-major with the same education order", 1)
    return tuple(races), edus


def _infer_layout(row_keys, col_keys) -> RaceEduLayout:
    races_r, edu_m = _levels(row_keys, "row")
    races_c, edu_f = _levels(col_keys, "column")
    if races_r != races_c:
        raise ParseError("row and column race labels differ", 1)
    return RaceEduLayout(races_r, edu_m, edu_m, edu_f)


def _fmt(x: float) -> str:
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


def write_table_csv(t: ContingencyTable, layout: RaceEduLayout | None = None) -> str:
    """Serialize a table to the CSV format accepted by :func:`read_table_csv`."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if layout is None:
        w.writerow([""] + list(t.col_labels))
        for label, row in zip(t.row_labels, t.counts):
            w.writerow([label] + [_fmt(v) for v in row])
        return buf.getvalue()
    layout.check(t)
    races = layout.race_labels
    w.writerow(["", ""] + [r for r in races for _ in layout.female_edu_labels])
    w.writerow(["", ""] + [e for _ in races for e in layout.female_edu_labels])
    i = 0
    for r in races:
        for e in layout.male_edu_labels:
            w.writerow([r, e] + [_fmt(v) for v in t.counts[i]])
            i += 1
    return buf.getvalue()


MICRODATA_COLUMNS = ("husband_race", "husband_edu", "wife_race", "wife_edu")


def read_microdata_csv(
    source: str | io.TextIOBase,
    predicates: Sequence[Callable[[Mapping[str, str]], bool]] = (),
) -> list[CoupleRecord]:
    """Read couple records; rows failing any predicate are skipped."""
    if isinstance(source, str):
        with open(source, newline="") as fh:
            rows = list(csv.DictReader(fh))
            fieldnames = rows[0].keys() if rows else []
    else:
        reader = csv.DictReader(source)
        rows = list(reader)
        fieldnames = reader.fieldnames or []
    if rows:
        missing = [c for c in MICRODATA_COLUMNS if c not in fieldnames]
        if missing:
            raise ParseError(f"microdata is missing columns {missing}", 1)
    records = []
    for line, row in enumerate(rows, start=2):
        if not all(p(row) for p in predicates):
            continue
        raw_weight = (row.get("weight") or "").strip()
        weight = _parse_number(raw_weight, line, None) if raw_weight else 1.0
        if weight < 0:
            raise NegativeWeight(f"negative weight {weight!r} on line {line}")
        records.append(
            CoupleRecord(*(row[c].strip() for c in MICRODATA_COLUMNS), weight=weight)
        )
    return records
