"""Typed columnar tables, relations and the dataset bundle.

Every column carries its values plus an explicit boolean ``missing`` mask.
Categorical columns hold raw string tokens until block encoding replaces
them with non-negative integer codes; multi-categorical columns are stored
flat (``values``) with row ``offsets`` so row ``i`` owns
``values[offsets[i]:offsets[i + 1]]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class FeatureKind(str, enum.Enum):
    CATEGORICAL = "categorical"
    MULTI_CATEGORICAL = "multi_categorical"
    NUMERICAL = "numerical"
    TEMPORAL = "temporal"

    @property
    def is_categorical(self) -> bool:
        return self in (FeatureKind.CATEGORICAL, FeatureKind.MULTI_CATEGORICAL)


class RelationType(str, enum.Enum):
    ONE_TO_ONE = "1-1"
    MANY_TO_ONE = "M-1"
    ONE_TO_MANY = "1-M"
    MANY_TO_MANY = "M-M"

    @property
    def is_join(self) -> bool:
        """True when the right side holds at most one row per key."""
        return self in (RelationType.ONE_TO_ONE, RelationType.MANY_TO_ONE)

    def flipped(self) -> "RelationType":
        return _FLIP[self]


_FLIP = {
    RelationType.ONE_TO_ONE: RelationType.ONE_TO_ONE,
    RelationType.MANY_TO_ONE: RelationType.ONE_TO_MANY,
    RelationType.ONE_TO_MANY: RelationType.MANY_TO_ONE,
    RelationType.MANY_TO_MANY: RelationType.MANY_TO_MANY,
}


class BundleError(ValueError):
    """Base class for schema/bundle validation failures."""


class MissingTable(BundleError):
    def __init__(self, name: str):
        super().__init__(f"relation references unknown table {name!r}")
        self.name = name


class MissingColumn(BundleError):
    def __init__(self, table: str, column: str):
        super().__init__(f"table {table!r} has no column {column!r}")
        self.table = table
        self.column = column


class KindMismatch(BundleError):
    def __init__(self, table: str, column: str, expected: str, actual: str):
        super().__init__(
            f"column {table}.{column} must be {expected}, found {actual}")
        self.table = table
        self.column = column


class LabelLengthMismatch(BundleError):
    def __init__(self, n_labels: int, n_rows: int):
        super().__init__(f"{n_labels} labels for a main table of {n_rows} rows")
        self.n_labels = n_labels
        self.n_rows = n_rows


@dataclass(eq=False)
class ColumnData:
    """One column of a table.

    ``values`` layout per kind:

    * categorical: object array of raw tokens, or integer codes once encoded
    * multi_categorical: flat tokens/codes, with ``offsets`` of length n + 1
    * numerical: float array (missing rows hold NaN)
    * temporal: int64 epoch seconds (missing rows hold 0)
    """

    name: str
    kind: FeatureKind
    values: np.ndarray
    missing: np.ndarray
    offsets: np.ndarray | None = None

    def __post_init__(self):
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.kind is FeatureKind.MULTI_CATEGORICAL:
            if self.offsets is None:
                raise ValueError(f"multi-categorical column {self.name!r} needs offsets")
            self.offsets = np.asarray(self.offsets, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.missing)

    @property
    def n_rows(self) -> int:
        return len(self.missing)

    @property
    def encoded(self) -> bool:
        return self.values.dtype.kind in "iu"

    def lengths(self) -> np.ndarray:
        """Per-row list lengths (multi-categorical only)."""
        return np.diff(self.offsets)

    def row_list(self, i: int) -> np.ndarray:
        return self.values[self.offsets[i]:self.offsets[i + 1]]

    def check(self) -> None:
        n = len(self.missing)
        if self.kind is FeatureKind.MULTI_CATEGORICAL:
            if len(self.offsets) != n + 1 or self.offsets[-1] != len(self.values):
                raise ValueError(f"column {self.name!r}: offsets do not match values")
        elif len(self.values) != n:
            raise ValueError(
                f"column {self.name!r}: {len(self.values)} values vs {n} mask entries")
        if self.kind.is_categorical and self.encoded and len(self.values):
            if self.values.min() < 0:
                raise ValueError(f"column {self.name!r}: negative code")

    def take(self, rows: np.ndarray) -> "ColumnData":
        rows = np.asarray(rows, dtype=np.int64)
        missing = self.missing[rows]
        if self.kind is FeatureKind.MULTI_CATEGORICAL:
            values, offsets = gather_lists(self.values, self.offsets, rows)
            return ColumnData(self.name, self.kind, values, missing, offsets)
        return ColumnData(self.name, self.kind, self.values[rows], missing)

    def renamed(self, name: str) -> "ColumnData":
        return ColumnData(name, self.kind, self.values, self.missing, self.offsets)

    def equals(self, other: "ColumnData") -> bool:
        if (self.name, self.kind) != (other.name, other.kind):
            return False
        if not np.array_equal(self.missing, other.missing):
            return False
        if self.kind is FeatureKind.MULTI_CATEGORICAL:
            return (np.array_equal(self.offsets, other.offsets)
                    and np.array_equal(self.values, other.values))
        keep = ~self.missing
        return np.array_equal(self.values[keep], other.values[keep])

    def __eq__(self, other):
        return isinstance(other, ColumnData) and self.equals(other)


def gather_lists(values: np.ndarray, offsets: np.ndarray, rows: np.ndarray):
    """Select rows of a flat list column, returning new ``(values, offsets)``."""
    starts = offsets[rows]
    lengths = offsets[rows + 1] - starts
    new_offsets = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(lengths, out=new_offsets[1:])
    total = int(new_offsets[-1])
    if total == 0:
        return values[:0].copy(), new_offsets
    # position of every output element in the source array
    owner = np.repeat(np.arange(len(rows)), lengths)
    src = starts[owner] + (np.arange(total) - new_offsets[owner])
    return values[src], new_offsets


@dataclass(eq=False)
class Table:
    name: str
    columns: dict[str, ColumnData]
    n_rows: int

    @classmethod
    def from_columns(cls, name: str, columns: Iterable[ColumnData], n_rows: int | None = None):
        cols = list(columns)
        if n_rows is None:
            n_rows = cols[0].n_rows if cols else 0
        mapping: dict[str, ColumnData] = {}
        for c in cols:
            if c.name in mapping:
                raise ValueError(f"duplicate column {c.name!r} in table {name!r}")
            mapping[c.name] = c
        return cls(name, mapping, n_rows)

    def __getitem__(self, name: str) -> ColumnData:
        return self.columns[name]

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    @property
    def column_names(self) -> list[str]:
        return list(self.columns)

    def columns_of(self, *kinds: FeatureKind) -> list[str]:
        return [n for n, c in self.columns.items() if c.kind in kinds]

    def take(self, rows: np.ndarray) -> "Table":
        rows = np.asarray(rows, dtype=np.int64)
        return Table(self.name, {n: c.take(rows) for n, c in self.columns.items()}, len(rows))

    def with_columns(self, columns: dict[str, ColumnData]) -> "Table":
        return Table(self.name, dict(columns), self.n_rows)

    def check(self) -> None:
        for c in self.columns.values():
            c.check()
            if c.n_rows != self.n_rows:
                raise ValueError(
                    f"table {self.name!r}: column {c.name!r} has {c.n_rows} rows, "
                    f"expected {self.n_rows}")

    def equals(self, other: "Table") -> bool:
        return (self.name == other.name and self.n_rows == other.n_rows
                and list(self.columns) == list(other.columns)
                and all(self.columns[n].equals(other.columns[n]) for n in self.columns))


@dataclass(frozen=True)
class RelationSpec:
    left_table: str
    right_table: str
    left_key: str
    right_key: str
    rel_type: RelationType

    def flipped(self) -> "RelationSpec":
        return RelationSpec(self.right_table, self.left_table, self.right_key,
                            self.left_key, self.rel_type.flipped())


@dataclass(eq=False)
class DatasetBundle:
    main: Table
    related: list[Table] = field(default_factory=list)
    relations: list[RelationSpec] = field(default_factory=list)
    labels: np.ndarray | None = None
    time_budget_s: float = 300.0
    mem_budget_bytes: int = 16 * 1024 ** 3

    @property
    def tables(self) -> dict[str, Table]:
        out = {self.main.name: self.main}
        out.update((t.name, t) for t in self.related)
        return out

    def table(self, name: str) -> Table:
        try:
            return self.tables[name]
        except KeyError:
            raise MissingTable(name) from None

    def equals(self, other: "DatasetBundle") -> bool:
        if not self.main.equals(other.main) or len(self.related) != len(other.related):
            return False
        if not all(a.equals(b) for a, b in zip(self.related, other.related)):
            return False
        if self.relations != other.relations:
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and not np.array_equal(self.labels, other.labels):
            return False
        return (self.time_budget_s == other.time_budget_s
                and self.mem_budget_bytes == other.mem_budget_bytes)


@dataclass
class BaseFeatureMap:
    """Key, factor and session columns.

    ``keys`` maps table name to the set of its join-key columns; ``factor``
    is the main-table key with the most distinct values (None when the
    bundle has no keys at all); ``sessions`` are main-table categorical
    columns that each belong to exactly one factor value.
    """

    keys: dict[str, set[str]] = field(default_factory=dict)
    factor: str | None = None
    sessions: set[str] = field(default_factory=set)

    def main_keys(self, main_name: str) -> list[str]:
        return sorted(self.keys.get(main_name, set()))


def validate_bundle(bundle: DatasetBundle) -> DatasetBundle:
    """Check every structural invariant; return the bundle unchanged."""
    tables = {}
    for t in [bundle.main, *bundle.related]:
        if t.name in tables:
            raise BundleError(f"duplicate table name {t.name!r}")
        tables[t.name] = t
        t.check()
    for rel in bundle.relations:
        for tname, key in ((rel.left_table, rel.left_key), (rel.right_table, rel.right_key)):
            if tname not in tables:
                raise MissingTable(tname)
            table = tables[tname]
            if key not in table:
                raise MissingColumn(tname, key)
            kind = table[key].kind
            if kind is not FeatureKind.CATEGORICAL:
                raise KindMismatch(tname, key, FeatureKind.CATEGORICAL.value, kind.value)
    if bundle.labels is not None:
        labels = np.asarray(bundle.labels)
        if len(labels) != bundle.main.n_rows:
            raise LabelLengthMismatch(len(labels), bundle.main.n_rows)
        if len(labels) and not np.isin(labels, (0, 1)).all():
            raise BundleError("labels must be 0 or 1")
    return bundle


def column_width(col: ColumnData) -> float:
    """Estimated bytes per row, including one bit for the missing mask."""
    if col.kind is FeatureKind.MULTI_CATEGORICAL:
        avg_len = len(col.values) / col.n_rows if col.n_rows else 0.0
        width = avg_len * 4 + 8
    elif col.kind is FeatureKind.TEMPORAL:
        width = 8
    else:
        width = 4
    return width + 0.125


PROVENANCE_TAGS = ("original", "order1", "order2", "temporal", "encoded")


@dataclass(eq=False)
class FeatureFrame:
    """The flat main table being engineered.

    ``history`` is an append-only log of ``(event, column, tag)`` entries.
    Columns are added and removed one at a time; nothing copies the frame.
    """

    columns: dict[str, ColumnData]
    provenance: dict[str, str]
    n_rows: int
    history: list[tuple[str, str, str]] = field(default_factory=list)

    @classmethod
    def from_table(cls, table: Table, tag: str = "original") -> "FeatureFrame":
        frame = cls({}, {}, table.n_rows)
        for col in table.columns.values():
            frame.add(col, tag)
        return frame

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> ColumnData:
        return self.columns[name]

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def names_of(self, *kinds: FeatureKind) -> list[str]:
        return [n for n, c in self.columns.items() if c.kind in kinds]

    def add(self, col: ColumnData, tag: str) -> None:
        if tag not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance tag {tag!r}")
        if col.n_rows != self.n_rows:
            raise ValueError(f"column {col.name!r} has {col.n_rows} rows, frame has {self.n_rows}")
        if col.name in self.columns:
            raise ValueError(f"column {col.name!r} already present")
        self.columns[col.name] = col
        self.provenance[col.name] = tag
        self.history.append(("add", col.name, tag))

    def drop(self, name: str) -> None:
        del self.columns[name]
        tag = self.provenance.pop(name)
        self.history.append(("drop", name, tag))

    def bytes_per_row(self) -> float:
        return sum(column_width(c) for c in self.columns.values())

    def nbytes_estimate(self) -> float:
        return self.bytes_per_row() * self.n_rows

    def to_table(self, name: str = "frame") -> Table:
        return Table(name, dict(self.columns), self.n_rows)


def concat_columns(a: ColumnData, b: ColumnData) -> ColumnData:
    if a.kind is not b.kind:
        raise KindMismatch("?", a.name, a.kind.value, b.kind.value)
    values = np.concatenate([a.values, b.values])
    missing = np.concatenate([a.missing, b.missing])
    offsets = None
    if a.kind is FeatureKind.MULTI_CATEGORICAL:
        offsets = np.concatenate([a.offsets, b.offsets[1:] + a.offsets[-1]])
    return ColumnData(a.name, a.kind, values, missing, offsets)


def concat_tables(a: Table, b: Table) -> Table:
    """Rows of ``a`` followed by rows of ``b``; both need the same columns."""
    if list(a.columns) != list(b.columns):
        raise BundleError(f"column sets of {a.name!r} differ: {list(a.columns)} vs {list(b.columns)}")
    cols = {n: concat_columns(a[n], b[n]) for n in a.columns}
    return Table(a.name, cols, a.n_rows + b.n_rows)
