"""Reading and writing the on-disk dataset format, plus synthetic bundles.

Layout of a dataset directory::

    info.json          schema (see ``parse_info``)
    <table>.tsv        one TSV per table, header row first
    labels.tsv         training directories only: header ``label_column``,
                       then one 0/1 per main-table row

Every kind uses the empty string as its missing-value token. Multi-categorical
cells are comma separated tokens.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data_model import (
    ColumnData,
    DatasetBundle,
    FeatureKind,
    RelationSpec,
    RelationType,
    Table,
)

log = logging.getLogger(__name__)

LABEL_FILE = "labels.tsv"
MULTI_SEP = ","

KIND_TOKENS = {
    "cat": FeatureKind.CATEGORICAL,
    "multi-cat": FeatureKind.MULTI_CATEGORICAL,
    "num": FeatureKind.NUMERICAL,
    "time": FeatureKind.TEMPORAL,
}
TOKEN_OF_KIND = {v: k for k, v in KIND_TOKENS.items()}


class ParseError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")
        self.position = position


class UnknownFeatureKind(ParseError):
    def __init__(self, kind: str):
        super().__init__(f"unknown feature kind {kind!r}")
        self.kind = kind


class DuplicateTableName(ParseError):
    def __init__(self, name: str):
        super().__init__(f"duplicate table name {name!r}")
        self.name = name


class RowArityError(ValueError):
    def __init__(self, path, line: int, expected: int, found: int):
        super().__init__(f"{path}: line {line} has {found} fields, expected {expected}")
        self.line = line


class ValueParseError(ValueError):
    def __init__(self, path, line: int, column: str, cell: str, kind: FeatureKind):
        super().__init__(f"{path}: line {line}, column {column!r}: "
                         f"cannot parse {cell!r} as {kind.value}")
        self.line = line
        self.column = column


class InvalidSpec(ValueError):
    pass


@dataclass
class TableInfo:
    name: str
    path: str
    columns: dict[str, FeatureKind]
    main: bool = False


@dataclass
class DatasetInfo:
    tables: list[TableInfo]
    relations: list[RelationSpec]
    label_column: str = "label"
    time_budget_s: float = 300.0
    mem_budget_bytes: int = 16 * 1024 ** 3

    @property
    def main(self) -> TableInfo:
        return next(t for t in self.tables if t.main)

    @property
    def related(self) -> list[TableInfo]:
        return [t for t in self.tables if not t.main]

    def to_json(self) -> str:
        doc = {
            "tables": [
                {"name": t.name, "path": t.path, "main": t.main,
                 "columns": {c: TOKEN_OF_KIND[k] for c, k in t.columns.items()}}
                for t in self.tables
            ],
            "relations": [
                {"left": r.left_table, "right": r.right_table, "left_key": r.left_key,
                 "right_key": r.right_key, "type": r.rel_type.value}
                for r in self.relations
            ],
            "label_column": self.label_column,
            "time_budget_s": self.time_budget_s,
            "mem_budget_mb": self.mem_budget_bytes // (1024 * 1024),
        }
        return json.dumps(doc, indent=2) + "\n"


_TOP_KEYS = {"tables", "relations", "label_column", "time_budget_s", "mem_budget_mb"}
_TABLE_KEYS = {"name", "path", "main", "columns"}
_REL_KEYS = {"left", "right", "left_key", "right_key", "type"}


def _check_keys(obj, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError(f"{where} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"{where}: unknown key(s) {sorted(unknown)}")
    absent = required - set(obj)
    if absent:
        raise ParseError(f"{where}: missing key(s) {sorted(absent)}")


def parse_info(text: str) -> DatasetInfo:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    _check_keys(doc, _TOP_KEYS, {"tables", "time_budget_s"}, "info")

    tables: list[TableInfo] = []
    seen: set[str] = set()
    for i, t in enumerate(doc["tables"]):
        _check_keys(t, _TABLE_KEYS, {"name", "path", "columns"}, f"tables[{i}]")
        if t["name"] in seen:
            raise DuplicateTableName(t["name"])
        seen.add(t["name"])
        columns = {}
        for col, token in t["columns"].items():
            if token not in KIND_TOKENS:
                raise UnknownFeatureKind(token)
            columns[col] = KIND_TOKENS[token]
        tables.append(TableInfo(t["name"], t["path"], columns, bool(t.get("main", False))))
    n_main = sum(t.main for t in tables)
    if n_main != 1:
        raise ParseError(f"exactly one main table required, found {n_main}")

    relations = []
    for i, r in enumerate(doc.get("relations", [])):
        _check_keys(r, _REL_KEYS, _REL_KEYS, f"relations[{i}]")
        try:
            rel_type = RelationType(r["type"])
        except ValueError:
            raise ParseError(f"relations[{i}]: unknown relation type {r['type']!r}") from None
        relations.append(RelationSpec(r["left"], r["right"], r["left_key"], r["right_key"],
                                      rel_type))

    budget = doc["time_budget_s"]
    if not isinstance(budget, (int, float)) or budget <= 0:
        raise ParseError("time_budget_s must be a positive number")
    mem_mb = doc.get("mem_budget_mb", 16 * 1024)
    return DatasetInfo(tables, relations, doc.get("label_column", "label"),
                       float(budget), int(mem_mb) * 1024 * 1024)


# ---------------------------------------------------------------------------
# TSV reading

def _parse_column(path, name: str, kind: FeatureKind, cells: list[str]) -> ColumnData:
    n = len(cells)
    raw = np.asarray(cells, dtype=object) if n else np.empty(0, dtype=object)
    missing = raw == "" if n else np.zeros(0, dtype=bool)

    if kind is FeatureKind.CATEGORICAL:
        return ColumnData(name, kind, raw, missing)

    if kind is FeatureKind.MULTI_CATEGORICAL:
        lists = [c.split(MULTI_SEP) if c else [] for c in cells]
        lengths = np.fromiter((len(x) for x in lists), dtype=np.int64, count=n)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        flat = np.empty(int(offsets[-1]), dtype=object)
        flat[:] = [tok for lst in lists for tok in lst]
        return ColumnData(name, kind, flat, missing, offsets)

    filled = np.where(missing, "0", raw)
    try:
        if kind is FeatureKind.NUMERICAL:
            values = filled.astype(np.float64)
            values[missing] = np.nan
            missing = missing | np.isnan(values)
        else:
            values = filled.astype(np.int64)
    except (ValueError, OverflowError):
        parser = float if kind is FeatureKind.NUMERICAL else int
        for i, cell in enumerate(cells):
            if cell == "":
                continue
            try:
                parser(cell)
            except (ValueError, OverflowError):
                raise ValueParseError(path, i + 2, name, cell, kind) from None
        raise
    return ColumnData(name, kind, values, missing)


def read_table(path: str | os.PathLike, name: str, columns: dict[str, FeatureKind]) -> Table:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IOError(f"cannot read table {name!r}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty file, header row required")
    header = lines[0].split("\t")
    width = len(header)
    unknown = [c for c in header if c not in columns]
    if unknown:
        raise ParseError(f"{path}: columns {unknown} not declared in info")
    absent = [c for c in columns if c not in header]
    if absent:
        raise ParseError(f"{path}: declared columns {absent} not in header")

    rows = []
    for i, line in enumerate(lines[1:]):
        fields_ = line.split("\t")
        if len(fields_) != width:
            raise RowArityError(path, i + 2, width, len(fields_))
        rows.append(fields_)
    n = len(rows)
    by_name = dict(zip(header, zip(*rows))) if n else {c: () for c in header}
    cols = [_parse_column(path, c, columns[c], list(by_name[c])) for c in columns]
    return Table.from_columns(name, cols, n)


def read_labels(path: str | os.PathLike, label_column: str | None = None) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if lines and lines[0] not in ("0", "1"):
        if label_column is not None and lines[0] != label_column:
            raise ParseError(f"{path}: header {lines[0]!r} is not {label_column!r}")
        lines = lines[1:]
    bad = [i for i, s in enumerate(lines) if s not in ("0", "1")]
    if bad:
        raise ParseError(f"{path}: line {bad[0] + 2} is not a 0/1 label")
    return np.fromiter((s == "1" for s in lines), dtype=np.int8, count=len(lines))


def load_dataset(root: str | os.PathLike, info: DatasetInfo,
                 tables: list[str] | None = None) -> DatasetBundle:
    """Load the tables named in ``info`` (or the subset ``tables``) from ``root``.

    Labels are read when ``labels.tsv`` exists next to the tables.
    """
    root = Path(root)
    wanted = [t for t in info.tables if tables is None or t.name in tables or t.main]
    loaded = {t.name: read_table(root / t.path, t.name, t.columns) for t in wanted}
    main = loaded[info.main.name]
    label_path = root / LABEL_FILE
    labels = read_labels(label_path, info.label_column) if label_path.exists() else None
    related = [loaded[t.name] for t in info.related if t.name in loaded]
    names = set(loaded)
    relations = [r for r in info.relations if r.left_table in names and r.right_table in names]
    return DatasetBundle(main, related, relations, labels, info.time_budget_s,
                         info.mem_budget_bytes)


# ---------------------------------------------------------------------------
# TSV writing (test harness and gen-data)

def _format_column(col: ColumnData) -> list[str]:
    kind = col.kind
    if kind is FeatureKind.MULTI_CATEGORICAL:
        vals = [str(v) for v in col.values]
        off = col.offsets
        return ["" if col.missing[i] else MULTI_SEP.join(vals[off[i]:off[i + 1]])
                for i in range(col.n_rows)]
    if kind is FeatureKind.NUMERICAL:
        return ["" if m else repr(float(v)) for v, m in zip(col.values, col.missing)]
    return ["" if m else str(v) for v, m in zip(col.values.tolist(), col.missing)]


def write_table(table: Table, path: str | os.PathLike) -> None:
    formatted = [_format_column(c) for c in table.columns.values()]
    lines = ["\t".join(table.columns)]
    lines.extend("\t".join(row) for row in zip(*formatted))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_labels(labels: np.ndarray, path: str | os.PathLike, label_column: str = "label"):
    body = "".join(f"{int(v)}\n" for v in labels)
    Path(path).write_text(f"{label_column}\n{body}", encoding="utf-8")


def info_for_bundle(bundle: DatasetBundle, label_column: str = "label") -> DatasetInfo:
    tables = [TableInfo(t.name, f"{t.name}.tsv",
                        {n: c.kind for n, c in t.columns.items()}, t is bundle.main)
              for t in [bundle.main, *bundle.related]]
    return DatasetInfo(tables, list(bundle.relations), label_column,
                       bundle.time_budget_s, bundle.mem_budget_bytes)


def write_dataset(bundle: DatasetBundle, root: str | os.PathLike,
                  info: DatasetInfo | None = None) -> DatasetInfo:
    """Serialize a raw (not yet encoded) bundle; inverse of ``load_dataset``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    info = info or info_for_bundle(bundle)
    (root / "info.json").write_text(info.to_json(), encoding="utf-8")
    paths = {t.name: t.path for t in info.tables}
    for t in [bundle.main, *bundle.related]:
        write_table(t, root / paths[t.name])
    if bundle.labels is not None:
        write_labels(bundle.labels, root / LABEL_FILE, info.label_column)
    return info


def main_time_column(table: Table) -> str | None:
    temporal = table.columns_of(FeatureKind.TEMPORAL)
    return temporal[0] if temporal else None


def split_train_test(bundle: DatasetBundle, test_fraction: float = 0.2):
    """Time-ordered split of the main table; related tables stay with train."""
    n = bundle.main.n_rows
    tcol = main_time_column(bundle.main)
    if tcol is None:
        order = np.arange(n)
    else:
        order = np.argsort(bundle.main[tcol].values, kind="stable")
    n_test = int(round(n * test_fraction))
    train_rows = np.sort(order[:n - n_test])
    test_rows = np.sort(order[n - n_test:])
    labels = bundle.labels
    train = DatasetBundle(bundle.main.take(train_rows), bundle.related, bundle.relations,
                          None if labels is None else labels[train_rows],
                          bundle.time_budget_s, bundle.mem_budget_bytes)
    test = DatasetBundle(bundle.main.take(test_rows), [], [],
                         None if labels is None else labels[test_rows],
                         bundle.time_budget_s, bundle.mem_budget_bytes)
    return train, test


def write_train_test(bundle: DatasetBundle, out: str | os.PathLike,
                     test_fraction: float = 0.2) -> DatasetInfo:
    """Write ``out/info.json``, ``out/train/``, ``out/test/`` and ``out/test_labels.tsv``.

    The test directory holds only the main table; related tables are read
    from the training directory.
    """
    out = Path(out)
    train, test = split_train_test(bundle, test_fraction)
    info = info_for_bundle(bundle)
    out.mkdir(parents=True, exist_ok=True)
    (out / "info.json").write_text(info.to_json(), encoding="utf-8")
    write_dataset(train, out / "train", info)
    (out / "test").mkdir(exist_ok=True)
    write_table(test.main, out / "test" / info.main.path)
    if test.labels is not None:
        write_labels(test.labels, out / "test_labels.tsv", info.label_column)
    return info


# ---------------------------------------------------------------------------
# Synthetic bundles

@dataclass
class SyntheticSpec:
    """Shape of a generated bundle.

    With ``n_related >= 1`` the label is driven mostly by columns that live
    in related tables (user profile, item profile, per-user log history),
    so a model that only sees the main table cannot recover it.
    """

    main_rows: int = 1000
    n_related: int = 3
    ratio: float = 0.5
    signal: float = 1.0
    n_users: int | None = None
    n_items: int | None = None
    logs_per_user: int = 6
    time_span_days: float = 30.0
    missing_rate: float = 0.0
    empty_columns: bool = False
    time_budget_s: float = 300.0
    mem_budget_mb: int = 4096

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        allowed = {f.name for f in fields(cls)}
        unknown = set(doc) - allowed
        if unknown:
            raise InvalidSpec(f"unknown spec keys {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


T0 = 1_550_000_000
DAY = 86_400


def _tokens(prefix: int, ids: np.ndarray) -> np.ndarray:
    out = np.empty(len(ids), dtype=object)
    out[:] = [str(prefix + int(i)) for i in ids]
    return out


def _cat(name, tokens) -> ColumnData:
    return ColumnData(name, FeatureKind.CATEGORICAL, tokens, np.zeros(len(tokens), bool))


def _num(name, values) -> ColumnData:
    values = np.asarray(values, dtype=np.float64)
    return ColumnData(name, FeatureKind.NUMERICAL, values, np.isnan(values))


def _time(name, values) -> ColumnData:
    values = np.asarray(values, dtype=np.int64)
    return ColumnData(name, FeatureKind.TEMPORAL, values, np.zeros(len(values), bool))


def _multi(name, rng, n, vocab, prefix, lo=1, hi=6) -> ColumnData:
    lengths = rng.integers(lo, hi + 1, size=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    flat = _tokens(prefix, rng.integers(0, vocab, size=int(offsets[-1])))
    return ColumnData(name, FeatureKind.MULTI_CATEGORICAL, flat, lengths == 0, offsets)


def _blank(col: ColumnData, rows: np.ndarray) -> ColumnData:
    """Mark ``rows`` missing, clearing their payload."""
    missing = col.missing.copy()
    missing[rows] = True
    if col.kind is FeatureKind.MULTI_CATEGORICAL:
        keep = np.repeat(~missing, np.diff(col.offsets))
        lengths = np.where(missing, 0, np.diff(col.offsets))
        offsets = np.zeros(len(missing) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        return ColumnData(col.name, col.kind, col.values[keep], missing, offsets)
    values = col.values.copy()
    if col.kind is FeatureKind.NUMERICAL:
        values[missing] = np.nan
    elif col.kind is FeatureKind.TEMPORAL:
        values[missing] = 0
    else:
        values[missing] = ""
    return ColumnData(col.name, col.kind, values, missing)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> DatasetBundle:
    if spec.main_rows <= 0 or spec.n_related < 0 or spec.logs_per_user <= 0:
        raise InvalidSpec("sizes must be positive")
    if not 0.0 < spec.ratio < 1.0:
        raise InvalidSpec("ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = spec.main_rows
    n_users = spec.n_users or max(10, n // 10)
    n_items = spec.n_items or max(5, min(500, n // 100))
    span = int(spec.time_span_days * DAY)
    s = spec.signal

    user = rng.integers(0, n_users, size=n)
    item = rng.integers(0, n_items, size=n)
    t = T0 + rng.integers(0, span, size=n)
    ips_per_user = rng.integers(1, 4, size=n_users)
    ip = user * 3 + (rng.integers(0, 3, size=n) % ips_per_user[user])
    n_0 = rng.normal(size=n)
    n_1 = rng.normal(size=n)
    c_0 = rng.integers(0, 10, size=n)
    c_0_effect = rng.normal(0, 0.3, size=10)
    fav_tag = rng.integers(0, 40, size=n)

    u_num = rng.normal(size=n_users)
    u_cat = rng.integers(0, 20, size=n_users)
    u_cat_effect = rng.normal(0, 0.7, size=20)
    i_num = rng.normal(size=n_items)
    user_mu = rng.normal(size=n_users)

    k = spec.n_related
    score = 0.3 * n_0 + c_0_effect[c_0]
    if k == 0:
        score = score + s * (1.2 * n_0 + 0.8 * n_1)
    if k >= 1:
        score = score + s * (1.2 * u_num[user] + u_cat_effect[u_cat[user]])
    if k >= 2:
        score = score + s * 0.8 * i_num[item]
    if k >= 3:
        score = score + s * 1.0 * user_mu[user]
    score = score + rng.logistic(size=n)
    n_pos = int(round(spec.ratio * n))
    labels = np.zeros(n, dtype=np.int8)
    labels[np.argsort(-score, kind="stable")[:n_pos]] = 1

    main_cols = [
        _cat("user_id", _tokens(100_000, user)),
        _cat("item_id", _tokens(500_000, item)),
        _cat("session_ip", _tokens(700_000, ip)),
        _time("t", t),
        _num("n_0", n_0),
        _num("n_1", n_1),
        _cat("c_0", _tokens(200_000, c_0)),
        _cat("fav_tag", _tokens(900_000, fav_tag)),
        _multi("tags", rng, n, 40, 900_000),
    ]
    if spec.empty_columns:
        main_cols.append(_num("empty_num", np.full(n, np.nan)))
        blank = np.empty(n, dtype=object)
        blank[:] = ""
        main_cols.append(ColumnData("empty_cat", FeatureKind.CATEGORICAL, blank,
                                    np.ones(n, bool)))

    related: list[Table] = []
    relations: list[RelationSpec] = []
    uid = np.arange(n_users)
    if k >= 1:
        related.append(Table.from_columns("users", [
            _cat("user_id", _tokens(100_000, uid)),
            _num("u_num", u_num),
            _cat("u_cat", _tokens(300_000, u_cat)),
        ]))
        relations.append(RelationSpec("main", "users", "user_id", "user_id",
                                      RelationType.MANY_TO_ONE))
    if k >= 2:
        iid = np.arange(n_items)
        related.append(Table.from_columns("items", [
            _cat("item_id", _tokens(500_000, iid)),
            _num("i_num", i_num),
            _multi("i_tags", rng, n_items, 40, 900_000),
        ]))
        relations.append(RelationSpec("main", "items", "item_id", "item_id",
                                      RelationType.MANY_TO_ONE))
    if k >= 3:
        counts = rng.poisson(spec.logs_per_user - 1, size=n_users) + 1
        log_user = np.repeat(uid, counts)
        m = len(log_user)
        related.append(Table.from_columns("logs", [
            _cat("user_id", _tokens(100_000, log_user)),
            _num("l_num", user_mu[log_user] + rng.normal(size=m)),
            _cat("l_cat", _tokens(400_000, rng.integers(0, 15, size=m))),
            _time("l_time", T0 + rng.integers(0, span, size=m)),
        ]))
        relations.append(RelationSpec("main", "logs", "user_id", "user_id",
                                      RelationType.MANY_TO_MANY))
    for j in range(3, k):
        related.append(Table.from_columns(f"extra_{j}", [
            _cat("user_id", _tokens(100_000, uid)),
            _num(f"x_num_{j}", rng.normal(size=n_users)),
        ]))
        relations.append(RelationSpec("main", f"extra_{j}", "user_id", "user_id",
                                      RelationType.MANY_TO_ONE))

    main = Table.from_columns("main", main_cols, n)
    if spec.missing_rate > 0:
        main = _sprinkle_missing(main, rng, spec.missing_rate, keep=())
        right_keys = {r.right_table: r.right_key for r in relations}
        related = [_sprinkle_missing(t, rng, spec.missing_rate, keep=(right_keys[t.name],))
                   for t in related]
    return DatasetBundle(main, related, relations, labels, spec.time_budget_s,
                         spec.mem_budget_mb * 1024 * 1024)


def _sprinkle_missing(table: Table, rng, rate: float, keep) -> Table:
    cols = {}
    for name, col in table.columns.items():
        if name in keep:
            cols[name] = col
            continue
        rows = np.flatnonzero(rng.random(table.n_rows) < rate)
        cols[name] = _blank(col, rows)
    return table.with_columns(cols)


def replicate_bundle(bundle: DatasetBundle, factor: int) -> DatasetBundle:
    """Tile the main table (and labels) ``factor`` times."""
    rows = np.tile(np.arange(bundle.main.n_rows), factor)
    labels = None if bundle.labels is None else bundle.labels[rows]
    return DatasetBundle(bundle.main.take(rows), bundle.related, bundle.relations, labels,
                         bundle.time_budget_s, bundle.mem_budget_bytes)
