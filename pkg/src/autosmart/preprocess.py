"""Base-feature detection, pruning, shared block encoding, downcast and sort."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .data_model import (
    BaseFeatureMap,
    ColumnData,
    DatasetBundle,
    FeatureKind,
    Table,
)

log = logging.getLogger(__name__)

ColumnId = tuple[str, str]  # (table name, column name)


class NoKeyFound(ValueError):
    """The bundle declares no join keys, so no factor can be chosen."""


def factorize(values: np.ndarray, missing: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Dense integer ids in first-occurrence order; missing rows get -1."""
    codes, uniques = pd.factorize(values, sort=False)
    codes = codes.astype(np.int64, copy=False)
    if missing is not None and missing.any():
        codes = codes.copy()
        codes[missing] = -1
        # re-densify so that ids only cover present values
        present = codes >= 0
        if present.any():
            sub, uniq = pd.factorize(codes[present], sort=False)
            codes[present] = sub
            return codes, len(uniq)
        return codes, 0
    return codes, len(uniques)


def n_distinct(col: ColumnData) -> int:
    if col.kind is FeatureKind.MULTI_CATEGORICAL:
        return len(pd.unique(col.values)) if len(col.values) else 0
    present = col.values[~col.missing]
    return len(pd.unique(present)) if len(present) else 0


def _determines(s_codes: np.ndarray, f_codes: np.ndarray) -> bool:
    """True when every value of ``s`` co-occurs with exactly one value of ``f``."""
    ok = (s_codes >= 0) & (f_codes >= 0)
    s, f = s_codes[ok], f_codes[ok]
    if len(s) == 0:
        return False
    pairs = np.unique(s * (int(f.max()) + 1) + f)
    return len(pairs) == len(np.unique(s))


def detect_base_features(bundle: DatasetBundle, sample_cap: int = 100_000,
                         seed: int = 0) -> BaseFeatureMap:
    keys: dict[str, set[str]] = {}
    for rel in bundle.relations:
        keys.setdefault(rel.left_table, set()).add(rel.left_key)
        keys.setdefault(rel.right_table, set()).add(rel.right_key)
    main = bundle.main
    main_keys = [c for c in main.column_names if c in keys.get(main.name, ())]
    if not main_keys:
        raise NoKeyFound(f"main table {main.name!r} has no key columns")

    distinct = {c: n_distinct(main[c]) for c in main_keys}
    factor = max(main_keys, key=lambda c: (distinct[c], -main_keys.index(c)))
    f_codes, _ = factorize(main[factor].values, main[factor].missing)

    rng = np.random.default_rng(seed)
    rows = None
    if main.n_rows > sample_cap:
        rows = np.sort(rng.choice(main.n_rows, size=sample_cap, replace=False))

    sessions = set()
    for name in main.columns_of(FeatureKind.CATEGORICAL):
        if name in keys.get(main.name, ()):
            continue
        col = main[name]
        s_codes, n_s = factorize(col.values, col.missing)
        if n_s <= distinct[factor]:
            continue
        if rows is not None and not _determines(s_codes[rows], f_codes[rows]):
            continue
        if _determines(s_codes, f_codes):
            sessions.add(name)
    return BaseFeatureMap(keys, factor, sessions)


def drop_low_information(table: Table, protected: Sequence[str] = (),
                         var_floor: float = 1e-6, unique_ceiling: float = 0.99):
    """Remove near-constant numerics and useless categoricals.

    Returns ``(table, dropped_names)``. Columns in ``protected`` and temporal
    columns are always kept.
    """
    dropped = []
    n = table.n_rows
    for name, col in table.columns.items():
        if name in protected or col.kind is FeatureKind.TEMPORAL:
            continue
        if col.kind is FeatureKind.NUMERICAL:
            v = col.values[~col.missing].astype(np.float64)
            if len(v) == 0:
                dropped.append(name)
                continue
            lo, hi = v.min(), v.max()
            if hi == lo or np.var((v - lo) / (hi - lo)) < var_floor:
                dropped.append(name)
        elif col.kind is FeatureKind.CATEGORICAL:
            k = n_distinct(col)
            if k <= 1 or (n and k / n > unique_ceiling):
                dropped.append(name)
        elif col.kind is FeatureKind.MULTI_CATEGORICAL:
            if n_distinct(col) == 0:
                dropped.append(name)
    if not dropped:
        return table, []
    keep = {k: v for k, v in table.columns.items() if k not in dropped}
    return table.with_columns(keep), dropped


# ---------------------------------------------------------------------------
# Feature blocks

@dataclass
class OverlapMatrix:
    entries: np.ndarray

    @property
    def n(self) -> int:
        return len(self.entries)


def build_overlap_matrix(token_sets: Sequence[set], threshold: float = 0.10) -> OverlapMatrix:
    """Link two columns when their shared tokens exceed ``threshold`` of the
    smaller column's distinct tokens."""
    n = len(token_sets)
    m = np.eye(n, dtype=np.uint8)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = token_sets[i], token_sets[j]
            small = min(len(a), len(b))
            if small == 0:
                continue
            if len(a) > len(b):
                a, b = b, a
            if len(a & b) / small > threshold:
                m[i, j] = m[j, i] = 1
    return OverlapMatrix(m)


@dataclass
class BlockDictionary:
    blocks: dict[int, list[int]]
    visited: np.ndarray

    def block_of(self) -> dict[int, int]:
        return {col: b for b, cols in self.blocks.items() for col in cols}


def build_feature_blocks(m: OverlapMatrix) -> BlockDictionary:
    """Connected components of the overlap graph, visited depth-first.

    Members appear in the same order as a recursive search that scans
    neighbours by ascending index; the stack holds ``(node, next neighbour)``.
    """
    entries = np.asarray(m.entries)
    n = len(entries)
    visited = np.zeros(n, dtype=bool)
    blocks: dict[int, list[int]] = {}
    b = 0
    for start in range(n):
        if visited[start]:
            continue
        visited[start] = True
        b += 1
        members = [start]
        stack = [(start, 0)]
        while stack:
            i, j = stack.pop()
            while j < n and (visited[j] or not entries[i, j]):
                j += 1
            if j == n:
                continue
            stack.append((i, j + 1))
            visited[j] = True
            members.append(j)
            stack.append((j, 0))
        blocks[b] = members
    return BlockDictionary(blocks, visited)


@dataclass
class EncodingDictionary:
    """Per block: ``tokens[b][code]`` is the raw token; ``codes[b]`` inverts it."""

    tokens: dict[int, np.ndarray] = field(default_factory=dict)
    column_block: dict[ColumnId, int] = field(default_factory=dict)
    _lookup: dict[int, dict] = field(default_factory=dict, repr=False)

    def code(self, block: int, token) -> int:
        if block not in self._lookup:
            self._lookup[block] = {t: i for i, t in enumerate(self.tokens[block])}
        return self._lookup[block][token]

    def decode(self, column: ColumnId, codes: np.ndarray) -> np.ndarray:
        return self.tokens[self.column_block[column]][np.asarray(codes, dtype=np.int64)]


def _code_dtype(max_code: int):
    for dt in (np.uint8, np.uint16, np.uint32):
        if max_code <= np.iinfo(dt).max:
            return dt
    return np.uint64


def encode_blocks(tables: dict[str, Table], column_ids: Sequence[ColumnId],
                  blocks: BlockDictionary):
    """Replace raw tokens with per-block codes.

    Codes are dense and assigned in first-occurrence order, scanning each
    block's columns in ``column_ids`` order and every column top to bottom.
    Returns ``(tables, EncodingDictionary)``.
    """
    enc = EncodingDictionary()
    updated: dict[ColumnId, ColumnData] = {}
    for b, members in blocks.blocks.items():
        ids = [column_ids[i] for i in sorted(members)]
        parts = []
        for tname, cname in ids:
            col = tables[tname][cname]
            present = col.values if col.kind is FeatureKind.MULTI_CATEGORICAL \
                else col.values[~col.missing]
            parts.append(present)
            enc.column_block[(tname, cname)] = b
        flat = np.concatenate(parts) if parts else np.empty(0, dtype=object)
        codes, uniques = pd.factorize(flat, sort=False)
        enc.tokens[b] = np.asarray(uniques, dtype=object)
        pos = 0
        for (tname, cname), part in zip(ids, parts):
            col = tables[tname][cname]
            chunk = codes[pos:pos + len(part)].astype(np.int64)
            pos += len(part)
            if col.kind is FeatureKind.MULTI_CATEGORICAL:
                updated[(tname, cname)] = ColumnData(cname, col.kind, chunk, col.missing,
                                                     col.offsets)
            else:
                full = np.zeros(col.n_rows, dtype=np.int64)
                full[~col.missing] = chunk
                updated[(tname, cname)] = ColumnData(cname, col.kind, full, col.missing)

    out = {}
    for tname, table in tables.items():
        cols = {n: updated.get((tname, n), c) for n, c in table.columns.items()}
        out[tname] = table.with_columns(cols)
    return out, enc


def temporal_order(table: Table) -> np.ndarray | None:
    """Stable ascending order by the first temporal column; missing last."""
    temporal = table.columns_of(FeatureKind.TEMPORAL)
    if not temporal:
        return None
    col = table[temporal[0]]
    key = col.values.astype(np.int64)
    if col.missing.any():
        key = np.where(col.missing, np.iinfo(np.int64).max, key)
    return np.argsort(key, kind="stable")


def downcast_column(col: ColumnData) -> ColumnData:
    if col.kind is FeatureKind.NUMERICAL:
        return ColumnData(col.name, col.kind, col.values.astype(np.float32), col.missing)
    if col.kind.is_categorical and col.encoded:
        top = int(col.values.max()) if len(col.values) else 0
        values = col.values.astype(_code_dtype(top))
        return ColumnData(col.name, col.kind, values, col.missing, col.offsets)
    return col


def downcast_and_sort(table: Table) -> Table:
    order = temporal_order(table)
    if order is not None:
        table = table.take(order)
    return table.with_columns({n: downcast_column(c) for n, c in table.columns.items()})


# ---------------------------------------------------------------------------
# Whole-bundle stage

@dataclass
class Preprocessed:
    bundle: DatasetBundle
    base: BaseFeatureMap
    blocks: BlockDictionary
    column_ids: list[ColumnId]
    encoding: EncodingDictionary
    dropped: dict[str, list[str]]
    main_order: np.ndarray  # sorted position -> original main row


def token_set(col: ColumnData) -> set:
    if col.kind is FeatureKind.MULTI_CATEGORICAL:
        return set(pd.unique(col.values)) if len(col.values) else set()
    present = col.values[~col.missing]
    return set(pd.unique(present)) if len(present) else set()


def preprocess_bundle(bundle: DatasetBundle, threshold: float = 0.10,
                      seed: int = 0) -> Preprocessed:
    try:
        base = detect_base_features(bundle, seed=seed)
    except NoKeyFound:
        log.warning("no key columns declared; first-order features disabled")
        base = BaseFeatureMap({}, None, set())

    dropped: dict[str, list[str]] = {}
    tables: dict[str, Table] = {}
    for name, table in bundle.tables.items():
        protected = set(base.keys.get(name, ()))
        if name == bundle.main.name:
            protected |= base.sessions
        tables[name], dropped[name] = drop_low_information(table, protected)
        if dropped[name]:
            log.info("dropped low-information columns from %s: %s", name, dropped[name])

    column_ids: list[ColumnId] = [
        (tname, cname) for tname, t in tables.items()
        for cname in t.columns_of(FeatureKind.CATEGORICAL, FeatureKind.MULTI_CATEGORICAL)
    ]
    index = {cid: i for i, cid in enumerate(column_ids)}
    overlap = build_overlap_matrix([token_set(tables[t][c]) for t, c in column_ids], threshold)
    # join keys must share a dictionary or the merge cannot match them
    for rel in bundle.relations:
        i = index[(rel.left_table, rel.left_key)]
        j = index[(rel.right_table, rel.right_key)]
        overlap.entries[i, j] = overlap.entries[j, i] = 1
    blocks = build_feature_blocks(overlap)
    tables, encoding = encode_blocks(tables, column_ids, blocks)

    main_name = bundle.main.name
    order = temporal_order(tables[main_name])
    main_order = np.arange(bundle.main.n_rows) if order is None else order
    tables = {n: downcast_and_sort(t) for n, t in tables.items()}
    labels = None if bundle.labels is None else np.asarray(bundle.labels)[main_order]
    out = DatasetBundle(tables[main_name], [tables[t.name] for t in bundle.related],
                        list(bundle.relations), labels, bundle.time_budget_s,
                        bundle.mem_budget_bytes)
    return Preprocessed(out, base, blocks, column_ids, encoding, dropped, main_order)
