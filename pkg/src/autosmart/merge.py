"""Collapse related tables into the main table.

One-to-one and many-to-one links are joined directly; one-to-many and
many-to-many links are reduced per key (mean / mode / newest time).
Key columns on both sides of a relation must already share one encoding.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .data_model import (
    ColumnData,
    DatasetBundle,
    FeatureFrame,
    FeatureKind,
    RelationSpec,
    Table,
)

log = logging.getLogger(__name__)

RECIPE = {
    FeatureKind.NUMERICAL: "mean",
    FeatureKind.CATEGORICAL: "mode",
    FeatureKind.MULTI_CATEGORICAL: "mode_of_elements",
    FeatureKind.TEMPORAL: "max",
}


class CyclicRelationGraph(ValueError):
    pass


class DuplicateRightKey(ValueError):
    def __init__(self, table: str, key: str):
        super().__init__(f"key {key!r} of table {table!r} is not unique")
        self.table = table
        self.key = key


@dataclass
class MergeStep:
    relation: RelationSpec  # oriented parent (left) <- child (right)
    recipe: dict[str, str]


@dataclass
class MergePlan:
    steps: list[MergeStep]


def plan_merge(bundle: DatasetBundle) -> MergePlan:
    """Orient every relation towards the main table and order leaves first.

    The relation graph must be a tree rooted at the main table; a second
    path between two tables (including two relations between the same pair)
    is a cycle.
    """
    tables = bundle.tables
    main = bundle.main.name
    depth = {main: 0}
    used: set[int] = set()
    oriented: list[RelationSpec] = []
    queue = deque([main])
    while queue:
        current = queue.popleft()
        for idx, rel in enumerate(bundle.relations):
            if idx in used or current not in (rel.left_table, rel.right_table):
                continue
            used.add(idx)
            step = rel if rel.left_table == current else rel.flipped()
            if step.right_table == current or step.right_table in depth:
                raise CyclicRelationGraph(
                    f"relation {rel.left_table}.{rel.left_key} <-> "
                    f"{rel.right_table}.{rel.right_key} closes a cycle")
            depth[step.right_table] = depth[current] + 1
            oriented.append(step)
            queue.append(step.right_table)
    unreachable = set(tables) - set(depth)
    if unreachable:
        log.warning("tables not connected to %s are ignored: %s", main, sorted(unreachable))

    # deepest children first so chains resolve bottom-up
    ordered = sorted(oriented, key=lambda r: -depth[r.right_table])
    steps = []
    for rel in ordered:
        child = tables[rel.right_table]
        recipe = {n: ("join" if rel.rel_type.is_join else RECIPE[c.kind])
                  for n, c in child.columns.items() if n != rel.right_key}
        steps.append(MergeStep(rel, recipe))
    return MergePlan(steps)


def _gather(col: ColumnData, idx: np.ndarray, name: str) -> ColumnData:
    """Row ``i`` takes ``col[idx[i]]``; ``idx[i] < 0`` gives a missing cell."""
    n = len(idx)
    if col.n_rows == 0:
        idx = np.full(n, -1, dtype=np.int64)
    safe = np.maximum(idx, 0)
    missing = (idx < 0) | (col.missing[safe] if col.n_rows else True)
    if col.kind is FeatureKind.MULTI_CATEGORICAL:
        if col.n_rows == 0:
            return ColumnData(name, col.kind, col.values[:0], missing,
                              np.zeros(n + 1, dtype=np.int64))
        lens = np.where(missing, 0, np.diff(col.offsets)[safe])
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        owner = np.repeat(np.arange(n), lens)
        pos = col.offsets[safe][owner] + (np.arange(int(offsets[-1])) - offsets[owner])
        return ColumnData(name, col.kind, col.values[pos], missing, offsets)
    if col.n_rows == 0:
        values = np.zeros(n, dtype=col.values.dtype)
    else:
        values = col.values[safe]
    if col.kind is FeatureKind.NUMERICAL:
        values = np.where(missing, np.nan, values).astype(col.values.dtype)
    return ColumnData(name, col.kind, values, missing)


def _key_codes(col: ColumnData) -> np.ndarray:
    codes = col.values.astype(np.int64)
    return np.where(col.missing, -1, codes)


def merge_join(main: Table, related: Table, rel: RelationSpec,
               prefix: str | None = None) -> Table:
    """Attach each matching related row's columns to the main rows."""
    prefix = f"{related.name}." if prefix is None else prefix
    left = _key_codes(main[rel.left_key])
    right = _key_codes(related[rel.right_key])
    present = right[right >= 0]
    if len(np.unique(present)) != len(present):
        raise DuplicateRightKey(related.name, rel.right_key)
    size = int(max(left.max(initial=-1), right.max(initial=-1))) + 1
    lookup = np.full(size + 1, -1, dtype=np.int64)
    lookup[present] = np.flatnonzero(right >= 0)
    idx = np.where(left >= 0, lookup[np.maximum(left, 0)], -1)
    cols = dict(main.columns)
    for name, col in related.columns.items():
        if name == rel.right_key:
            continue
        cols[prefix + name] = _gather(col, idx, prefix + name)
    return main.with_columns(cols)


def _group_mode(keys: np.ndarray, codes: np.ndarray, n_keys: int):
    """Most frequent code per key, ties to the smallest code."""
    best = np.zeros(n_keys, dtype=np.int64)
    found = np.zeros(n_keys, dtype=bool)
    if len(keys) == 0:
        return best, found
    width = int(codes.max()) + 1
    pair, counts = np.unique(keys * width + codes, return_counts=True)
    pk, pc = pair // width, pair % width
    order = np.lexsort((pc, -counts, pk))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pk[order][1:] != pk[order][:-1]
    winners = order[first]
    best[pk[winners]] = pc[winners]
    found[pk[winners]] = True
    return best, found


def aggregate_by_key(col: ColumnData, keys: np.ndarray, n_keys: int):
    """Reduce ``col`` per key code. Returns ``(values, present)`` arrays of
    length ``n_keys``; categorical results are codes."""
    valid_row = (keys >= 0) & ~col.missing
    if col.kind is FeatureKind.NUMERICAL:
        k = keys[valid_row]
        v = col.values[valid_row].astype(np.float64)
        sums = np.bincount(k, weights=v, minlength=n_keys)
        counts = np.bincount(k, minlength=n_keys)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = sums / counts
        return mean, counts > 0
    if col.kind is FeatureKind.CATEGORICAL:
        return _group_mode(keys[valid_row], col.values[valid_row].astype(np.int64), n_keys)
    if col.kind is FeatureKind.MULTI_CATEGORICAL:
        lengths = np.diff(col.offsets)
        elem_keys = np.repeat(np.where(valid_row, keys, -1), lengths)
        keep = elem_keys >= 0
        return _group_mode(elem_keys[keep], col.values[keep].astype(np.int64), n_keys)
    # temporal: newest time
    k = keys[valid_row]
    out = np.full(n_keys, np.iinfo(np.int64).min, dtype=np.int64)
    np.maximum.at(out, k, col.values[valid_row].astype(np.int64))
    present = np.zeros(n_keys, dtype=bool)
    present[k] = True
    return out, present


def merge_aggregate(main: Table, related: Table, rel: RelationSpec,
                    prefix: str | None = None) -> Table:
    """Reduce the related rows matching each main key and attach the result."""
    prefix = f"{related.name}." if prefix is None else prefix
    left = _key_codes(main[rel.left_key])
    right = _key_codes(related[rel.right_key])
    n_keys = int(max(left.max(initial=-1), right.max(initial=-1))) + 1
    has_left = left >= 0
    lk = np.maximum(left, 0)
    cols = dict(main.columns)
    for name, col in related.columns.items():
        if name == rel.right_key:
            continue
        values, present = aggregate_by_key(col, right, n_keys)
        if n_keys:
            row_vals = values[lk]
            missing = ~(has_left & present[lk])
        else:
            row_vals = np.zeros(main.n_rows, dtype=values.dtype)
            missing = np.ones(main.n_rows, dtype=bool)
        kind = col.kind
        if kind is FeatureKind.NUMERICAL:
            row_vals = np.where(missing, np.nan, row_vals)
        elif kind is FeatureKind.TEMPORAL:
            row_vals = np.where(missing, 0, row_vals)
        else:
            row_vals = np.where(missing, 0, row_vals)
            kind = FeatureKind.CATEGORICAL
        cols[prefix + name] = ColumnData(prefix + name, kind, row_vals, missing)
    return main.with_columns(cols)


def merge_all(bundle: DatasetBundle, plan: MergePlan) -> FeatureFrame:
    tables = dict(bundle.tables)
    for step in plan.steps:
        rel = step.relation
        parent, child = tables[rel.left_table], tables[rel.right_table]
        if rel.rel_type.is_join:
            try:
                merged = merge_join(parent, child, rel)
            except DuplicateRightKey:
                log.warning("%s.%s is not unique; merging %s as many-to-many",
                            rel.right_table, rel.right_key, rel.right_table)
                merged = merge_aggregate(parent, child, rel)
        else:
            merged = merge_aggregate(parent, child, rel)
        tables[rel.left_table] = merged
    return FeatureFrame.from_table(tables[bundle.main.name])
