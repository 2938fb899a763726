"""Staged feature generation with gain-based selection between stages.

Stages run in order: group counts over key columns, binned/grouped numeric
statistics and count encodings, time-bucketed counts, and a final encoding
that leaves only numeric columns. Stages 1 to 3 each end with one selection
fit, so the number of fits grows with the number of stages rather than
the number of features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from . import gbdt
from .controller import BudgetTracker, feature_cap
from .data_model import BaseFeatureMap, ColumnData, FeatureFrame, FeatureKind

log = logging.getLogger(__name__)

GAIN_EPS = 1e-12
SELECTION_ROWS = 50_000
N_QUANTILE_BINS = 10
LABEL_ALPHA = 10.0
BUCKET_RANGE = (100, 10_000)
TIME_UNITS = (("day", 86_400), ("hour", 3_600), ("minute", 60), ("second", 1))
SELECTION_PARAMS = gbdt.GbdtParams(n_rounds=25, learning_rates=0.1, min_split_gain=15.0)


class MissingLabels(ValueError):
    pass


# ---------------------------------------------------------------------------
# group-by helpers

def _codes(col: ColumnData) -> np.ndarray:
    """Integer codes with -1 for missing cells (categorical columns only)."""
    return np.where(col.missing, -1, col.values.astype(np.int64))


def _dense(codes: np.ndarray) -> tuple[np.ndarray, int]:
    """Re-index non-negative codes densely, keeping -1."""
    ok = codes >= 0
    out = np.full(len(codes), -1, dtype=np.int64)
    if not ok.any():
        return out, 0
    uniq, inv = np.unique(codes[ok], return_inverse=True)
    out[ok] = inv
    return out, len(uniq)


def _broadcast(per_group: np.ndarray, groups: np.ndarray) -> np.ndarray:
    out = np.full(len(groups), np.nan)
    ok = groups >= 0
    out[ok] = per_group[groups[ok]]
    return out


def group_count(groups: np.ndarray) -> np.ndarray:
    """Rows sharing each row's group; NaN where the group is missing."""
    g, n = _dense(groups)
    return _broadcast(np.bincount(g[g >= 0], minlength=n).astype(np.float64), g)


def group_nunique(groups: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Distinct non-missing target values per group."""
    g, n = _dense(groups)
    ok = (g >= 0) & (target >= 0)
    per = np.zeros(n)
    if ok.any():
        pairs = np.unique(np.stack([g[ok], target[ok]]), axis=1)
        per = np.bincount(pairs[0], minlength=n).astype(np.float64)
    return _broadcast(per, g)


def group_mean_std(groups: np.ndarray, x: np.ndarray):
    """Per-group mean and population std of ``x`` (NaN-aware)."""
    g, n = _dense(groups)
    ok = (g >= 0) & ~np.isnan(x)
    xv = x[ok].astype(np.float64)
    cnt = np.bincount(g[ok], minlength=n).astype(np.float64)
    s1 = np.bincount(g[ok], weights=xv, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / cnt
        dev = xv - mean[g[ok]]
        var = np.bincount(g[ok], weights=dev * dev, minlength=n) / cnt
    return _broadcast(mean, g), _broadcast(np.sqrt(var), g)


def quantile_bins(x: np.ndarray, n_bins: int = N_QUANTILE_BINS) -> np.ndarray:
    """Bin index in [0, n_bins) by empirical quantiles; -1 for NaN."""
    out = np.full(len(x), -1, dtype=np.int64)
    ok = ~np.isnan(x)
    if not ok.any():
        return out
    edges = np.unique(np.quantile(x[ok].astype(np.float64), np.linspace(0, 1, n_bins + 1)[1:-1]))
    out[ok] = np.searchsorted(edges, x[ok], side="right")
    return out


def _combine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Joint code of two code arrays; -1 when either side is missing."""
    ok = (a >= 0) & (b >= 0)
    out = np.full(len(a), -1, dtype=np.int64)
    out[ok] = a[ok] * (int(b.max(initial=0)) + 1) + b[ok]
    return out


def _num_col(name: str, values: np.ndarray) -> ColumnData:
    values = np.asarray(values, dtype=np.float64)
    return ColumnData(name, FeatureKind.NUMERICAL, values.astype(np.float32), np.isnan(values))


# ---------------------------------------------------------------------------
# stage 1

def gen_first_order(frame: FeatureFrame, base: BaseFeatureMap,
                    main_name: str = "main") -> list[ColumnData]:
    keys = [k for k in frame.names
            if k in base.keys.get(main_name, ()) and frame[k].kind is FeatureKind.CATEGORICAL]
    groups = ([base.factor] if base.factor in frame else []) + \
        [k for k in keys if k != base.factor]
    targets = keys + [s for s in frame.names if s in base.sessions and s not in keys]
    out = []
    for g in groups:
        gc = _codes(frame[g])
        out.append(_num_col(f"count({g})", group_count(gc)))
        for t in targets:
            if t == g:
                continue
            out.append(_num_col(f"nunique({t}|{g})", group_nunique(gc, _codes(frame[t]))))
    return out


# ---------------------------------------------------------------------------
# stage 2

def count_encode(col: ColumnData) -> tuple[np.ndarray, np.ndarray]:
    """Occurrence count of each row's value and that count over n_rows."""
    count = group_count(_codes(col))
    return count, count / max(1, col.n_rows)


def bin_share(groups: np.ndarray, x: np.ndarray, n_bins: int = N_QUANTILE_BINS) -> np.ndarray:
    """Share of a group's rows that fall into the same quantile bin of ``x``."""
    joint = _combine(_dense(groups)[0], quantile_bins(x, n_bins))
    with np.errstate(invalid="ignore"):
        return group_count(joint) / group_count(groups)


def position_feature(item: ColumnData, lists: ColumnData) -> np.ndarray:
    """1-based position of the row's item inside the row's list, 0 if absent."""
    pos = K.list_position(item.values.astype(np.int64), item.missing,
                          lists.values.astype(np.int64), lists.offsets, lists.missing)
    return pos.astype(np.float64)


def gen_second_order(frame: FeatureFrame, base: BaseFeatureMap, selected: Sequence[str] = (),
                     block_of: dict[str, int] | None = None, main_name: str = "main",
                     limit: int | None = None) -> list[ColumnData]:
    keys = [k for k in frame.names
            if k in base.keys.get(main_name, ()) and frame[k].kind is FeatureKind.CATEGORICAL]
    numeric = [n for n in frame.names_of(FeatureKind.NUMERICAL)
               if frame.provenance[n] == "original"] + [s for s in selected if s in frame]
    out: list[ColumnData] = []
    # cheap encodings first so a limit trims the grouped statistics
    for name in frame.names_of(FeatureKind.CATEGORICAL):
        count, freq = count_encode(frame[name])
        out.append(_num_col(f"count_enc({name})", count))
        out.append(_num_col(f"freq_enc({name})", freq))
    if block_of:
        for m in frame.names_of(FeatureKind.MULTI_CATEGORICAL):
            for c in frame.names_of(FeatureKind.CATEGORICAL):
                if block_of.get(c) is not None and block_of.get(c) == block_of.get(m):
                    out.append(_num_col(f"position({c}@{m})",
                                        _masked(position_feature(frame[c], frame[m]))))
    for key in keys:
        kc = _codes(frame[key])
        for name in numeric:
            if limit is not None and len(out) >= limit:
                break
            if name.endswith(f"|{key})") or name == f"count({key})":
                continue  # already constant within the key
            x = frame[name].values.astype(np.float64)
            mean, std = group_mean_std(kc, x)
            out.append(_num_col(f"mean({name}|{key})", mean))
            out.append(_num_col(f"std({name}|{key})", std))
            out.append(_num_col(f"binshare({name}|{key})", bin_share(kc, x)))
    if limit is not None:
        out = out[:limit]
    return out


def _masked(pos: np.ndarray) -> np.ndarray:
    return np.where(pos < 0, np.nan, pos)


# ---------------------------------------------------------------------------
# stage 3

def choose_time_unit(t: np.ndarray) -> tuple[str, int]:
    """First unit (coarsest first) whose span yields 100 to 10,000 buckets."""
    span = float(t.max() - t.min()) if len(t) else 0.0
    for name, sec in TIME_UNITS:
        if BUCKET_RANGE[0] <= span // sec + 1 <= BUCKET_RANGE[1]:
            return name, sec
    # too short for any unit: seconds; too long: days
    return TIME_UNITS[-1] if span < BUCKET_RANGE[0] else TIME_UNITS[0]


def time_buckets(t: np.ndarray, missing: np.ndarray, unit_s: int) -> np.ndarray:
    t = t.astype(np.int64)
    lo = t[~missing].min() if (~missing).any() else 0
    return np.where(missing, -1, (t - lo) // unit_s)


def gen_temporal(frame: FeatureFrame, time_col: str | None, base: BaseFeatureMap,
                 selected: Sequence[str] = (), main_name: str = "main",
                 limit: int | None = None) -> list[ColumnData]:
    if time_col is None or time_col not in frame:
        return []
    tcol = frame[time_col]
    if tcol.missing.all():
        return []
    unit, sec = choose_time_unit(tcol.values[~tcol.missing])
    buckets = time_buckets(tcol.values, tcol.missing, sec)
    keys = [k for k in frame.names
            if k in base.keys.get(main_name, ()) and frame[k].kind is FeatureKind.CATEGORICAL]
    cats = [c for c in frame.names_of(FeatureKind.CATEGORICAL) if c not in keys]
    cats = [c for c in selected if c in cats] + [c for c in cats if c not in selected]
    out: list[ColumnData] = [_num_col(f"count(@{unit})", group_count(buckets))]
    for key in keys:
        joint = _combine(_dense(_codes(frame[key]))[0], buckets)
        out.append(_num_col(f"count({key}@{unit})", group_count(joint)))
        for c in cats:
            out.append(_num_col(f"nunique({c}|{key}@{unit})",
                                group_nunique(joint, _codes(frame[c]))))
    if limit is not None:
        out = out[:limit]
    return out


# ---------------------------------------------------------------------------
# stage 4

def label_ratio_table(codes: np.ndarray, y: np.ndarray, alpha: float = LABEL_ALPHA,
                      prior: float | None = None):
    """Smoothed positive rate per code: (pos + alpha*prior) / (n + alpha)."""
    prior = float(np.mean(y)) if prior is None else prior
    ok = codes >= 0
    size = int(codes.max(initial=-1)) + 1
    n = np.bincount(codes[ok], minlength=size).astype(np.float64)
    pos = np.bincount(codes[ok], weights=y[ok].astype(np.float64), minlength=size)
    return (pos + alpha * prior) / (n + alpha), prior


def _lookup(table: np.ndarray, codes: np.ndarray, prior: float) -> np.ndarray:
    out = np.full(len(codes), prior)
    ok = (codes >= 0) & (codes < len(table))
    out[ok] = table[codes[ok]]
    return out


def label_ratio_encode(codes: np.ndarray, y_train: np.ndarray, train_mask: np.ndarray,
                       alpha: float = LABEL_ALPHA, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Encode codes by their smoothed training positive rate.

    Non-training rows use the table built on all training rows (unseen
    values get the prior). With ``folds > 1`` each training row is encoded
    by a table built on the other folds, so its own label never leaks in.
    """
    train_idx = np.flatnonzero(train_mask)
    tc = codes[train_idx]
    table, prior = label_ratio_table(tc, y_train, alpha)
    out = _lookup(table, codes, prior)
    if folds > 1 and len(train_idx) >= folds:
        fold = np.random.default_rng(seed).permutation(len(train_idx)) % folds
        for k in range(folds):
            held = fold == k
            t_k, _ = label_ratio_table(tc[~held], y_train[~held], alpha, prior)
            out[train_idx[held]] = _lookup(t_k, tc[held], prior)
    return out


def encode_categorical_final(frame: FeatureFrame, y_train: np.ndarray | None,
                             train_mask: np.ndarray, alpha: float = LABEL_ALPHA,
                             folds: int = 5, seed: int = 0,
                             time_col: str | None = None) -> FeatureFrame:
    """Replace every non-numeric column by a numeric one, in place.

    Multi-categorical cells become the mean of their element codes;
    categorical cells become their smoothed training positive rate;
    temporal columns become seconds before ``time_col`` (the main time
    column itself is dropped).
    """
    cats = frame.names_of(FeatureKind.CATEGORICAL)
    if cats and y_train is None:
        raise MissingLabels("label-ratio encoding needs training labels")
    train_mask = np.asarray(train_mask, dtype=bool)
    if y_train is not None and len(y_train) != int(train_mask.sum()):
        raise MissingLabels(f"{len(y_train)} labels for {int(train_mask.sum())} training rows")
    main_t = None
    if time_col is not None and time_col in frame:
        main_t = frame[time_col].values.astype(np.float64)
        main_t[frame[time_col].missing] = np.nan
    for name in frame.names:
        col = frame[name]
        if col.kind is FeatureKind.NUMERICAL:
            continue
        if col.kind is FeatureKind.MULTI_CATEGORICAL:
            vals = K.list_means(col.values.astype(np.float64), col.offsets)
            vals[col.missing] = np.nan
            new = _num_col(f"{name}#mean", vals)
        elif col.kind is FeatureKind.CATEGORICAL:
            new = _num_col(f"{name}#ratio",
                           label_ratio_encode(_codes(col), np.asarray(y_train), train_mask,
                                              alpha, folds, seed))
        else:
            frame.drop(name)
            if name == time_col:
                continue
            t = np.where(col.missing, np.nan, col.values.astype(np.float64))
            new = _num_col(f"{name}#age", (main_t - t) if main_t is not None else t)
            frame.add(new, "encoded")
            continue
        frame.drop(name)
        frame.add(new, "encoded")
    return frame


# ---------------------------------------------------------------------------
# selection

def numeric_values(col: ColumnData, rows: np.ndarray | None = None) -> np.ndarray:
    """A float view of any column, as seen by a selection fit."""
    if rows is not None:
        col = col.take(rows)
    if col.kind is FeatureKind.MULTI_CATEGORICAL:
        out = K.list_means(col.values.astype(np.float64), col.offsets)
    else:
        out = col.values.astype(np.float64)
    out[col.missing] = np.nan
    return out


@dataclass
class SelectionEntry:
    feature: str
    stage: str
    gain: float
    kept: bool


@dataclass
class SelectionReport:
    stage: str
    sample_size: int = 0
    entries: list[SelectionEntry] = field(default_factory=list)

    @property
    def kept(self) -> list[str]:
        return [e.feature for e in self.entries if e.kept]

    @property
    def dropped(self) -> list[str]:
        return [e.feature for e in self.entries if not e.kept]

    def to_tsv(self) -> str:
        rows = ["feature\tstage\tgain\tkept"]
        rows += [f"{e.feature}\t{e.stage}\t{e.gain:.6g}\t{int(e.kept)}" for e in self.entries]
        return "\n".join(rows) + "\n"


def dump_reports(reports: Sequence[SelectionReport], path: str | Path) -> None:
    body = ["feature\tstage\tgain\tkept"]
    for r in reports:
        body += r.to_tsv().splitlines()[1:]
    Path(path).write_text("\n".join(body) + "\n")


def selection_sample(y_train: np.ndarray, cap: int = SELECTION_ROWS, seed: int = 0) -> np.ndarray:
    """Indices into the training rows, stratified on the label, sorted."""
    n = len(y_train)
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    out = []
    for cls in (0, 1):
        idx = np.flatnonzero(y_train == cls)
        k = int(round(cap * len(idx) / n))
        out.append(rng.choice(idx, size=min(k, len(idx)), replace=False))
    return np.sort(np.concatenate(out))


def select_features(frame: FeatureFrame, candidates: Sequence[ColumnData], y_train: np.ndarray,
                    train_rows: np.ndarray, stage: str = "", cap: int | None = None,
                    params: gbdt.GbdtParams = SELECTION_PARAMS, seed: int = 0,
                    sample_cap: int = SELECTION_ROWS) -> tuple[list[ColumnData], SelectionReport]:
    """Score candidates with one fit on a label-stratified training sample.

    Existing frame columns take part in the fit but are never dropped. A
    candidate survives when its total split gain exceeds ``GAIN_EPS``; when
    more than ``cap`` survive, the highest-gain ones are kept.
    """
    report = SelectionReport(stage)
    if not candidates:
        return [], report
    y_train = np.asarray(y_train)
    sample = selection_sample(y_train, sample_cap, seed)
    rows = np.asarray(train_rows)[sample]
    y = y_train[sample]
    report.sample_size = len(rows)
    names = frame.names + [c.name for c in candidates]
    X = np.empty((len(rows), len(names)), dtype=np.float64)
    for j, name in enumerate(frame.names):
        X[:, j] = numeric_values(frame[name], rows)
    for j, c in enumerate(candidates, start=len(frame.names)):
        X[:, j] = numeric_values(c, rows)
    if len(np.unique(y)) < 2:
        gains = np.zeros(len(names))
    else:
        model = gbdt.fit(X, y, None, gbdt.GbdtParams(**{**params.__dict__, "seed": seed}),
                         feature_names=names)
        gains = model.feature_gains
    cand_gain = gains[len(frame.names):]
    order = np.argsort(-cand_gain, kind="stable")
    keep = np.zeros(len(candidates), dtype=bool)
    n_ok = 0
    for i in order:
        if cand_gain[i] > GAIN_EPS and (cap is None or n_ok < cap):
            keep[i] = True
            n_ok += 1
    for c, g, k in zip(candidates, cand_gain, keep):
        report.entries.append(SelectionEntry(c.name, stage, float(max(g, 0.0)), bool(k)))
    return [c for c, k in zip(candidates, keep) if k], report


# ---------------------------------------------------------------------------
# driver

# rough seconds per (row x generated column) and per (row x fitted column x round)
GEN_COST = 4e-8
FIT_COST = 3e-9


def _stage_cost(n_rows: int, n_gen: int, n_fit_cols: int, sample: int) -> float:
    rounds = SELECTION_PARAMS.n_rounds
    return GEN_COST * n_rows * n_gen + FIT_COST * sample * n_fit_cols * rounds + 0.05


@dataclass
class FeatureResult:
    frame: FeatureFrame
    reports: list[SelectionReport]
    skipped: list[str]
    n_fits: int


def run_feature_pipeline(frame: FeatureFrame, base: BaseFeatureMap, y_train: np.ndarray,
                         train_mask: np.ndarray, tracker: BudgetTracker | None = None,
                         time_col: str | None = None, block_of: dict[str, int] | None = None,
                         main_name: str = "main", seed: int = 0,
                         reserve: float = 0.5) -> FeatureResult:
    """Stages 1 to 3 (each gated by the tracker and followed by selection),
    then the unconditional final encoding."""
    train_mask = np.asarray(train_mask, dtype=bool)
    train_rows = np.flatnonzero(train_mask)
    cap = feature_cap(frame.n_rows)
    sample = min(SELECTION_ROWS, len(train_rows))
    reports: list[SelectionReport] = []
    skipped: list[str] = []
    fits0 = gbdt.fit_count()
    selected: dict[str, list[str]] = {}

    stages = [
        ("order1", lambda: gen_first_order(frame, base, main_name)),
        ("order2", lambda: gen_second_order(frame, base, selected.get("order1", ()),
                                            block_of, main_name, limit=4 * cap)),
        ("temporal", lambda: gen_temporal(frame, time_col, base, selected.get("order1", ()),
                                          main_name, limit=4 * cap)),
    ]
    for tag, generate in stages:
        width = len(frame.names)
        est = _stage_cost(frame.n_rows, 2 * cap, width + 2 * cap, sample)
        if tracker is not None:
            tracker.checkpoint(f"fe.{tag}")
            if not tracker.can_afford(est, reserve, what=f"feature stage {tag}"):
                skipped.append(tag)
                continue
        candidates = generate()
        if not candidates:
            reports.append(SelectionReport(tag))
            continue
        kept, report = select_features(frame, candidates, y_train, train_rows, tag, cap,
                                       seed=seed)
        for c in kept:
            frame.add(c, tag)
        del candidates
        selected[tag] = [c.name for c in kept]
        reports.append(report)
        if tracker is not None:
            tracker.note_memory(frame.nbytes_estimate())
        log.info("stage %s kept %d of %d candidates", tag, len(kept), len(report.entries))
    if tracker is not None:
        tracker.checkpoint("fe.encode")
    encode_categorical_final(frame, y_train, train_mask, seed=seed, time_col=time_col)
    return FeatureResult(frame, reports, skipped, gbdt.fit_count() - fits0)
