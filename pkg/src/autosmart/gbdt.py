"""Histogram gradient-boosted trees for binary classification.

Logistic loss, per-sample weights, per-round learning rates, leaf-wise
growth, learned missing-value directions and per-feature split-gain
accounting. Inputs are bucketed once into at most ``n_bins`` quantile bins
per feature (uint8 codes, bin ``n_bins`` reserved for missing values).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .evaluation import auc as auc_score

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_PRIOR_EPS = 1e-6
_BIN_SAMPLE = 200_000


class ColumnMismatch(ValueError):
    pass


class DegenerateLabels(UserWarning):
    """Only one class carries weight; the model is the clipped prior."""


_fits = 0


def fit_count() -> int:
    """Number of ``fit`` calls in this process (for budget audits)."""
    return _fits


@dataclass
class GbdtParams:
    n_rounds: int = 100
    learning_rates: float | Sequence[float] = 0.1
    max_leaves: int = 31
    min_child_weight: float = 1.0
    min_child_samples: int = 20
    n_bins: int = 255
    feature_fraction: float = 1.0
    row_fraction: float = 1.0
    reg_lambda: float = 1.0
    min_split_gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 2 <= self.n_bins <= 255:
            raise ValueError("n_bins must lie in [2, 255]")
        for name in ("feature_fraction", "row_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")

    def rates(self) -> np.ndarray:
        lr = self.learning_rates
        if np.isscalar(lr):
            return np.full(self.n_rounds, float(lr))
        lr = np.asarray(lr, dtype=np.float64)
        if len(lr) < self.n_rounds:
            raise ValueError("learning-rate schedule shorter than n_rounds")
        return lr[:self.n_rounds]


# ---------------------------------------------------------------------------
# binning

def compute_cuts(x: np.ndarray, n_bins: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Inclusive upper bounds of all bins but the last.

    Columns with at most ``n_bins`` distinct values get one bin per value.
    """
    v = x[~np.isnan(x)]
    if len(v) > _BIN_SAMPLE:
        rng = rng or np.random.default_rng(0)
        v = rng.choice(v, size=_BIN_SAMPLE, replace=False)
    if len(v) == 0:
        return np.empty(0, dtype=np.float64)
    distinct = np.unique(v.astype(np.float64))
    if len(distinct) <= n_bins:
        return distinct[:-1]
    qs = np.quantile(distinct if len(distinct) < len(v) // 4 else v.astype(np.float64),
                     np.linspace(0.0, 1.0, n_bins + 1)[1:-1], method="lower")
    cuts = np.unique(qs)
    return cuts[cuts < distinct[-1]]


def apply_cuts(x: np.ndarray, cuts: np.ndarray, missing_bin: int) -> np.ndarray:
    out = np.searchsorted(cuts, x, side="left").astype(np.uint8)
    out[np.isnan(x)] = missing_bin
    return out


@dataclass
class BinnedData:
    """Feature-major uint8 bin codes plus the cuts that produced them."""

    binned: np.ndarray  # (n_features, n_rows)
    cuts: list[np.ndarray]
    names: list[str]
    n_bins: int

    @property
    def n_rows(self) -> int:
        return self.binned.shape[1]

    @property
    def n_features(self) -> int:
        return self.binned.shape[0]

    @classmethod
    def from_matrix(cls, X, names: Sequence[str] | None = None, n_bins: int = 255,
                    seed: int = 0) -> "BinnedData":
        X, names = _as_matrix(X, names)
        rng = np.random.default_rng(seed)
        cuts = []
        binned = np.empty((X.shape[1], X.shape[0]), dtype=np.uint8)
        for f in range(X.shape[1]):
            col = np.ascontiguousarray(X[:, f], dtype=np.float64)
            c = compute_cuts(col, n_bins, rng)
            cuts.append(c)
            binned[f] = apply_cuts(col, c, n_bins)
        return cls(binned, cuts, list(names), n_bins)

    def apply(self, X, names: Sequence[str] | None = None) -> "BinnedData":
        """Bin new rows with these cuts; columns must match by name."""
        X, names = _as_matrix(X, names if names is not None else self.names)
        if list(names) != self.names:
            raise ColumnMismatch(f"columns {list(names)} differ from {self.names}")
        binned = np.empty((X.shape[1], X.shape[0]), dtype=np.uint8)
        for f in range(X.shape[1]):
            binned[f] = apply_cuts(np.asarray(X[:, f], dtype=np.float64), self.cuts[f],
                                   self.n_bins)
        return BinnedData(binned, self.cuts, list(self.names), self.n_bins)

    def subset(self, rows: np.ndarray | None = None,
               features: Sequence[int] | None = None) -> "BinnedData":
        b = self.binned
        names, cuts = self.names, self.cuts
        if features is not None:
            features = list(features)
            b = b[features]
            names = [names[i] for i in features]
            cuts = [cuts[i] for i in features]
        if rows is not None:
            b = b[:, rows]
        return BinnedData(np.ascontiguousarray(b), cuts, names, self.n_bins)


def _as_matrix(X, names=None):
    if hasattr(X, "columns") and hasattr(X, "to_numpy"):
        names = list(X.columns) if names is None else list(names)
        X = X.to_numpy(dtype=np.float64)
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    if names is None:
        names = [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ColumnMismatch(f"{len(names)} names for {X.shape[1]} columns")
    return X, list(names)


# ---------------------------------------------------------------------------
# model

@dataclass
class Tree:
    feature: np.ndarray      # -1 marks a leaf
    threshold: np.ndarray    # bin index; left when bin <= threshold
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray        # leaf output (raw, before the learning rate)
    gain: np.ndarray         # split gain at internal nodes

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))


@dataclass
class GbdtModel:
    feature_names: list[str]
    cuts: list[np.ndarray]
    n_bins: int
    base_score: float
    trees: list[Tree] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    feature_gains: np.ndarray | None = None
    degenerate: bool = False
    best_iteration: int | None = None
    valid_scores: list[tuple[int, float]] = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def truncate(self, n_trees: int) -> None:
        self.trees = self.trees[:n_trees]
        self.learning_rates = self.learning_rates[:n_trees]
        gains = np.zeros(len(self.feature_names))
        for t in self.trees:
            inner = t.feature >= 0
            np.add.at(gains, t.feature[inner], t.gain[inner])
        self.feature_gains = gains


def _concat_trees(trees: Sequence[Tree]):
    sizes = [len(t.feature) for t in trees]
    roots = np.zeros(len(trees), dtype=np.int64)
    if trees:
        roots[1:] = np.cumsum(sizes)[:-1]
    shift = np.repeat(roots, sizes)

    def cat(attr, dtype):
        if not trees:
            return np.zeros(0, dtype=dtype)
        return np.concatenate([getattr(t, attr) for t in trees]).astype(dtype)

    left = cat("left", np.int64)
    right = cat("right", np.int64)
    inner = cat("feature", np.int64) >= 0
    left = np.where(inner, left + shift, -1)
    right = np.where(inner, right + shift, -1)
    return (roots, cat("feature", np.int64), cat("threshold", np.int64),
            cat("missing_left", np.bool_), left, right, cat("value", np.float64))


def _forest_raw(binned: np.ndarray, trees: Sequence[Tree], scales: np.ndarray,
                missing_bin: int, out: np.ndarray) -> None:
    if not trees:
        return
    roots, feat, thr, ml, left, right, value = _concat_trees(trees)
    K.predict_forest(binned, roots, np.asarray(scales, dtype=np.float64), feat, thr, ml,
                     left, right, value, missing_bin, out)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_grad_hess(raw: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Gradient and hessian of the weighted logistic loss w.r.t. raw scores."""
    p = _sigmoid(raw)
    return w * (p - y), w * p * (1.0 - p)


def weighted_logloss(raw: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # log(1 + exp(z)) - y z, computed stably
    loss = np.logaddexp(0.0, raw) - y * raw
    return float(np.sum(w * loss) / np.sum(w))


class _Grower:
    """Leaf-wise growth of one tree over a fixed row sample."""

    def __init__(self, data: BinnedData, params: GbdtParams):
        self.data = data
        self.p = params
        self.missing_bin = data.n_bins
        self.n_value_bins = np.array([len(c) + 1 for c in data.cuts], dtype=np.int64)
        self.hist_shape = (data.n_features, data.n_bins + 1, 3)
        self.gains = np.empty(data.n_features)
        self.bins = np.empty(data.n_features, dtype=np.int64)
        self.mleft = np.empty(data.n_features, dtype=np.bool_)

    def _best(self, hist, feats, G, H, C):
        nf = len(feats)
        gains, bins, mleft = self.gains[:nf], self.bins[:nf], self.mleft[:nf]
        K.best_split_per_feature(hist, feats, self.n_value_bins, self.missing_bin, G, H, C,
                                 self.p.reg_lambda, self.p.min_child_weight,
                                 float(self.p.min_child_samples), gains, bins, mleft)
        k = int(np.argmax(gains))  # first maximum keeps the lowest feature index
        if not np.isfinite(gains[k]) or bins[k] < 0:
            return None
        return float(gains[k]), int(feats[k]), int(bins[k]), bool(mleft[k])

    def grow(self, rows: np.ndarray, g: np.ndarray, h: np.ndarray, feats: np.ndarray):
        p = self.p
        binned = self.data.binned
        scratch = np.empty(len(rows), dtype=rows.dtype)
        feature, threshold, mleft_arr = [-1], [0], [False]
        left, right, value, gain = [-1], [-1], [0.0], [0.0]

        G, H = float(g[rows].sum()), float(h[rows].sum())
        root_hist = np.empty(self.hist_shape)
        K.build_histograms(binned, rows, 0, len(rows), g, h, feats, root_hist)
        # leaf: node -> [start, end, G, H, hist, best]
        leaves = {0: [0, len(rows), G, H, root_hist,
                      self._best(root_hist, feats, G, H, float(len(rows)))]}
        while len(leaves) < p.max_leaves:
            cand = [(b[0], node) for node, (_, _, _, _, _, b) in leaves.items()
                    if b is not None and b[0] > p.min_split_gain and b[0] > 0.0]
            if not cand:
                break
            # max gain, ties to the oldest leaf
            best_gain = max(c[0] for c in cand)
            node = min(n for gg, n in cand if gg == best_gain)
            start, end, G, H, hist, (sgain, f, b, ml) = leaves.pop(node)
            mid = K.partition_rows(rows, start, end, binned[f], b, ml, self.missing_bin,
                                   scratch)
            n_left, n_right = mid - start, end - mid
            small_left = n_left <= n_right
            s0, s1 = (start, mid) if small_left else (mid, end)
            small = np.empty(self.hist_shape)
            K.build_histograms(binned, rows, s0, s1, g, h, feats, small)
            large = np.empty(self.hist_shape)
            K.subtract_histograms(hist, small, feats, large)
            hl, hr = (small, large) if small_left else (large, small)
            Gl, Hl = float(g[rows[start:mid]].sum()), float(h[rows[start:mid]].sum())
            Gr, Hr = G - Gl, H - Hl

            li, ri = len(feature), len(feature) + 1
            feature[node], threshold[node], mleft_arr[node] = f, b, ml
            left[node], right[node], gain[node] = li, ri, sgain
            for _ in range(2):
                feature.append(-1)
                threshold.append(0)
                mleft_arr.append(False)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
                gain.append(0.0)
            leaves[li] = [start, mid, Gl, Hl, hl, self._best(hl, feats, Gl, Hl, float(n_left))]
            leaves[ri] = [mid, end, Gr, Hr, hr, self._best(hr, feats, Gr, Hr, float(n_right))]

        lam = p.reg_lambda
        for node, (start, end, G, H, _, _) in leaves.items():
            value[node] = -G / (H + lam)
        tree = Tree(np.array(feature, dtype=np.int32), np.array(threshold, dtype=np.int32),
                    np.array(mleft_arr, dtype=np.bool_), np.array(left, dtype=np.int32),
                    np.array(right, dtype=np.int32), np.array(value, dtype=np.float64),
                    np.array(gain, dtype=np.float64))
        segments = [(v[0], v[1], node) for node, v in leaves.items()]
        return tree, segments


def find_best_split(data: BinnedData, g: np.ndarray, h: np.ndarray,
                    params: GbdtParams | None = None, rows: np.ndarray | None = None):
    """Best single split of ``rows`` (default all) for the given gradients.

    Returns ``(gain, feature, bin, missing_left)`` or None when no split is
    allowed. Left receives bins ``<= bin``.
    """
    params = params or GbdtParams()
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    rows = np.arange(data.n_rows, dtype=np.int64) if rows is None else rows.astype(np.int64)
    feats = np.arange(data.n_features, dtype=np.int64)
    grower = _Grower(data, params)
    hist = np.empty(grower.hist_shape)
    K.build_histograms(data.binned, rows, 0, len(rows), g, h, feats, hist)
    return grower._best(hist, feats, float(g[rows].sum()), float(h[rows].sum()),
                        float(len(rows)))


def fit(X, y, w=None, params: GbdtParams | None = None,
        deadline: Callable[[], bool] | None = None,
        feature_names: Sequence[str] | None = None,
        valid: tuple | None = None, early_stopping_rounds: int | None = None,
        eval_every: int = 1) -> GbdtModel:
    """Train a boosted model.

    ``X`` is a 2-D array/DataFrame or a :class:`BinnedData`. ``deadline`` is
    polled before every round; when it returns True training stops and the
    completed rounds are kept. ``valid=(X_valid, y_valid)`` enables AUC
    tracking every ``eval_every`` rounds and, with ``early_stopping_rounds``,
    truncation to the best round.
    """
    global _fits
    _fits += 1
    params = params or GbdtParams()
    data = X if isinstance(X, BinnedData) else BinnedData.from_matrix(
        X, feature_names, params.n_bins, params.seed)
    if data.n_bins != params.n_bins:
        raise ValueError("BinnedData was built with a different n_bins")
    n = data.n_rows
    y = np.asarray(y, dtype=np.float64)
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64)
    if len(y) != n or len(w) != n:
        raise ValueError("X, y and w must have the same number of rows")
    w = w / w.mean()

    pos_w = float(w[y == 1].sum())
    neg_w = float(w[y == 0].sum())
    prior = pos_w / (pos_w + neg_w)
    prior_c = min(max(prior, _PRIOR_EPS), 1 - _PRIOR_EPS)
    model = GbdtModel(list(data.names), list(data.cuts), data.n_bins,
                      float(np.log(prior_c / (1 - prior_c))),
                      feature_gains=np.zeros(data.n_features))
    if pos_w <= 0 or neg_w <= 0:
        warnings.warn("labels contain a single class; returning the prior", DegenerateLabels)
        model.degenerate = True
        return model

    rates = params.rates()
    rng = np.random.default_rng(params.seed)
    grower = _Grower(data, params)
    raw = np.full(n, model.base_score)
    all_feats = np.arange(data.n_features, dtype=np.int64)
    n_feat_tree = max(1, int(round(params.feature_fraction * data.n_features)))
    n_row_tree = max(1, int(round(params.row_fraction * n)))

    vbinned = vraw = vy = None
    if valid is not None:
        Xv, vy = valid
        vbinned = bin_with_model(model, Xv)
        vy = np.asarray(vy)
        vraw = np.full(vbinned.shape[1], model.base_score)
    best_score, best_round, since_best = -np.inf, 0, 0

    for t in range(params.n_rounds):
        if deadline is not None and deadline():
            log.info("deadline reached after %d rounds", t)
            break
        g, h = logistic_grad_hess(raw, y, w)
        feats = all_feats if n_feat_tree == data.n_features else \
            np.sort(rng.choice(all_feats, size=n_feat_tree, replace=False))
        if n_row_tree == n:
            rows = np.arange(n, dtype=np.int64)
        else:
            rows = np.sort(rng.choice(n, size=n_row_tree, replace=False)).astype(np.int64)
        tree, segments = grower.grow(rows, g, h, feats)
        lr = float(rates[t])
        model.trees.append(tree)
        model.learning_rates.append(lr)
        inner = tree.feature >= 0
        np.add.at(model.feature_gains, tree.feature[inner], tree.gain[inner])
        if n_row_tree == n:
            starts = np.array([s[0] for s in segments], dtype=np.int64)
            ends = np.array([s[1] for s in segments], dtype=np.int64)
            vals = np.array([tree.value[s[2]] for s in segments])
            K.add_leaf_values(rows, starts, ends, vals, lr, raw)
        else:
            _forest_raw(data.binned, [tree], np.array([lr]), data.n_bins, raw)

        if vbinned is not None:
            _forest_raw(vbinned, [tree], np.array([lr]), data.n_bins, vraw)
            if (t + 1) % eval_every == 0 or t + 1 == params.n_rounds:
                score = auc_score(vy, vraw) if 0 < vy.sum() < len(vy) else 0.5
                model.valid_scores.append((t + 1, score))
                if score > best_score:
                    best_score, best_round, since_best = score, t + 1, 0
                else:
                    since_best += eval_every
                if early_stopping_rounds is not None and since_best >= early_stopping_rounds:
                    break
    if vbinned is not None and best_round:
        model.best_iteration = best_round
        if early_stopping_rounds is not None:
            model.truncate(best_round)
    return model


def bin_with_model(model: GbdtModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    if isinstance(X, BinnedData):
        if X.names != model.feature_names:
            raise ColumnMismatch("binned data columns differ from the model's")
        return X.binned
    if feature_names is None and not hasattr(X, "columns"):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != len(model.feature_names):
            raise ColumnMismatch(
                f"expected {len(model.feature_names)} columns, got {X.shape}")
        names = model.feature_names
    else:
        X, names = _as_matrix(X, feature_names)
    if list(names) != list(model.feature_names):
        raise ColumnMismatch(f"columns {list(names)} differ from {model.feature_names}")
    binned = np.empty((X.shape[1], X.shape[0]), dtype=np.uint8)
    for f in range(X.shape[1]):
        binned[f] = apply_cuts(np.asarray(X[:, f], dtype=np.float64), model.cuts[f],
                               model.n_bins)
    return binned


def predict_raw(model: GbdtModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    binned = bin_with_model(model, X, feature_names)
    out = np.full(binned.shape[1], model.base_score)
    _forest_raw(binned, model.trees, np.asarray(model.learning_rates), model.n_bins, out)
    return out


def predict(model: GbdtModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    return _sigmoid(predict_raw(model, X, feature_names))


def feature_gains(model: GbdtModel) -> dict[str, float]:
    gains = model.feature_gains if model.feature_gains is not None \
        else np.zeros(len(model.feature_names))
    return {name: float(g) for name, g in zip(model.feature_names, gains)}


# ---------------------------------------------------------------------------
# serialization

def _tolist(a):
    return [float(x) for x in a] if a.dtype.kind == "f" else [int(x) for x in a]


def dumps(model: GbdtModel) -> str:
    doc = {
        "format": "autosmart-gbdt",
        "version": FORMAT_VERSION,
        "feature_names": model.feature_names,
        "n_bins": model.n_bins,
        "base_score": model.base_score,
        "degenerate": model.degenerate,
        "best_iteration": model.best_iteration,
        "cuts": [_tolist(c) for c in model.cuts],
        "learning_rates": list(model.learning_rates),
        "feature_gains": _tolist(model.feature_gains),
        "trees": [
            {k: _tolist(getattr(t, k).astype(np.int64 if k == "missing_left" else getattr(t, k).dtype))
             for k in ("feature", "threshold", "missing_left", "left", "right", "value", "gain")}
            for t in model.trees
        ],
    }
    return json.dumps(doc)


def loads(text: str) -> GbdtModel:
    doc = json.loads(text)
    if doc.get("format") != "autosmart-gbdt" or doc.get("version") != FORMAT_VERSION:
        raise ValueError("unsupported model format")
    trees = [Tree(np.array(t["feature"], dtype=np.int32), np.array(t["threshold"], dtype=np.int32),
                  np.array(t["missing_left"], dtype=np.bool_), np.array(t["left"], dtype=np.int32),
                  np.array(t["right"], dtype=np.int32), np.array(t["value"], dtype=np.float64),
                  np.array(t["gain"], dtype=np.float64))
             for t in doc["trees"]]
    return GbdtModel(doc["feature_names"], [np.array(c, dtype=np.float64) for c in doc["cuts"]],
                     doc["n_bins"], doc["base_score"], trees, list(doc["learning_rates"]),
                     np.array(doc["feature_gains"], dtype=np.float64), doc["degenerate"],
                     doc["best_iteration"])
