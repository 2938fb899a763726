"""Round planning, learning-rate search, decay, rebalancing and bagging."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import gbdt
from .controller import BudgetTracker
from .evaluation import auc

log = logging.getLogger(__name__)

LR_GRID = (0.3, 0.1, 0.05, 0.02)
MIN_ROUNDS, MAX_ROUNDS = 15, 5000


class NonPositiveSlope(ValueError):
    pass


class SingleClassWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RoundTimeEstimate:
    prep_s: float
    per_round_s: float

    def predict(self, rounds: int) -> float:
        return self.prep_s + rounds * self.per_round_s


def round_time_from_trials(r0: int, t_r0: float, t_2r0: float) -> RoundTimeEstimate:
    """Line through ``(r0, t_r0)`` and ``(2 r0, t_2r0)``."""
    if t_2r0 <= t_r0:
        raise NonPositiveSlope(f"t({2 * r0})={t_2r0} <= t({r0})={t_r0}")
    per_round = (t_2r0 - t_r0) / r0
    return RoundTimeEstimate(max(0.0, t_r0 - r0 * per_round), per_round)


def _fallback_estimate(r0: int, t_2r0: float) -> RoundTimeEstimate:
    return RoundTimeEstimate(0.0, max(t_2r0, 1e-9) / (2 * r0))


def estimate_round_time(data: gbdt.BinnedData, y, w, params: gbdt.GbdtParams, r0: int = 15,
                        clock: Callable[[], float] = time.perf_counter,
                        repeats: int = 3) -> RoundTimeEstimate:
    """Time fits of ``r0`` and ``2 r0`` rounds and fit the linear cost model.

    Each trial length is timed ``repeats`` times, interleaved, and the
    fastest reading is kept: timer noise only ever adds time.
    """
    if r0 < 1 or repeats < 1:
        raise ValueError("r0 and repeats must be >= 1")
    # an untimed r0 fit so compilation, caches and page faults stay out of the trials
    gbdt.fit(data, y, w, replace(params, n_rounds=r0))

    def timed(rounds):
        t0 = clock()
        gbdt.fit(data, y, w, replace(params, n_rounds=rounds))
        return clock() - t0

    t1, t2 = None, None
    for _ in range(2):
        pairs = [(timed(r0), timed(2 * r0)) for _ in range(repeats)]
        t1 = min(p[0] for p in pairs)
        t2 = min(p[1] for p in pairs)
        try:
            return round_time_from_trials(r0, t1, t2)
        except NonPositiveSlope:
            log.info("round-time trials gave a non-positive slope; retrying")
    return _fallback_estimate(r0, t2)


def plan_boost_rounds(est: RoundTimeEstimate, remaining_s: float,
                      reserve_frac: float = 0.2) -> int:
    usable = remaining_s * (1.0 - reserve_frac) - est.prep_s
    if est.per_round_s <= 0:
        return MAX_ROUNDS
    rounds = math.floor(usable / est.per_round_s + 1e-9)
    return int(min(MAX_ROUNDS, max(MIN_ROUNDS, rounds)))


def search_learning_rate(data: gbdt.BinnedData, y, w=None, grid: Sequence[float] = LR_GRID,
                         rounds: int = 50, params: gbdt.GbdtParams | None = None,
                         deadline: Callable[[], bool] | None = None) -> float:
    """Best validation-AUC learning rate; rows must already be in time order.

    The first 80% of rows train, the last 20% validate. Ties go to the larger
    rate. Grid points not reached before ``deadline`` are skipped.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty learning-rate grid")
    if len(grid) == 1:
        return float(grid[0])
    params = params or gbdt.GbdtParams()
    y = np.asarray(y)
    w = np.ones(len(y)) if w is None else np.asarray(w)
    n = len(y)
    cut = int(n * 0.8)
    tr, va = np.arange(cut), np.arange(cut, n)
    if len(np.unique(y[tr])) < 2 or len(np.unique(y[va])) < 2:
        return float(max(grid))
    dtr, dva = data.subset(rows=tr), data.subset(rows=va)
    best_lr, best_auc = None, -np.inf
    for lr in sorted(grid, reverse=True):
        if best_lr is not None and deadline is not None and deadline():
            break
        model = gbdt.fit(dtr, y[tr], w[tr], replace(params, n_rounds=rounds, learning_rates=lr))
        score = auc(y[va], gbdt.predict_raw(model, dva))
        log.debug("lr %.3g -> validation auc %.5f", lr, score)
        if score > best_auc:
            best_lr, best_auc = lr, score
    return float(best_lr)


def decay_schedule(lr0: float, n_rounds: int, gamma: float = 0.8, steps: int = 10,
                   floor_frac: float = 0.01) -> np.ndarray:
    if lr0 <= 0 or n_rounds < 1:
        raise ValueError("need lr0 > 0 and n_rounds >= 1")
    s = max(1, math.ceil(n_rounds / steps))
    t = np.arange(n_rounds)
    return np.maximum(floor_frac * lr0, lr0 * gamma ** (t // s))


def rebalance(y, w=None, ratio: float = 1 / 3, seed: int = 0):
    """Under-sample the majority class down to ``1/ratio`` times the minority.

    Returns ``(rows, weights)``; kept majority rows carry the compensating
    weight so each class keeps its original total weight.
    """
    y = np.asarray(y)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=np.float64)
    rows = np.arange(len(y))
    pos, neg = rows[y == 1], rows[y != 1]
    if len(pos) == 0 or len(neg) == 0:
        warnings.warn("single-class labels; rebalancing skipped", SingleClassWarning)
        return rows, w.copy()
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    if len(minority) / len(majority) >= ratio:
        return rows, w.copy()
    n_keep = int(round(len(minority) / ratio))
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(majority, size=n_keep, replace=False))
    out_rows = np.sort(np.concatenate([minority, kept]))
    new_w = w.copy()
    new_w[kept] *= w[majority].sum() / w[kept].sum()
    return out_rows, new_w[out_rows]


# ---------------------------------------------------------------------------
# bagging

@dataclass
class EnsembleConfig:
    max_models: int = 10
    row_fraction: float = 0.9
    feature_fraction: float = 0.8
    reserve: float = 0.1


def fit_ensemble(data: gbdt.BinnedData, y, w, params: gbdt.GbdtParams,
                 tracker: BudgetTracker | None = None, config: EnsembleConfig | None = None,
                 seed: int = 0, clock: Callable[[], float] = time.perf_counter,
                 reserve_s: float = 0.0) -> list[gbdt.GbdtModel]:
    """Train bagged members until the cap or until another would not fit.

    Each member sees a row subsample and a feature subsample drawn from its
    own seed. The first member always trains; it stops early (keeping its
    finished rounds) when the tracker leaves only ``reserve_s`` seconds.
    """
    config = config or EnsembleConfig()
    y = np.asarray(y)
    w = np.asarray(w, dtype=np.float64)
    n, f = data.n_rows, data.n_features
    n_rows = max(1, int(round(config.row_fraction * n)))
    n_feats = max(1, int(round(config.feature_fraction * f)))
    deadline = tracker.deadline(reserve_s) if tracker is not None else None
    models: list[gbdt.GbdtModel] = []
    cost = None
    for k in range(config.max_models):
        if k and tracker is not None and not tracker.can_afford(
                cost, config.reserve, what=f"ensemble member {k + 1}"):
            break
        rng = np.random.default_rng([seed, k])
        rows = np.sort(rng.choice(n, size=n_rows, replace=False))
        if len(np.unique(y[rows])) < 2:
            rows = np.arange(n)
        feats = np.sort(rng.choice(f, size=n_feats, replace=False))
        sub = data.subset(rows=rows, features=feats)
        t0 = clock()
        model = gbdt.fit(sub, y[rows], w[rows], replace(params, seed=seed * 1000 + k),
                         deadline=deadline)
        elapsed = clock() - t0
        cost = elapsed if cost is None else max(cost, elapsed)
        models.append(model)
        if model.n_rounds < params.n_rounds:
            break  # the deadline cut this member short
    return models


def predict_ensemble(models: Sequence[gbdt.GbdtModel], data) -> np.ndarray:
    """Mean member probability. ``data`` is a BinnedData holding every
    column any member uses, or a ``(X, names)`` pair."""
    if not models:
        raise ValueError("empty ensemble")
    acc = np.zeros(_n_rows(data))
    for m in models:
        acc += gbdt.predict(m, _columns_for(data, m.feature_names))
    return acc / len(models)


def _n_rows(data) -> int:
    if isinstance(data, gbdt.BinnedData):
        return data.n_rows
    return np.asarray(data[0]).shape[0]


def _columns_for(data, names: list[str]):
    if isinstance(data, gbdt.BinnedData):
        index = {n: i for i, n in enumerate(data.names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise gbdt.ColumnMismatch(f"columns {missing} not available")
        return data.subset(features=[index[n] for n in names])
    X, all_names = data
    index = {n: i for i, n in enumerate(all_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise gbdt.ColumnMismatch(f"columns {missing} not available")
    return np.asarray(X)[:, [index[n] for n in names]]
