"""End-to-end train-and-predict run under a time budget."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import gbdt, tuner
from .controller import BudgetExhausted, BudgetTracker, MemoryEstimate, max_rows_for_memory
from .data_model import DatasetBundle, FeatureFrame, concat_tables, validate_bundle
from .feateng import SelectionReport, numeric_values, run_feature_pipeline, selection_sample
from .ingest import DatasetInfo, load_dataset, main_time_column, read_table
from .merge import merge_all, plan_merge
from .preprocess import preprocess_bundle

log = logging.getLogger(__name__)

PROB_EPS = 1e-6
PROBE_MAX_ROUNDS = 1000
PROBE_PATIENCE = 30
LR_SAMPLE = 50_000


@dataclass
class PipelineConfig:
    seed: int = 0
    lr_grid: tuple = tuner.LR_GRID
    ensemble: tuner.EnsembleConfig = field(default_factory=tuner.EnsembleConfig)
    base_params: gbdt.GbdtParams = field(default_factory=gbdt.GbdtParams)
    # seconds held back for prediction and output, as a share of the budget
    predict_reserve: float = 0.04


@dataclass
class PipelineResult:
    predictions: np.ndarray
    n_models: int = 0
    fallback: str | None = None
    learning_rate: float | None = None
    n_rounds: int | None = None
    feature_names: list[str] = field(default_factory=list)
    reports: list[SelectionReport] = field(default_factory=list)
    skipped_stages: list[str] = field(default_factory=list)


def set_workers(workers: int | None) -> int:
    """Clamp the compiled-kernel thread count to what this process allows."""
    import numba

    avail = numba.config.NUMBA_NUM_THREADS
    n = avail if workers is None else max(1, min(int(workers), avail))
    numba.set_num_threads(n)
    return n


def load_train_test(info: DatasetInfo, train_dir, test_dir):
    """One bundle whose main table is train rows followed by test rows,
    plus the training labels and both row counts."""
    train = load_dataset(train_dir, info)
    if train.labels is None:
        raise FileNotFoundError(f"no labels found in {train_dir}")
    validate_bundle(train)
    m = info.main
    test_main = read_table(Path(test_dir) / m.path, m.name, m.columns)
    n_train, n_test = train.main.n_rows, test_main.n_rows
    combined = DatasetBundle(concat_tables(train.main, test_main), train.related,
                             train.relations, None, train.time_budget_s, train.mem_budget_bytes)
    return combined, train.labels, n_train, n_test


def clip_probabilities(p: np.ndarray) -> np.ndarray:
    return np.clip(np.nan_to_num(p, nan=0.5), PROB_EPS, 1 - PROB_EPS)


def format_predictions(p: np.ndarray) -> str:
    return "".join(f"{v:.6g}\n" for v in clip_probabilities(p))


def _prior(y: np.ndarray) -> float:
    return float(np.clip(np.mean(y), PROB_EPS, 1 - PROB_EPS)) if len(y) else 0.5


def _block_names(pre) -> dict[str, int]:
    main = pre.bundle.main.name
    out = {}
    for idx, b in pre.blocks.block_of().items():
        t, c = pre.column_ids[idx]
        out[c if t == main else f"{t}.{c}"] = b
    return out


def _memory_rows(frame: FeatureFrame, budget_bytes: float, n_test: int,
                 is_train: np.ndarray) -> np.ndarray | None:
    """Rows to keep when the frame would not fit; None when everything fits."""
    est = MemoryEstimate.for_frame(frame, budget_bytes)
    cap = max_rows_for_memory(est)
    if cap >= frame.n_rows:
        return None
    train_rows = np.flatnonzero(is_train)
    keep_train = max(1, cap - n_test)
    log.warning("memory estimate allows %d rows; keeping the latest %d training rows",
                cap, keep_train)
    return np.sort(np.concatenate([train_rows[-keep_train:], np.flatnonzero(~is_train)]))


def _matrix(frame: FeatureFrame, rows: np.ndarray) -> np.ndarray:
    X = np.empty((len(rows), len(frame.names)), dtype=np.float32)
    for j, name in enumerate(frame.names):
        X[:, j] = numeric_values(frame[name], rows)
    return X


def run_pipeline(info: DatasetInfo, train_dir, test_dir, tracker: BudgetTracker,
                 config: PipelineConfig | None = None) -> PipelineResult:
    """Predict the test main table; never raises BudgetExhausted.

    When the budget runs out before a model exists, every row gets the
    training prior; afterwards, whatever ensemble exists is used.
    """
    config = config or PipelineConfig()
    state: dict = {"prior": 0.5, "n_test": None}
    try:
        return _run(info, train_dir, test_dir, tracker, config, state)
    except BudgetExhausted as exc:
        log.warning("%s; falling back", exc)
        n_test = state["n_test"]
        if n_test is None:
            m = info.main
            n_test = read_table(Path(test_dir) / m.path, m.name, m.columns).n_rows
        if state.get("models"):
            preds = _predict(state["models"], state["test_binned"], state["test_pos"], n_test)
            return PipelineResult(preds, len(state["models"]), "partial-ensemble")
        return PipelineResult(np.full(n_test, state["prior"]), 0, "prior")


def _predict(models, test_binned, test_pos, n_test) -> np.ndarray:
    p = tuner.predict_ensemble(models, test_binned)
    out = np.empty(n_test)
    out[test_pos] = p
    return out


@dataclass
class Prepared:
    """Binned training and test matrices ready for model fitting."""

    data: gbdt.BinnedData | None
    y: np.ndarray
    w: np.ndarray
    test_binned: gbdt.BinnedData | None
    test_pos: np.ndarray
    n_test: int
    prior: float
    result: PipelineResult


def prepare_training_data(info: DatasetInfo, train_dir, test_dir, tracker: BudgetTracker,
                          config: PipelineConfig | None = None,
                          state: dict | None = None) -> Prepared:
    """Ingest, preprocess, merge, engineer features, rebalance and bin.

    ``data`` is None when no model can be trained (no features or a single
    label class); the caller then predicts the prior.
    """
    config = config or PipelineConfig()
    state = {} if state is None else state
    seed = config.seed
    tracker.checkpoint("ingest")
    bundle, labels, n_train, n_test = load_train_test(info, train_dir, test_dir)
    state["n_test"] = n_test
    state["prior"] = prior = _prior(labels)

    tracker.checkpoint("preprocess")
    pre = preprocess_bundle(bundle, seed=seed)
    order = pre.main_order  # sorted position -> combined row
    is_train = order < n_train
    y_sorted = np.asarray(labels)[order[is_train]]

    tracker.checkpoint("merge")
    frame = merge_all(pre.bundle, plan_merge(pre.bundle))
    tracker.note_memory(frame.nbytes_estimate())
    keep = _memory_rows(frame, bundle.mem_budget_bytes, n_test, is_train)
    if keep is not None:
        frame = FeatureFrame.from_table(frame.to_table().take(keep))
        order, is_train = order[keep], is_train[keep]
        y_sorted = np.asarray(labels)[order[is_train]]

    time_col = main_time_column(pre.bundle.main)
    fe = run_feature_pipeline(frame, pre.base, y_sorted, is_train, tracker, time_col,
                              _block_names(pre), pre.bundle.main.name, seed)
    frame = fe.frame
    result = PipelineResult(np.empty(0), reports=fe.reports, skipped_stages=fe.skipped,
                            feature_names=list(frame.names))

    test_pos = order[~is_train] - n_train
    state["test_pos"] = test_pos
    if not frame.names or len(np.unique(y_sorted)) < 2:
        return Prepared(None, y_sorted, np.ones(len(y_sorted)), None, test_pos, n_test, prior,
                        result)

    tracker.checkpoint("bin")
    train_rows, test_rows = np.flatnonzero(is_train), np.flatnonzero(~is_train)
    rows, w = tuner.rebalance(y_sorted, seed=seed)
    data = gbdt.BinnedData.from_matrix(_matrix(frame, train_rows[rows]), frame.names,
                                       config.base_params.n_bins, seed)
    test_binned = data.apply(_matrix(frame, test_rows))
    state["test_binned"] = test_binned
    return Prepared(data, y_sorted[rows], w, test_binned, test_pos, n_test, prior, result)


def _run(info, train_dir, test_dir, tracker, config, state) -> PipelineResult:
    seed = config.seed
    prep = prepare_training_data(info, train_dir, test_dir, tracker, config, state)
    result = prep.result
    if prep.data is None:
        result.predictions = np.full(prep.n_test, prep.prior)
        result.fallback = "prior"
        return result
    data, y, w, test_binned = prep.data, prep.y, prep.w, prep.test_binned
    test_pos, n_test = prep.test_pos, prep.n_test
    reserve_s = config.predict_reserve * tracker.time_budget_s + 1.0

    tracker.checkpoint("hpo.round_time")
    params = replace(config.base_params, seed=seed)
    est = tuner.estimate_round_time(data, y, w, params)

    tracker.checkpoint("hpo.learning_rate")
    n_sample = min(LR_SAMPLE, len(y))
    lr = 0.1
    lr_cost = len(config.lr_grid) * est.predict(50) * n_sample / len(y)
    if tracker.can_afford(lr_cost, 0.5, what="learning-rate search"):
        sample = selection_sample(y, n_sample, seed)
        lr = tuner.search_learning_rate(data.subset(rows=sample), y[sample], w[sample],
                                        config.lr_grid, 50, params,
                                        deadline=tracker.deadline(reserve_s))

    tracker.checkpoint("hpo.rounds")
    planned = tuner.plan_boost_rounds(est, max(tracker.remaining() - reserve_s, 1e-3))
    n_probe = min(planned, PROBE_MAX_ROUNDS)
    cap = n_probe
    if tracker.can_afford(est.predict(n_probe) * 0.8, 0.5, what="round-count probe"):
        cut = int(len(y) * 0.8)
        if 0 < y[:cut].sum() < cut and 0 < y[cut:].sum() < len(y) - cut:
            probe = gbdt.fit(data.subset(rows=np.arange(cut)), y[:cut], w[:cut],
                             replace(params, n_rounds=n_probe,
                                     learning_rates=tuner.decay_schedule(lr, n_probe)),
                             deadline=tracker.deadline(reserve_s),
                             valid=(data.subset(rows=np.arange(cut, len(y))), y[cut:]),
                             early_stopping_rounds=PROBE_PATIENCE, eval_every=5)
            if probe.best_iteration:
                cap = max(tuner.MIN_ROUNDS, math.ceil(1.25 * probe.best_iteration))

    tracker.checkpoint("train")
    n_rounds = min(cap, tuner.plan_boost_rounds(est, max(tracker.remaining() - reserve_s,
                                                          1e-3)))
    params = replace(params, n_rounds=n_rounds,
                     learning_rates=tuner.decay_schedule(lr, n_rounds))
    models: list = []
    state["models"] = models
    members = tuner.fit_ensemble(data, y, w, params, tracker, config.ensemble, seed,
                                 reserve_s=reserve_s)
    models.extend(members)

    tracker.checkpoint("predict")
    result.predictions = _predict(models, test_binned, test_pos, n_test)
    result.n_models = len(models)
    result.learning_rate = lr
    result.n_rounds = n_rounds
    return result


def env_mem_bytes(default: int) -> int:
    mb = os.environ.get("AUTOSMART_MEM_MB")
    return int(float(mb) * 1024 * 1024) if mb else default
