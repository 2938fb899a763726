import numpy as np
import pytest

from autosmart import pipeline
from autosmart.controller import BudgetTracker
from autosmart.ingest import SyntheticSpec, generate_synthetic, read_labels, write_train_test
from autosmart.pipeline import PipelineConfig, format_predictions, run_pipeline


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    info = write_train_test(generate_synthetic(SyntheticSpec(main_rows=2000, n_related=2), 2),
                            root, 0.25)
    return root, info


def test_phases_and_affordability_queries(bundle_dir):
    root, info = bundle_dir
    tracker = BudgetTracker(1e6)
    res = run_pipeline(info, root / "train", root / "test", tracker, PipelineConfig(seed=1))
    assert res.fallback is None
    assert [p.name for p in tracker.phases] == [
        "ingest", "preprocess", "merge", "fe.order1", "fe.order2", "fe.temporal", "fe.encode",
        "bin", "hpo.round_time", "hpo.learning_rate", "hpo.rounds", "train", "predict"]
    asked = [q[0] for q in tracker.queries]
    for what in ("feature stage order1", "feature stage order2", "feature stage temporal",
                 "learning-rate search", "round-count probe", "ensemble member 2"):
        assert what in asked
    assert res.n_models == 10
    labels = read_labels(root / "test_labels.tsv")
    assert len(res.predictions) == len(labels)
    assert np.all((res.predictions > 0) & (res.predictions < 1))


class TickClock:
    """Advances one second on every reading."""

    def __init__(self):
        self.t = 0.0

    def __call__(self):
        self.t += 1.0
        return self.t


def test_exhausted_budget_falls_back_to_prior(bundle_dir):
    root, info = bundle_dir
    tracker = BudgetTracker(2.5, clock=TickClock(), start=0.0)
    res = run_pipeline(info, root / "train", root / "test", tracker)
    y = read_labels(root / "train" / "labels.tsv")
    assert res.fallback == "prior" and res.n_models == 0
    assert len(res.predictions) == len(read_labels(root / "test_labels.tsv"))
    np.testing.assert_allclose(res.predictions, y.mean())


def test_format_predictions():
    text = format_predictions(np.array([0.123456789, 0.0, 1.0, np.nan]))
    assert text.splitlines() == ["0.123457", "1e-06", "0.999999", "0.5"]
    assert text.endswith("\n")


def test_set_workers_is_clamped():
    import numba

    avail = numba.config.NUMBA_NUM_THREADS
    assert pipeline.set_workers(10_000) == avail
    assert pipeline.set_workers(0) == 1
    assert pipeline.set_workers(None) == avail


def test_memory_override(monkeypatch):
    monkeypatch.setenv("AUTOSMART_MEM_MB", "512")
    assert pipeline.env_mem_bytes(1) == 512 * 1024 * 1024
    monkeypatch.delenv("AUTOSMART_MEM_MB")
    assert pipeline.env_mem_bytes(7) == 7
