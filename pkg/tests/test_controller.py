import numpy as np
import pytest

from autosmart.controller import (
    BudgetExhausted,
    BudgetTracker,
    MemoryEstimate,
    feature_cap,
    max_rows_for_memory,
)
from autosmart.data_model import ColumnData, FeatureFrame, FeatureKind, column_width


class FakeClock:
    def __init__(self, t=0.0):
        self.t = t

    def __call__(self):
        return self.t


def test_checkpoint_returns_remaining():
    clock = FakeClock()
    tr = BudgetTracker(300, clock=clock)
    clock.t = 100
    assert tr.checkpoint("fe") == pytest.approx(200)


def test_checkpoint_raises_when_spent():
    clock = FakeClock()
    tr = BudgetTracker(300, clock=clock)
    clock.t = 301
    with pytest.raises(BudgetExhausted):
        tr.checkpoint("train")


def test_phase_log_order_and_dump(tmp_path):
    clock = FakeClock()
    tr = BudgetTracker(60, clock=clock)
    for i, name in enumerate(["ingest", "merge", "fe", "train"]):
        clock.t = 5 * i
        tr.checkpoint(name)
    clock.t = 30
    tr.note_memory(1234)
    tr.dump_phases(tmp_path / "p.tsv")
    assert [p.name for p in tr.phases] == ["ingest", "merge", "fe", "train"]
    assert [p.end_s for p in tr.phases] == [5, 10, 15, 30]
    lines = (tmp_path / "p.tsv").read_text().splitlines()
    assert lines[0] == "phase\tstart_s\tend_s\test_peak_bytes"
    assert lines[-1] == "train\t15.000\t30.000\t1234"


def test_start_may_precede_construction():
    clock = FakeClock(50.0)
    tr = BudgetTracker(100, clock=clock, start=10.0)
    assert tr.remaining() == pytest.approx(60)


@pytest.mark.parametrize("cost, expected", [(50, True), (90, False), (0, True)])
def test_can_afford(cost, expected):
    clock = FakeClock()
    tr = BudgetTracker(100, clock=clock)
    assert tr.can_afford(cost, 0.2, what="x") is expected
    assert tr.queries[-1] == ("x", cost, 100, expected)


def test_deadline_handle():
    clock = FakeClock()
    tr = BudgetTracker(10, clock=clock)
    d = tr.deadline(reserve_s=2)
    clock.t = 7.9
    assert not d()
    clock.t = 8.0
    assert d()


@pytest.mark.parametrize("headroom, bpr, mult, expected", [
    (3 * 1024 ** 3, 100, 3, 10_737_418),
    (0, 100, 3, 0),
    (1000, 10, 1, 100),
])
def test_max_rows_for_memory(headroom, bpr, mult, expected):
    assert max_rows_for_memory(MemoryEstimate(bpr, 0, headroom), mult) == expected


def test_doubling_multiplier_halves_cap():
    est = MemoryEstimate(37.0, 0, 10 ** 9 + 7)
    a = max_rows_for_memory(est, 2)
    b = max_rows_for_memory(est, 4)
    assert b == a // 2


def test_bad_memory_inputs():
    with pytest.raises(ValueError):
        max_rows_for_memory(MemoryEstimate(0, 0, 100))
    with pytest.raises(ValueError):
        max_rows_for_memory(MemoryEstimate(1, 0, 100), 0.5)


def test_frame_bytes_grow_by_column_width():
    n = 1000
    frame = FeatureFrame({}, {}, n)
    frame.add(ColumnData("a", FeatureKind.NUMERICAL, np.zeros(n, np.float32), np.zeros(n, bool)),
              "original")
    before = frame.nbytes_estimate()
    offsets = np.arange(0, 4 * n + 1, 4)
    multi = ColumnData("m", FeatureKind.MULTI_CATEGORICAL, np.zeros(4 * n, np.uint16),
                       np.zeros(n, bool), offsets)
    frame.add(multi, "original")
    assert column_width(multi) == pytest.approx(4 * 4 + 8 + 0.125)
    assert frame.nbytes_estimate() - before == pytest.approx(column_width(multi) * n)
    est = MemoryEstimate.for_frame(frame, 10 ** 6)
    assert est.bytes_per_row == pytest.approx(4.125 + 24.125)
    assert est.headroom_bytes == pytest.approx(10 ** 6 - frame.nbytes_estimate())


def test_feature_cap_shrinks_with_rows():
    caps = [feature_cap(n) for n in (10_000, 100_000, 400_000, 10 ** 8)]
    assert caps[0] == caps[1]
    assert caps == sorted(caps, reverse=True)
    assert caps[-1] >= 10
