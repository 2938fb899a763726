import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autosmart.evaluation import (
    DegenerateDenominator,
    EmptyList,
    EvaluationRecord,
    SingleClass,
    auc,
    average_score,
    competition_score,
)


def pairwise_auc(labels, scores):
    """O(n^2) reference: P(s+ > s-) + 0.5 P(s+ = s-)."""
    labels = np.asarray(labels)
    pos = np.asarray(scores)[labels == 1]
    neg = np.asarray(scores)[labels == 0]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize("labels, scores, expected", [
    ([0, 1], [0.2, 0.8], 1.0),
    ([0, 1], [0.8, 0.2], 0.0),
    ([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8], 0.75),
    ([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5], 0.5),
])
def test_auc_examples(labels, scores, expected):
    assert auc(labels, scores) == pytest.approx(expected, abs=1e-15)


def test_auc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 501))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 20, size=n) / 7.0  # coarse grid forces ties
        assert abs(auc(y, s) - pairwise_auc(y, s)) <= 1e-12


def test_auc_single_class():
    with pytest.raises(SingleClass):
        auc([1, 1, 1], [0.1, 0.2, 0.3])


def test_auc_shape_mismatch():
    with pytest.raises(ValueError):
        auc([0, 1], [0.1, 0.2, 0.3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(-1000, 1000)), min_size=2, max_size=60))
def test_auc_monotone_invariance(pairs):
    y = np.array([p[0] for p in pairs])
    s = np.array([p[1] for p in pairs], dtype=np.float64) / 8  # exact in binary
    if y.min() == y.max():
        return
    a = auc(y, s)
    assert auc(y, s ** 3 + 5 * s) == pytest.approx(a, abs=1e-12)
    if len(np.unique(s)) == len(s):
        assert a + auc(y, -s) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("a, base, top, expected", [
    (0.9, 0.6, 0.9, 1.0),
    (0.6, 0.6, 0.9, 0.0),
    (0.8, 0.6, 0.9, 2 / 3),
    (0.5, 0.6, 0.9, -1 / 3),
])
def test_competition_score(a, base, top, expected):
    assert competition_score(a, base, top) == pytest.approx(expected, abs=1e-12)


def test_competition_score_degenerate():
    with pytest.raises(DegenerateDenominator):
        competition_score(0.7, 0.7, 0.7)


@pytest.mark.parametrize("scores, expected", [
    ([1, 1, 1, 1, 1], 1.0),
    ([1.0, 1.0, 1.0, 0.9871, 1.0], 0.9974),
    ([1.0, 1.0, 1.0, 0.9287, 0.6255], 0.9108),
])
def test_average_score(scores, expected):
    assert average_score(scores) == pytest.approx(expected, abs=1e-4)


def test_average_score_empty():
    with pytest.raises(EmptyList):
        average_score([])


def test_record_format():
    rec = EvaluationRecord(0.8, 0.6, 0.9)
    assert rec.score == pytest.approx(2 / 3)
    assert rec.format().splitlines() == ["auc\t0.800000", "score\t0.6667"]
    assert EvaluationRecord(0.8).score is None
