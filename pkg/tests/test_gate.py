import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shipgate.exceptions import InvalidInputError
from shipgate.gate import (
    GateResult, classify_metrics, confusion, flagged_fraction, gate_results, sweep_thresholds,
    sweep_to_csv,
)


def naive_counts(scores, labels, t):
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        flagged = s >= t
        tp += flagged and y == 1
        fp += flagged and y == 0
        tn += (not flagged) and y == 0
        fn += (not flagged) and y == 1
    return tp, fp, tn, fn


def test_perfect_scores():
    labels = [1, 0, 1, 1, 0]
    m = classify_metrics([float(y) for y in labels], labels, 0.5)
    assert m["accuracy"] == m["recall"] == m["precision"] == 1.0


def test_all_flagged_degenerate():
    labels = [1] * 221 + [0] * 779
    m = classify_metrics([0.9] * 1000, labels, 0.5)
    assert m["precision"] == pytest.approx(0.221)
    assert m["recall"] == 1.0


def test_handcrafted_ten_samples():
    scores = [0.95, 0.80, 0.70, 0.60, 0.55, 0.40, 0.30, 0.20, 0.10, 0.05]
    labels = [1, 1, 0, 1, 0, 1, 0, 0, 1, 0]
    # at 0.5: flagged = first five -> tp 3 (0.95, 0.80, 0.60), fp 2; unflagged: fn 2 (0.40, 0.10), tn 3
    m = classify_metrics(scores, labels, 0.5)
    c = m["counts"]
    assert (c.tp, c.fp, c.tn, c.fn) == (3, 2, 3, 2)
    assert m["accuracy"] == pytest.approx(6 / 10)
    assert m["recall"] == pytest.approx(3 / 5)
    assert m["precision"] == pytest.approx(3 / 5)
    # at 0.1: flagged = first nine -> tp 5, fp 4, tn 1, fn 0
    c = classify_metrics(scores, labels, 0.1)["counts"]
    assert (c.tp, c.fp, c.tn, c.fn) == (5, 4, 1, 0)


def test_tie_counts_as_positive():
    assert GateResult("a", 0.5, 0.5).decision
    assert confusion([0.5], [1], 0.5).tp == 1


def test_precision_without_flags_is_one():
    assert classify_metrics([0.1, 0.2], [1, 0], 0.9)["precision"] == 1.0


@pytest.mark.parametrize("scores,labels", [([], []), ([0.5], [2]), ([1.5], [1])])
def test_invalid_inputs(scores, labels):
    with pytest.raises(InvalidInputError):
        classify_metrics(scores, labels)


def test_sweep_single_positive():
    curve = sweep_thresholds([0.9], [1])
    assert [t for t, _, _ in curve] == [0.0, 0.9, 1.0]
    for t, r, _ in curve:
        assert r == (1.0 if t <= 0.9 else 0.0)


def test_sweep_matches_naive_recount_and_is_monotone():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = 200
        labels = (rng.random(n) < 0.3).astype(int)
        scores = np.round(rng.random(n), 2)
        curve = sweep_thresholds(scores, labels)
        thresholds = sorted(set(scores.tolist()) | {0.0, 1.0})
        assert [t for t, _, _ in curve] == thresholds
        for t, r, p in curve:
            tp, fp, _, fn = naive_counts(scores, labels, t)
            assert r == pytest.approx(tp / (tp + fn))
            assert p == pytest.approx(tp / (tp + fp) if tp + fp else 1.0)
        recalls = [r for _, r, _ in curve]
        assert all(b <= a for a, b in zip(recalls, recalls[1:]))


def test_sweep_entry_equals_classify_metrics():
    rng = np.random.default_rng(1)
    scores, labels = rng.random(50), (rng.random(50) < 0.5).astype(int)
    for t, r, p in sweep_thresholds(scores, labels):
        m = classify_metrics(scores, labels, t)
        assert (r, p) == (m["recall"], m["precision"])


def _prevalence_shaped_scores(rng, n=5000, prevalence=0.221):
    labels = (rng.random(n) < prevalence).astype(int)
    scores = np.where(labels == 1, rng.beta(8, 1.2, n), rng.beta(1.0, 12, n))
    return scores, labels


def test_lowering_threshold_never_lowers_recall():
    scores, labels = _prevalence_shaped_scores(np.random.default_rng(2))
    hi = classify_metrics(scores, labels, 0.5)
    lo = classify_metrics(scores, labels, 0.1)
    assert lo["recall"] >= hi["recall"]
    assert lo["counts"].flagged >= hi["counts"].flagged


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60),
       st.floats(0, 1), st.floats(0, 1))
def test_raising_threshold_monotone(samples, t1, t2):
    scores = [s for s, _ in samples]
    labels = [y for _, y in samples]
    lo, hi = sorted((t1, t2))
    a, b = confusion(scores, labels, lo), confusion(scores, labels, hi)
    assert b.tp <= a.tp and b.fn >= a.fn
    assert a.total == b.total == len(samples)


def test_sweep_csv():
    curve = sweep_thresholds([0.2, 0.8], [0, 1])
    rows = list(csv.reader(io.StringIO(sweep_to_csv(curve))))
    assert rows[0] == ["threshold", "recall", "precision"]
    assert [tuple(float(v) for v in r) for r in rows[1:]] == curve


def test_gate_results():
    res = gate_results(["a", "b"], [0.3, 0.7], 0.5)
    assert [r.decision for r in res] == [False, True]


def test_flagged_fraction_reference_values():
    count, frac = flagged_fraction(38511, 0.221, 0.9764, 0.8973)
    assert count == 9261
    assert frac == pytest.approx(9261 / 38511)
    assert abs(count - 9243) / 9243 <= 0.005
    assert abs(frac - 0.2403) / 0.2403 <= 0.005


def test_flagged_fraction_recall_equals_precision():
    assert flagged_fraction(1000, 0.3, 0.8, 0.8)[0] == 300


def test_flagged_fraction_homogeneous():
    for n in (101, 5000, 38511):
        a, _ = flagged_fraction(n, 0.221, 0.9764, 0.8973)
        b, _ = flagged_fraction(2 * n, 0.221, 0.9764, 0.8973)
        assert abs(b - 2 * a) <= 1


def test_flagged_fraction_errors():
    with pytest.raises(InvalidInputError):
        flagged_fraction(100, 0.2, 0.9, 0.0)
    with pytest.raises(InvalidInputError):
        flagged_fraction(0, 0.2, 0.9, 0.9)
