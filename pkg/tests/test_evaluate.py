import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from stopcal.evaluate import (
    calibration_report,
    crop_baseline,
    crop_positions,
    efficiency_curve,
    write_csv,
)
from stopcal.risk import LambdaGrid, RiskSpec, calibrate_fixed_sequence, stop_index
from stopcal.probes import score_trace
from stopcal.traces import StepLabels, TraceSet, make_trace


def _toy():
    labels = [StepLabels(correct_if_stopped=c, consistent_with_final=k)
              for c, k in [(False, False), (True, False), (True, True)]]
    tr = make_trace("a", np.zeros((3, 2)), labels, token_counts=[10, 20, 30])
    return TraceSet((tr,), 2, "test")


def test_crop_examples():
    ts = _toy()
    assert crop_positions(ts, 5) == [0]
    assert crop_positions(ts, 10) == [0]
    assert crop_positions(ts, 35) == [1]
    assert crop_positions(ts, 60) == [2]
    (full,) = crop_baseline(ts, [1000])
    assert (full.mean_tokens, full.mean_steps, full.outcome) == (60.0, 3.0, 1.0)
    (floor,) = crop_baseline(ts, [1], outcome="correct")
    assert (floor.mean_tokens, floor.mean_steps, floor.outcome) == (10.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        crop_baseline(ts, [])


def test_crop_matches_recomputation(small_splits):
    test = small_splits[2]
    budgets = [100, 500, 1500, 10**6]
    points = crop_baseline(test, budgets)
    for budget, pt in zip(budgets, points):
        tokens, steps, hits = [], [], []
        for tr in test.traces:
            k, used = 0, 0
            for t, c in enumerate(tr.token_counts):
                if used + c > budget and t > 0:
                    break
                used += c
                k = t
            tokens.append(sum(tr.token_counts[: k + 1]))
            steps.append(k + 1)
            hits.append(tr.labels[k].consistent_with_final)
        assert pt.mean_tokens == pytest.approx(np.mean(tokens), abs=1e-12)
        assert pt.mean_steps == pytest.approx(np.mean(steps), abs=1e-12)
        assert pt.outcome == pytest.approx(np.mean(hits), abs=1e-12)
    assert points[-1].outcome == 1.0


@pytest.fixture(scope="module")
def calibrations(small_splits, consistent_scorer):
    _, cal, _ = small_splits
    scorer, pca = consistent_scorer
    return [calibrate_fixed_sequence(cal, scorer, pca, LambdaGrid.default(), RiskSpec("consistent", 0.1, e))
            for e in (0.05, 0.1, 0.2, 0.5)]


def test_efficiency_curve_monotone(small_splits, consistent_scorer, calibrations):
    scorer, pca = consistent_scorer
    points = efficiency_curve(small_splits[2], scorer, pca, calibrations)
    assert [p.epsilon for p in points] == [0.05, 0.1, 0.2, 0.5]
    tokens = [p.mean_tokens for p in points]
    assert all(a >= b for a, b in zip(tokens, tokens[1:]))
    assert all(0.0 <= p.outcome <= 1.0 for p in points)
    assert points[0].method == "consistent"


def test_none_row_equals_full_budget(small_splits, consistent_scorer, calibrations):
    scorer, pca = consistent_scorer
    test = small_splits[2]
    none = replace(calibrations[0], selected_lambda=None)
    (pt,) = efficiency_curve(test, scorer, pca, [none])
    (full,) = crop_baseline(test, [10**9])
    assert (pt.mean_tokens, pt.mean_steps, pt.outcome) == (full.mean_tokens, full.mean_steps, full.outcome)
    assert pt.selected_lambda is None


def test_single_trace_point(small_splits, consistent_scorer, calibrations):
    scorer, pca = consistent_scorer
    tr = small_splits[2].traces[4]
    single = TraceSet((tr,), tr.dimension, "test")
    cal = calibrations[1]
    (pt,) = efficiency_curve(single, scorer, pca, [cal])
    k = stop_index(score_trace(scorer, tr, pca), cal.selected_lambda)
    assert pt.mean_steps == k
    assert pt.mean_tokens == tr.token_counts[:k].sum()
    assert pt.outcome == float(tr.labels[k - 1].consistent_with_final)


def test_calibration_report_rows(small_splits, consistent_scorer, calibrations):
    scorer, pca = consistent_scorer
    rows = calibration_report(small_splits[2], scorer, pca, calibrations)
    assert [r.epsilon for r in rows] == sorted(r.epsilon for r in rows)
    for r in rows:
        assert r.violation_rate == float(r.realized_risk > r.delta)
        assert 0.0 <= r.token_savings < 1.0


def test_csv_rows(small_splits, consistent_scorer, calibrations):
    scorer, pca = consistent_scorer
    test = small_splits[2]
    rows = crop_baseline(test, [200, 400, 800]) + efficiency_curve(test, scorer, pca, calibrations)
    buf = io.StringIO()
    write_csv(rows, buf)
    parsed = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert len(parsed) == 3 + len(calibrations)
    assert parsed[0]["epsilon"] == "NONE" and parsed[0]["method"] == "crop"
    assert float(parsed[-1]["mean_tokens"]) == rows[-1].mean_tokens
    with pytest.raises(ValueError):
        write_csv([], buf)
