import json
import math

import mpmath
import numpy as np
import pytest

from stopcal.risk import (
    CalibrationResult,
    LambdaGrid,
    RiskSpec,
    ScoredSet,
    achieved_count,
    binom_tail_pvalue,
    calibrate_fixed_sequence,
    calibrate_scored,
    empirical_risk,
    fixed_sequence_select,
    git_blob_hash,
    load_calibration,
    loss_at_stop,
    save_calibration,
    score_set,
    stop_index,
)
from stopcal.traces import StepLabels, make_trace

mpmath.mp.dps = 50


def binom_cdf_oracle(n, rate):
    r = mpmath.mpf(rate)
    out, acc = [], mpmath.mpf(0)
    for i in range(n + 1):
        acc += mpmath.binomial(n, i) * r**i * (1 - r) ** (n - i)
        out.append(float(acc))
    return out


def selection_oracle(p_values, grid, epsilon):
    """Smallest threshold whose whole prefix (all larger thresholds) is rejected."""
    valid = [grid[j] for j in range(len(grid)) if all(p <= epsilon for p in p_values[: j + 1])]
    return min(valid) if valid else None


def test_stop_index_examples():
    assert stop_index([0.1, 0.6, 0.9], 0.5) == 2
    assert stop_index([0.1, 0.2], 0.5) == 2
    assert stop_index([0.7], 0.5) == 1
    assert stop_index([0.1, 0.2, 0.3], None) == 3
    assert stop_index([0.5], 0.5) == 1
    assert stop_index([0.2, 0.4, 0.9, 0.3], 0.4) == 2
    assert stop_index([0.3, 0.1], 0.0) == 1
    assert stop_index([0.3, 0.1], 0.31) == 2


def test_stop_index_monotone_in_lambda():
    rng = np.random.default_rng(8)
    for _ in range(200):
        s = rng.random(int(rng.integers(1, 20)))
        lams = np.sort(rng.random(5))
        idx = [stop_index(s, lam) for lam in lams]
        assert idx == sorted(idx)


def _trace(consistent):
    labels = [StepLabels(consistent_with_final=c, is_leaf=True, is_novel=False) for c in consistent]
    return make_trace("t", np.zeros((len(consistent), 2)), labels)


def test_loss_examples():
    hard = RiskSpec("consistent", 0.1, 0.1)
    soft = RiskSpec("consistent", 0.1, 0.1, loss_form="paper_soft")
    soft_nl = RiskSpec("novel_leaf", 0.1, 0.1, loss_form="paper_soft")
    assert loss_at_stop(_trace([True]), [1.0], 0.5, soft) == 0.0
    assert loss_at_stop(_trace([False]), [1.0], 0.5, soft) == 1.0
    assert loss_at_stop(_trace([True]), [0.8], 0.5, soft_nl) == pytest.approx(0.2)
    assert loss_at_stop(_trace([False, True]), [0.9, 0.1], 0.5, hard) == 1.0
    assert loss_at_stop(_trace([False, True]), [0.1, 0.2], 0.5, hard) == 0.0


def test_pvalue_exact_examples():
    assert binom_tail_pvalue(10, 0.5, 5) == 0.623046875
    assert binom_tail_pvalue(100, 0.1, 0) == pytest.approx(0.9**100, rel=1e-14)
    assert binom_tail_pvalue(7, 0.3, 7) == 1.0


def test_pvalue_matches_direct_summation():
    for rate in (0.05, 0.1, 0.5):
        for n in range(1, 201):
            oracle = binom_cdf_oracle(n, rate)
            got = [binom_tail_pvalue(n, rate, k) for k in range(n + 1)]
            assert max(abs(a - b) for a, b in zip(got, oracle)) <= 1e-12


def test_pvalue_large_n_log_space():
    n, rate = 3000, 0.1
    oracle = binom_cdf_oracle(n, rate)
    for k in (0, 150, 280, 300, 320, 600, 3000):
        assert abs(binom_tail_pvalue(n, rate, k) - oracle[k]) <= 1e-12


def test_achieved_count():
    assert achieved_count(0.0, 10) == 0
    assert achieved_count(2.0000000000001, 10) == 2
    assert achieved_count(2.3, 10) == 3


def test_fixed_sequence_hand_walk():
    grid = LambdaGrid((0.9, 0.7, 0.5, 0.3))
    idx, tested = fixed_sequence_select([0.01, 0.02, 0.2, 0.01], 0.05)
    assert (idx, tested) == (1, 3)
    assert grid.values[idx] == 0.7
    assert fixed_sequence_select([0.5, 0.01], 0.05) == (None, 1)
    assert fixed_sequence_select([0.01, 0.01], 0.05) == (1, 2)


def test_fixed_sequence_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = int(rng.integers(1, 9))
        grid = tuple(sorted(rng.choice(np.arange(1, 100), size=m, replace=False) / 100, reverse=True))
        eps = float(rng.choice([0.05, 0.1, 0.2, 0.5]))
        # mix of clearly small, boundary and large p-values
        p = rng.choice([0.0, 0.01, eps, eps + 1e-9, 0.3, 0.9], size=m).tolist()
        idx, _ = fixed_sequence_select(p, eps)
        got = None if idx is None else grid[idx]
        assert got == selection_oracle(p, grid, eps)


def _scored(rows):
    return ScoredSet(tuple(np.array(s, dtype=float) for s, _ in rows),
                     tuple(np.array(y, dtype=bool) for _, y in rows))


def test_calibrate_scored_recomputes_risk():
    rng = np.random.default_rng(3)
    rows = []
    for _ in range(60):
        t = int(rng.integers(1, 12))
        rows.append((np.sort(rng.random(t)), rng.random(t) < 0.7))
        rows[-1][1][-1] = True
    scored = _scored(rows)
    grid = LambdaGrid((0.95, 0.8, 0.6, 0.4, 0.2))
    spec = RiskSpec("consistent", 0.3, 0.2)
    res = calibrate_scored(scored, grid, spec)
    for j, lam in enumerate(res.tested_lambdas):
        losses = [0.0 if y[stop_index(s, lam) - 1] else 1.0 for s, y in zip(scored.scores, scored.labels)]
        risk = sum(losses) / len(losses)
        assert res.empirical_risk[j] == pytest.approx(risk, abs=1e-15)
        assert res.p_values[j] == binom_tail_pvalue(60, 0.3, math.ceil(sum(losses) - 1e-9))
    idx, _ = fixed_sequence_select(res.p_values, spec.epsilon)
    assert res.selected_lambda == (None if idx is None else grid.values[idx])


def test_impossible_first_hypothesis_gives_none():
    scored = _scored([([0.99, 0.99], [False, True])] * 30)
    res = calibrate_scored(scored, LambdaGrid((0.9, 0.5)), RiskSpec("consistent", 0.1, 0.1))
    assert res.selected_lambda is None
    assert len(res.p_values) == 1


def test_empirical_risk_and_none(small_splits, consistent_scorer):
    _, cal, _ = small_splits
    scorer, pca = consistent_scorer
    spec = RiskSpec("consistent", 0.1, 0.1)
    assert empirical_risk(cal, scorer, pca, None, spec) == 0.0
    scored = score_set(cal, scorer, pca, "consistent")
    res = calibrate_scored(scored, LambdaGrid((0.9, 0.6, 0.3)), spec)
    for j, lam in enumerate(res.tested_lambdas):
        assert res.empirical_risk[j] == pytest.approx(empirical_risk(cal, scorer, pca, lam, spec), abs=1e-12)


def test_calibration_guarantee_on_simulator(small_splits, consistent_scorer):
    _, cal, test = small_splits
    scorer, pca = consistent_scorer
    spec = RiskSpec("consistent", 0.1, 0.1)
    res = calibrate_fixed_sequence(cal, scorer, pca, LambdaGrid.default(), spec)
    assert res.selected_lambda is not None
    j = res.grid.values.index(res.selected_lambda)
    assert res.p_values[j] <= spec.epsilon and res.empirical_risk[j] <= spec.delta
    with pytest.raises(ValueError):
        calibrate_fixed_sequence(cal, scorer, pca, LambdaGrid.default(), RiskSpec("correct", 0.1, 0.1))


def test_spec_and_grid_validation():
    with pytest.raises(ValueError):
        RiskSpec("consistent", 0.0, 0.1)
    with pytest.raises(ValueError):
        RiskSpec("consistent", 0.1, 0.1, loss_form="squared")
    with pytest.raises(ValueError):
        LambdaGrid((0.2, 0.5))
    with pytest.raises(ValueError):
        LambdaGrid(())
    assert RiskSpec("consistent", 0.1, 0.2, pvalue_rate="epsilon").binomial_rate == 0.2
    assert len(LambdaGrid.default()) == 99


def test_calibration_roundtrip(tmp_path):
    spec = RiskSpec("novel_leaf", 0.2, 0.05, "paper_soft")
    res = CalibrationResult(spec, LambdaGrid((0.9, 0.5)), (0.01, 0.3), (0.001, 0.6), (0.4, 0.9), 0.9, 100,
                            {"probe_hashes": {"leaf": git_blob_hash(b"x")}})
    save_calibration(res, tmp_path / "c.json")
    back = load_calibration(tmp_path / "c.json")
    assert back == res and back.meta == res.meta
    assert json.loads((tmp_path / "c.json").read_text())["selected_lambda"] == 0.9


def test_git_blob_hash():
    # `printf hello | git hash-object --stdin`
    assert git_blob_hash(b"hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"
