"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together in the
terminal summary (see conftest.py). The coverage criterion runs the full
200-repeat experiment and takes several minutes on one core.
"""

import random
import time
from dataclasses import replace

import numpy as np

from stopcal.features import fit_pca
from stopcal.monitor import MonitorState, run_stream
from stopcal.probes import (
    ProbeHyper,
    auroc,
    example_weights,
    fit_logistic,
    logistic_gradient,
    logistic_loss,
    score_trace,
)
from stopcal.risk import (
    LambdaGrid,
    RiskSpec,
    binom_tail_pvalue,
    calibrate_fixed_sequence,
    empirical_risk,
    fixed_sequence_select,
    stop_index,
)
from stopcal.sim import coverage_experiment, fit_scorer, generate
from stopcal.traces import segment_thoughts

from test_features import power_deflation
from test_probes import pairwise_auroc
from test_risk import binom_cdf_oracle, selection_oracle
from test_traces import EXAMPLES, _reference_segment

RESULTS = []


def record(name: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def test_coverage(default_config):
    spec = RiskSpec("consistent", 0.1, 0.1, loss_form="hard_indicator")
    epsilons = (0.05, 0.1, 0.2, 0.5)
    start = time.perf_counter()
    report = coverage_experiment(default_config, spec, 200, epsilons, n_train=500, n_cal=450, n_test=500)
    elapsed = time.perf_counter() - start
    parts = [f"eps={r.epsilon:g} viol={r.violation_fraction:.3f}<={r.bound:.3f}" for r in report.rows]
    record("risk-control coverage (R=200)", all(r.passes for r in report.rows),
           "; ".join(parts) + f"; {elapsed:.0f}s")


def test_binomial_pvalue():
    worst = 0.0
    for rate in (0.05, 0.1, 0.5):
        for n in range(1, 201):
            oracle = binom_cdf_oracle(n, rate)
            worst = max(worst, max(abs(binom_tail_pvalue(n, rate, k) - oracle[k]) for k in range(n + 1)))
    exact = binom_tail_pvalue(10, 0.5, 5)
    record("binomial tail p-value", worst <= 1e-12 and exact == 0.623046875,
           f"max abs error {worst:.2e} over n<=200; (10, 0.5, 5) -> {exact!r}")


def test_fixed_sequence():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        m = int(rng.integers(1, 9))
        grid = tuple(sorted(rng.choice(np.arange(1, 100), size=m, replace=False) / 100, reverse=True))
        eps = float(rng.choice([0.05, 0.1, 0.2, 0.5]))
        p = rng.choice([0.0, 0.01, eps, eps + 1e-9, 0.3, 0.9, float(rng.random())], size=m).tolist()
        idx, _ = fixed_sequence_select(p, eps)
        mismatches += (None if idx is None else grid[idx]) != selection_oracle(p, grid, eps)
    record("fixed-sequence selection", mismatches == 0, f"{mismatches} mismatches in 1000 sequences")


def test_probe_training():
    rng = np.random.default_rng(7)
    worst_grad = 0.0
    h = 1e-6
    for _ in range(100):
        n, d = int(rng.integers(5, 40)), int(rng.integers(1, 8))
        x = rng.normal(size=(n, d))
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        v = example_weights(y, bool(rng.integers(2)))
        w, b, l2 = rng.normal(size=d), float(rng.normal()), float(rng.uniform(0, 0.1))
        gw, gb = logistic_gradient(w, b, x, y.astype(float), v, l2)
        num = []
        for j in range(d + 1):
            e = np.zeros(d + 1)
            e[j] = h
            plus = logistic_loss(w + e[:d], b + e[d], x, y, v, l2)
            minus = logistic_loss(w - e[:d], b - e[d], x, y, v, l2)
            num.append((plus - minus) / (2 * h))
        num = np.array(num)
        worst_grad = max(worst_grad, np.linalg.norm(np.append(gw, gb) - num) / np.linalg.norm(num))

    x = np.concatenate([rng.normal(-2, 0.5, size=(60, 4)), rng.normal(2, 0.5, size=(60, 4))])
    y = np.repeat([False, True], 60)
    w, b, _ = fit_logistic(x, y, ProbeHyper())
    separable = auroc(x @ w + b, y)

    auroc_mismatch = 0
    for _ in range(50):
        n = int(rng.integers(2, 80))
        s = rng.integers(0, 8, size=n) / 7.0
        lab = rng.random(n) < 0.5
        lab[0], lab[-1] = True, False
        auroc_mismatch += auroc(s, lab) != pairwise_auroc(s, lab)
    ok = worst_grad <= 1e-5 and separable == 1.0 and auroc_mismatch == 0
    record("probe training", ok, f"grad rel err {worst_grad:.1e}; separable AUROC {separable}; "
                                 f"{auroc_mismatch}/50 AUROC mismatches")


def test_pca():
    rng = np.random.default_rng(11)
    worst_eig = worst_var = worst_orth = 0.0
    for _ in range(10):
        basis, _ = np.linalg.qr(rng.normal(size=(20, 20)))
        x = rng.normal(size=(50, 20)) * np.geomspace(10.0, 0.5, 20) @ basis.T
        model = fit_pca(x, 20)
        centered = x - x.mean(axis=0)
        cov = centered.T @ centered / 49
        vals, _ = power_deflation(cov, 20)
        worst_eig = max(worst_eig, np.max(np.abs(model.explained_variance - vals) / vals))
        total = np.trace(cov)
        worst_var = max(worst_var, abs(model.explained_variance.sum() - total) / total)
        worst_orth = max(worst_orth, np.abs(model.components @ model.components.T - np.eye(20)).max())
    ok = worst_eig <= 1e-6 and worst_var <= 1e-6 and worst_orth <= 1e-6
    record("PCA", ok, f"eigen rel err {worst_eig:.1e}; variance rel err {worst_var:.1e}; "
                      f"orthonormality {worst_orth:.1e}")


def test_online_offline(default_config):
    cfg = replace(default_config, seed=99)
    train = generate(replace(cfg, n_traces=300))
    test = generate(replace(cfg, n_traces=100), "test", start=300)
    scorer, pca = fit_scorer("consistent", train, 256, ProbeHyper(), 10)
    mismatches = 0
    for lam in (0.3, 0.5, 0.7):
        for tr in test.traces:
            online, _ = run_stream(MonitorState(scorer, pca, lam), tr.embedding_matrix, len(tr))
            mismatches += online != stop_index(score_trace(scorer, tr, pca), lam)
    record("online/offline equivalence", mismatches == 0, f"{mismatches} mismatches over 100 traces x 3 thresholds")


def test_efficiency(default_config):
    cfg = default_config
    train = generate(replace(cfg, n_traces=500), "train", start=0)
    cal = generate(replace(cfg, n_traces=450), "calibration", start=500)
    test = generate(replace(cfg, n_traces=500), "test", start=950)
    scorer, pca = fit_scorer("consistent", train, 256, ProbeHyper(), 10)
    spec = RiskSpec("consistent", 0.1, 0.1)
    result = calibrate_fixed_sequence(cal, scorer, pca, LambdaGrid.default(), spec)
    lam = result.selected_lambda
    stops = [stop_index(score_trace(scorer, tr, pca), lam) for tr in test.traces]
    full = np.mean([len(tr) for tr in test.traces])
    reduction = 1.0 - np.mean(stops) / full
    risk = empirical_risk(test, scorer, pca, lam, spec)
    record("end-to-end efficiency", reduction >= 0.20 and risk <= spec.delta,
           f"lambda={lam}; steps {np.mean(stops):.2f}/{full:.2f} ({reduction:.1%} fewer); inconsistency {risk:.3f}")


def test_segmentation():
    rnd = random.Random(99)
    words = ["wait", "Wait", "but", "BUT", "so", "x", "butter", "awaits", "\n", "\n\n", "\n\n\n", ".", " ", "é"]
    failures = 0
    for _ in range(1000):
        text = "".join(rnd.choice(words) + rnd.choice(["", " "]) for _ in range(rnd.randint(1, 30)))
        steps = segment_thoughts(text)
        failures += "\n\n".join(steps) != text or steps != _reference_segment(text)
    examples_ok = all(segment_thoughts(t) == e for t, e in EXAMPLES)
    record("segmentation", failures == 0 and examples_ok,
           f"{failures}/1000 fuzz failures; worked examples {'reproduced' if examples_ok else 'differ'}")
