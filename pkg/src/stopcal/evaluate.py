"""Budget curves for the crop baseline and calibrated stopping, plus CSV reports."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .features import PcaModel
from .probes import CombinedScorer, score_trace
from .risk import RISK_LABEL, CalibrationResult, stop_positions
from .traces import TraceSet

METHOD_NAME = {"correct": "supervised", "consistent": "consistent", "novel_leaf": "novel_leaf"}


@dataclass(frozen=True)
class BudgetCurvePoint:
    method: str
    level: float  # token budget for crop, epsilon otherwise
    epsilon: Optional[float]
    selected_lambda: Optional[float]
    mean_tokens: float
    mean_steps: float
    outcome: float  # accuracy or consistency fraction at the stop step
    n_test: int


@dataclass(frozen=True)
class CalibrationReportRow:
    epsilon: float
    delta: float
    realized_risk: float
    violation_rate: float
    selected_lambda: Optional[float]
    mean_stop_step: float
    token_savings: float
    repeats: int = 1


def _full_budget(test: TraceSet):
    tokens = np.mean([tr.total_tokens for tr in test.traces])
    steps = np.mean([len(tr) for tr in test.traces])
    return float(tokens), float(steps)


def _summarise(test: TraceSet, positions: Sequence[int], outcome: str):
    """Mean tokens, mean steps and outcome fraction for 0-based stop positions."""
    tokens, steps, hits = [], [], []
    for tr, pos in zip(test.traces, positions):
        tokens.append(int(tr.token_counts[: pos + 1].sum()))
        steps.append(pos + 1)
        hits.append(tr.label_at(outcome, pos))
    return float(np.mean(tokens)), float(np.mean(steps)), float(np.mean(hits))


def crop_positions(test: TraceSet, budget: int) -> list:
    """Last step whose cumulative token count fits in ``budget``, at least step 1."""
    out = []
    for tr in test.traces:
        cum = np.cumsum(tr.token_counts)
        out.append(max(0, int(np.searchsorted(cum, budget, side="right")) - 1))
    return out


def crop_baseline(test: TraceSet, budgets: Sequence[int], outcome: str = "consistent") -> list:
    if not budgets:
        raise ValueError("crop_baseline needs at least one budget")
    if not len(test):
        raise ValueError("empty test set")
    points = []
    for budget in budgets:
        tokens, steps, frac = _summarise(test, crop_positions(test, budget), outcome)
        points.append(BudgetCurvePoint("crop", float(budget), None, None, tokens, steps, frac, len(test)))
    return points


def calibrated_positions(test: TraceSet, scorer: CombinedScorer, pca: PcaModel, lam: Optional[float]) -> list:
    lam_arr = np.array([np.inf if lam is None else lam])
    return [int(stop_positions(score_trace(scorer, tr, pca), lam_arr)[0]) for tr in test.traces]


def efficiency_curve(
    test: TraceSet,
    scorer: CombinedScorer,
    pca: PcaModel,
    calibrations: Sequence[CalibrationResult],
    outcome: str = "consistent",
) -> list:
    """One point per calibration: tokens spent and outcome under its threshold."""
    if not len(test):
        raise ValueError("empty test set")
    scores = [score_trace(scorer, tr, pca) for tr in test.traces]
    points = []
    for cal in sorted(calibrations, key=lambda c: c.spec.epsilon):
        if cal.spec.mode != scorer.mode:
            raise ValueError(f"calibration mode {cal.spec.mode!r} does not match scorer {scorer.mode!r}")
        lam = np.array([np.inf if cal.selected_lambda is None else cal.selected_lambda])
        pos = [int(stop_positions(s, lam)[0]) for s in scores]
        tokens, steps, frac = _summarise(test, pos, outcome)
        points.append(BudgetCurvePoint(
            METHOD_NAME[scorer.mode], cal.spec.epsilon, cal.spec.epsilon, cal.selected_lambda,
            tokens, steps, frac, len(test),
        ))
    return points


def calibration_report(
    test: TraceSet,
    scorer: CombinedScorer,
    pca: PcaModel,
    calibrations: Sequence[CalibrationResult],
) -> list:
    """Realised risk on ``test`` for each calibration; violation is 1 when risk exceeds delta."""
    full_tokens, _ = _full_budget(test)
    scores = [score_trace(scorer, tr, pca) for tr in test.traces]
    rows = []
    for cal in sorted(calibrations, key=lambda c: c.spec.epsilon):
        spec = cal.spec
        lam = np.array([np.inf if cal.selected_lambda is None else cal.selected_lambda])
        losses, positions = [], []
        for tr, s in zip(test.traces, scores):
            pos = int(stop_positions(s, lam)[0])
            positions.append(pos)
            label = tr.label_at(RISK_LABEL[spec.mode], pos)
            if spec.loss_form == "hard_indicator":
                losses.append(0.0 if label else 1.0)
            else:
                losses.append(1.0 - s[pos] if label else s[pos])
        risk = math.fsum(losses) / len(losses)
        tokens, steps, _ = _summarise(test, positions, RISK_LABEL[spec.mode])
        rows.append(CalibrationReportRow(
            spec.epsilon, spec.delta, risk, float(risk > spec.delta), cal.selected_lambda,
            steps, 1.0 - tokens / full_tokens,
        ))
    return rows


def coverage_rows(report) -> list:
    return [
        CalibrationReportRow(
            r.epsilon, r.delta, r.mean_test_risk, r.violation_fraction,
            None if math.isnan(r.mean_selected_lambda) else r.mean_selected_lambda,
            r.mean_stop_step, r.token_savings, r.repeats,
        )
        for r in report.rows
    ]


def _cell(value):
    if value is None:
        return "NONE"
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(rows: Sequence, path_or_stream) -> None:
    """Write dataclass rows with a header line; ``None`` becomes ``NONE``."""
    if not rows:
        raise ValueError("no rows to write")
    names = [f.name for f in fields(rows[0])]

    def emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            d = asdict(row)
            writer.writerow([_cell(d[n]) for n in names])

    if hasattr(path_or_stream, "write"):
        emit(path_or_stream)
    else:
        with open(path_or_stream, "w", newline="", encoding="utf-8") as fh:
            emit(fh)
