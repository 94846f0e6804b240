"""Stopping-time losses, binomial-tail p-values and fixed-sequence threshold selection."""

from __future__ import annotations

import hashlib
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .features import PcaModel
from .probes import CombinedScorer, SCORER_MODES, score_trace
from .traces import Trace, TraceSet

LOSS_FORMS = ("paper_soft", "hard_indicator")

# which per-step label supervises each risk; novel_leaf reuses consistency labels
RISK_LABEL = {"correct": "correct", "consistent": "consistent", "novel_leaf": "consistent"}

# slack when turning a float loss sum into an integer count
_COUNT_EPS = 1e-9


@dataclass(frozen=True)
class RiskSpec:
    mode: str
    delta: float
    epsilon: float
    loss_form: str = "hard_indicator"
    # "delta" tests H_j: risk > delta at Binom(n, delta); "epsilon" is the literal Binom(n, epsilon)
    pvalue_rate: str = "delta"

    def __post_init__(self):
        if self.mode not in SCORER_MODES:
            raise ValueError(f"unknown risk mode {self.mode!r}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.loss_form not in LOSS_FORMS:
            raise ValueError(f"unknown loss form {self.loss_form!r}")
        if self.pvalue_rate not in ("delta", "epsilon"):
            raise ValueError(f"pvalue_rate must be 'delta' or 'epsilon', got {self.pvalue_rate!r}")

    @property
    def binomial_rate(self) -> float:
        return self.delta if self.pvalue_rate == "delta" else self.epsilon


@dataclass(frozen=True)
class LambdaGrid:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("empty lambda grid")
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError("lambda grid values must lie in [0, 1]")
        if any(a <= b for a, b in zip(vals, vals[1:])):
            raise ValueError("lambda grid must be strictly descending")

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def default(cls) -> "LambdaGrid":
        return cls(tuple(round(k / 100, 2) for k in range(99, 0, -1)))


@dataclass(frozen=True)
class CalibrationResult:
    spec: RiskSpec
    grid: LambdaGrid
    # the next three cover the tested prefix of the grid only
    empirical_risk: tuple
    p_values: tuple
    stop_fraction: tuple
    selected_lambda: Optional[float]
    n: int
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def tested_lambdas(self) -> tuple:
        return self.grid.values[: len(self.p_values)]


# ---------------------------------------------------------------------------
# stopping and losses


def stop_index(scores: Sequence[float], lam: Optional[float]) -> int:
    """1-based index of the first step with ``score >= lam``; ``T`` if none.

    ``lam=None`` means no valid threshold: the trajectory runs to the budget.
    """
    t_max = len(scores)
    if lam is None:
        return t_max
    for t, s in enumerate(scores, start=1):
        if s >= lam:
            return t
    return t_max


def _loss(label: bool, f: float, loss_form: str) -> float:
    if loss_form == "hard_indicator":
        return 0.0 if label else 1.0
    return 1.0 - f if label else f


def loss_at_stop(trace: Trace, scores, lam: Optional[float], spec: RiskSpec) -> float:
    t = stop_index(scores, lam) - 1
    label = trace.label_at(RISK_LABEL[spec.mode], t)
    return _loss(label, float(scores[t]), spec.loss_form)


def empirical_risk(
    cal: TraceSet, scorer: CombinedScorer, pca: PcaModel, lam: Optional[float], spec: RiskSpec
) -> float:
    if not len(cal):
        raise ValueError("empty calibration set")
    losses = [loss_at_stop(tr, score_trace(scorer, tr, pca), lam, spec) for tr in cal.traces]
    return math.fsum(losses) / len(losses)


@dataclass(frozen=True, eq=False)
class ScoredSet:
    """Smoothed scores and risk labels for every trace, computed once per scorer."""

    scores: tuple
    labels: tuple

    def __len__(self) -> int:
        return len(self.scores)


def score_set(traces: TraceSet, scorer: CombinedScorer, pca: PcaModel, label_kind: str) -> ScoredSet:
    scores = tuple(score_trace(scorer, tr, pca) for tr in traces.traces)
    labels = tuple(tr.label_array(label_kind) for tr in traces.traces)
    return ScoredSet(scores, labels)


def stop_positions(scores: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """0-based stop positions of one trace for many thresholds at once."""
    running_max = np.maximum.accumulate(scores)
    idx = np.searchsorted(running_max, lambdas, side="left")
    return np.minimum(idx, scores.shape[0] - 1)


def loss_matrix(scored: ScoredSet, lambdas: Sequence[Optional[float]], loss_form: str):
    """Per-trace losses and early-stop flags, each of shape (n_traces, n_lambdas)."""
    lam = np.array([np.inf if v is None else v for v in lambdas], dtype=np.float64)
    n, m = len(scored), lam.shape[0]
    losses = np.empty((n, m))
    early = np.empty((n, m), dtype=bool)
    for i, (s, y) in enumerate(zip(scored.scores, scored.labels)):
        pos = stop_positions(s, lam)
        lab = y[pos]
        if loss_form == "hard_indicator":
            losses[i] = np.where(lab, 0.0, 1.0)
        else:
            f = s[pos]
            losses[i] = np.where(lab, 1.0 - f, f)
        early[i] = pos < s.shape[0] - 1
    return losses, early


# ---------------------------------------------------------------------------
# p-values


# above this n the exact big-integer sums get slow; log space is accurate to ~1e-13
_EXACT_MAX_N = 2000


@lru_cache(maxsize=64)
def _exact_cdf(n: int, rate: float) -> tuple:
    # a float rate is an exact dyadic rational p/q: sum in integers, round once
    p, q = Fraction(rate).as_integer_ratio()
    r = q - p
    denom = q ** n
    out = []
    total = 0
    term = r ** n  # comb(n, i) * p^i * r^(n-i)
    for i in range(n + 1):
        total += term
        out.append(total / denom)  # int true division rounds correctly
        term = term * (n - i) * p // ((i + 1) * r)
    return tuple(out)


def binom_tail_pvalue(n: int, rate: float, k: int) -> float:
    """``P(Binom(n, rate) <= k)``.

    Exact (single rounding) for ``n <= 2000``; log-space summation beyond.
    """
    if not 0 <= k <= n:
        raise ValueError(f"achieved count k={k} outside [0, n={n}]")
    if not 0.0 < rate < 1.0:
        raise ValueError(f"rate must lie in (0, 1), got {rate}")
    if k == n:
        return 1.0
    if n <= _EXACT_MAX_N:
        return _exact_cdf(n, float(rate))[k]
    i = np.arange(k + 1, dtype=np.float64)
    log_terms = (
        gammaln(n + 1.0) - gammaln(i + 1.0) - gammaln(n - i + 1.0)
        + i * math.log(rate) + (n - i) * math.log1p(-rate)
    )
    return float(min(1.0, math.exp(logsumexp(log_terms))))


def achieved_count(loss_sum: float, n: int) -> int:
    """Integer loss mass for the binomial tail, rounded up (conservative)."""
    return min(n, max(0, math.ceil(loss_sum - _COUNT_EPS)))


# ---------------------------------------------------------------------------
# fixed-sequence testing


def fixed_sequence_select(p_values: Sequence[float], epsilon: float):
    """Walk p-values in grid order, rejecting while ``p <= epsilon``.

    Returns ``(selected, n_tested)``: the 0-based index of the last rejected
    hypothesis (``None`` if the first one is not rejected) and how many
    hypotheses were examined.
    """
    for j, p in enumerate(p_values):
        if p > epsilon:
            return (j - 1 if j > 0 else None), j + 1
    return (len(p_values) - 1 if len(p_values) else None), len(p_values)


def calibrate_scored(scored: ScoredSet, grid: LambdaGrid, spec: RiskSpec, meta=None) -> CalibrationResult:
    """Fixed-sequence Learn-then-Test calibration on pre-scored traces."""
    n = len(scored)
    if n < 1:
        raise ValueError("calibration needs at least one trace")
    losses, early = loss_matrix(scored, grid.values, spec.loss_form)
    risks, p_values, fractions = [], [], []
    selected = None
    for j, lam in enumerate(grid.values):
        loss_sum = math.fsum(losses[:, j])
        p = binom_tail_pvalue(n, spec.binomial_rate, achieved_count(loss_sum, n))
        risks.append(loss_sum / n)
        p_values.append(p)
        fractions.append(float(early[:, j].mean()))
        if p > spec.epsilon:
            break
        selected = lam
    return CalibrationResult(
        spec, grid, tuple(risks), tuple(p_values), tuple(fractions), selected, n, dict(meta or {})
    )


def calibrate_fixed_sequence(
    cal: TraceSet,
    scorer: CombinedScorer,
    pca: PcaModel,
    grid: LambdaGrid,
    spec: RiskSpec,
    meta=None,
) -> CalibrationResult:
    if scorer.mode != spec.mode:
        raise ValueError(f"scorer mode {scorer.mode!r} does not match risk mode {spec.mode!r}")
    scored = score_set(cal, scorer, pca, RISK_LABEL[spec.mode])
    return calibrate_scored(scored, grid, spec, meta)


# ---------------------------------------------------------------------------
# serialization


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def calibration_to_dict(result: CalibrationResult) -> dict:
    spec = result.spec
    return {
        "spec": {
            "mode": spec.mode,
            "delta": spec.delta,
            "epsilon": spec.epsilon,
            "loss_form": spec.loss_form,
            "pvalue_rate": spec.pvalue_rate,
        },
        "grid": list(result.grid.values),
        "tested": len(result.p_values),
        "empirical_risk": list(result.empirical_risk),
        "p_values": list(result.p_values),
        "stop_fraction": list(result.stop_fraction),
        "selected_lambda": result.selected_lambda,
        "n": result.n,
        **result.meta,
    }


def calibration_from_dict(doc: dict) -> CalibrationResult:
    known = {"spec", "grid", "tested", "empirical_risk", "p_values", "stop_fraction",
             "selected_lambda", "n"}
    return CalibrationResult(
        RiskSpec(**doc["spec"]),
        LambdaGrid(tuple(doc["grid"])),
        tuple(doc["empirical_risk"]),
        tuple(doc["p_values"]),
        tuple(doc["stop_fraction"]),
        doc["selected_lambda"],
        int(doc["n"]),
        {k: v for k, v in doc.items() if k not in known},
    )


def save_calibration(result: CalibrationResult, path) -> None:
    Path(path).write_text(json.dumps(calibration_to_dict(result), indent=2) + "\n", encoding="utf-8")


def load_calibration(path) -> CalibrationResult:
    return calibration_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
