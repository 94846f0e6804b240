"""Synthetic reasoning-graph traces with planted, linearly recoverable signals.

Each trace is a walk that grows a rooted tree of thoughts. At every step the
walker either adds a novel child node (with a probability that decays over the
trajectory and is zero after a per-trace convergence cutoff) or moves inside
the existing graph: backtracking to a uniformly chosen ancestor, restating the
current attempt, or dwelling on the current node. The attempt after ``t``
steps is the deepest answer-bearing node present so far, so the consistency
label ``attempt_t == attempt_T`` is exact.

Step embeddings are ``latent(node) + signal + noise`` where the first four
coordinates carry ``[leaf, novel, stagnation, restate]`` scaled by
``signal_scale``; latent node vectors are zero in those coordinates.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import beta as beta_dist

from .features import DEFAULT_PCA_DIM, SmoothingSpec, fit_pca_clamped
from .probes import CombinedScorer, ProbeHyper, train_probe
from .risk import (
    RISK_LABEL,
    LambdaGrid,
    RiskSpec,
    calibrate_scored,
    loss_matrix,
    score_set,
)
from .traces import Step, StepLabels, Trace, TraceSet, save_traceset

N_SIGNAL = 4  # leaf, novel, stagnation, restate

_TEXT = {
    "novel": "But what if we extend the argument with idea {node}?",
    "backtrack": "Wait, go back to idea {node} and reconsider.",
    "restate": "But so the answer is idea {node}.",
    "dwell": "Wait, re-check idea {node} once more.",
}


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_traces: int = 1000
    max_steps: int = 48
    min_steps: int = 24
    # novel-node probability at step t (1-based): p_new_leaf * leaf_decay**(t-1), zero after the cutoff
    p_new_leaf: float = 0.6
    leaf_decay: float = 0.97
    p_answer: float = 0.4
    p_backtrack: float = 0.25
    p_restate: float = 0.5
    noise_scale: float = 0.1
    signal_scale: float = 1.0
    latent_scale: float = 0.3
    embed_dim: int = 64
    difficulty: float = 0.2
    # convergence cutoff drawn as ceil(U(lo, hi) * trace_length)
    converge_lo: float = 0.1
    converge_hi: float = 0.45
    stagnation_horizon: int = 8
    tokens_lo: int = 20
    tokens_hi: int = 160

    def __post_init__(self):
        for name in ("p_new_leaf", "leaf_decay", "p_answer", "p_backtrack", "p_restate",
                     "difficulty", "converge_lo", "converge_hi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.converge_lo > self.converge_hi:
            raise ValueError("converge_lo must not exceed converge_hi")
        if not 1 <= self.min_steps <= self.max_steps:
            raise ValueError("need 1 <= min_steps <= max_steps")
        if self.embed_dim < N_SIGNAL:
            raise ValueError(f"embed_dim must be at least {N_SIGNAL}")
        if self.noise_scale < 0 or self.latent_scale < 0:
            raise ValueError("scales must be non-negative")
        if not 1 <= self.tokens_lo <= self.tokens_hi:
            raise ValueError("need 1 <= tokens_lo <= tokens_hi")
        if self.stagnation_horizon < 1:
            raise ValueError("stagnation_horizon must be positive")

    def leaf_probability(self, t: int) -> float:
        return self.p_new_leaf * self.leaf_decay ** (t - 1)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown simulator config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ReasoningGraph:
    parents: tuple  # parents[0] == -1 for the root (the question)
    answer_bearing: tuple
    latent: np.ndarray
    answer_node: Optional[int] = None

    def __post_init__(self):
        if not self.parents or self.parents[0] != -1:
            raise ValueError("node 0 must be the root")
        for child, parent in enumerate(self.parents[1:], start=1):
            # parents precede children, so the graph is a rooted tree
            if not 0 <= parent < child:
                raise ValueError(f"node {child} has invalid parent {parent}")
        if self.answer_node is not None and not 0 <= self.answer_node < len(self.parents):
            raise ValueError("answer node not in graph")

    def __len__(self) -> int:
        return len(self.parents)

    def ancestors(self, node: int) -> list:
        out = []
        while self.parents[node] != -1:
            node = self.parents[node]
            out.append(node)
        return out

    def depth(self, node: int) -> int:
        return len(self.ancestors(node))

    def to_dict(self) -> dict:
        return {
            "parents": list(self.parents),
            "answer_bearing": list(self.answer_bearing),
            "answer_node": self.answer_node,
        }


@dataclass(frozen=True, eq=False)
class SimTrace(Trace):
    added_leaf: tuple = ()
    was_backtrack: tuple = ()
    graph_converged_at: int = 1
    solvable: bool = True
    visited: tuple = ()
    graph: Optional[ReasoningGraph] = None

    def ground_truth(self) -> dict:
        return {
            "added_leaf": list(self.added_leaf),
            "was_backtrack": list(self.was_backtrack),
            "graph_converged_at": self.graph_converged_at,
            "solvable": self.solvable,
            "visited": list(self.visited),
            "graph": self.graph.to_dict() if self.graph else None,
        }


def _trace(config: SimConfig, index: int, id_prefix: str) -> SimTrace:
    rng = np.random.default_rng([config.seed, index])
    length = int(rng.integers(config.min_steps, config.max_steps + 1))
    cutoff = max(1, math.ceil(rng.uniform(config.converge_lo, config.converge_hi) * length))
    solvable = bool(rng.random() >= config.difficulty)
    draws = rng.random((length, 4)).tolist()
    latent = rng.standard_normal((length + 1, config.embed_dim)) * config.latent_scale
    latent[:, :N_SIGNAL] = 0.0
    noise = rng.standard_normal((length, config.embed_dim)) * config.noise_scale
    tokens = rng.integers(config.tokens_lo, config.tokens_hi + 1, size=length)

    parents = [-1]
    depth = [0]
    answer = [False]
    current = 0
    attempt = None  # deepest answer-bearing node, most recent on ties
    visited, attempts, added, backtracked, kinds, restated = [], [], [], [], [], []

    for t in range(1, length + 1):
        u_leaf, u_answer, u_move, u_pick = draws[t - 1]
        p_leaf = config.leaf_probability(t) if t <= cutoff else 0.0
        kind = "dwell"
        if u_leaf < p_leaf:
            parents.append(current)
            depth.append(depth[current] + 1)
            answer.append(bool(u_answer < config.p_answer))
            current = len(parents) - 1
            kind = "novel"
            if answer[current] and (attempt is None or depth[current] >= depth[attempt]):
                attempt = current
        elif current != 0 and u_move < config.p_backtrack:
            chain = []
            node = current
            while parents[node] != -1:
                node = parents[node]
                chain.append(node)
            current = chain[int(u_pick * len(chain))]
            kind = "backtrack"
        elif attempt is not None and u_pick < config.p_restate:
            current = attempt
            kind = "restate"
        visited.append(current)
        attempts.append(attempt)
        added.append(kind == "novel")
        backtracked.append(kind == "backtrack")
        restated.append(kind == "restate")
        kinds.append(kind)

    final_attempt = attempts[-1]
    answer_node = final_attempt if solvable else None
    converged_at = max(1, max((t for t, a in enumerate(added, start=1) if a), default=1))

    h = config.stagnation_horizon
    rows = []
    since = 0
    for i in range(length):
        since = 0 if added[i] else since + 1
        rows.append((answer[visited[i]], added[i], min(since, h) / h, restated[i]))
    signal = np.array(rows, dtype=np.float64)
    emb = (latent[visited] + noise).astype(np.float64)
    emb[:, :N_SIGNAL] += config.signal_scale * signal
    emb = emb.astype(np.float32)

    steps = tuple(
        Step(i, _TEXT[kinds[i]].format(node=visited[i]), emb[i], int(tokens[i]))
        for i in range(length)
    )
    labels = tuple(
        StepLabels(
            correct_if_stopped=bool(solvable and attempts[i] is not None and attempts[i] == final_attempt),
            consistent_with_final=attempts[i] == final_attempt,
            is_leaf=answer[visited[i]],
            is_novel=added[i],
        )
        for i in range(length)
    )
    graph = ReasoningGraph(tuple(parents), tuple(answer), latent[: len(parents)], answer_node)
    return SimTrace(
        f"{id_prefix}{index}",
        f"synthetic question {index}",
        steps,
        labels,
        bool(solvable and final_attempt is not None),
        added_leaf=tuple(added),
        was_backtrack=tuple(backtracked),
        graph_converged_at=converged_at,
        solvable=solvable,
        visited=tuple(visited),
        graph=graph,
    )


def generate(config: SimConfig, split_tag: str = "train", start: int = 0, id_prefix: str = "sim-") -> TraceSet:
    """``config.n_traces`` i.i.d. traces; trace ``i`` depends only on ``(seed, start + i)``."""
    traces = tuple(_trace(config, start + i, id_prefix) for i in range(config.n_traces))
    return TraceSet(traces, config.embed_dim, split_tag)


def save_simulation(traces: TraceSet, path) -> Path:
    """Write the trace file plus a ground-truth JSON keyed by trace id; returns its path."""
    path = Path(path)
    save_traceset(traces, path)
    truth_path = path.with_name(path.name + ".truth.json")
    truth = {tr.id: tr.ground_truth() for tr in traces.traces if isinstance(tr, SimTrace)}
    truth_path.write_text(json.dumps(truth, sort_keys=True) + "\n", encoding="utf-8")
    return truth_path


# ---------------------------------------------------------------------------
# coverage


PROBES_FOR_MODE = {"correct": ("correct",), "consistent": ("consistent",), "novel_leaf": ("leaf", "novel")}


@dataclass(frozen=True)
class CoverageRow:
    epsilon: float
    delta: float
    repeats: int
    violations: int
    violation_fraction: float
    ci_low: float
    ci_high: float
    bound: float  # epsilon + two binomial standard errors
    mean_test_risk: float
    none_fraction: float
    mean_selected_lambda: float  # over repeats with a valid threshold; nan if none
    mean_stop_step: float
    mean_full_steps: float
    token_savings: float

    @property
    def passes(self) -> bool:
        return self.violation_fraction <= self.bound


@dataclass(frozen=True)
class CoverageReport:
    spec: RiskSpec
    rows: tuple
    test_risks: dict = field(default_factory=dict, compare=False)  # epsilon -> per-repeat risks


def clopper_pearson(k: int, n: int, level: float = 0.95):
    a = (1 - level) / 2
    lo = 0.0 if k == 0 else float(beta_dist.ppf(a, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1 - a, k + 1, n - k))
    return lo, hi


def repeat_seed(seed: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed, repeat]).generate_state(1, np.uint64)[0])


def fit_scorer(mode: str, train: TraceSet, pca_dim: int, hyper: ProbeHyper, window: int):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        pca = fit_pca_clamped(train.stacked_embeddings(), pca_dim)
    probes = {kind: train_probe(kind, train, pca, hyper) for kind in PROBES_FOR_MODE[mode]}
    return CombinedScorer(mode, probes, SmoothingSpec(window)), pca


def coverage_experiment(
    config: SimConfig,
    spec: RiskSpec,
    repeats: int,
    epsilons: Optional[Sequence[float]] = None,
    n_train: int = 500,
    n_cal: int = 450,
    n_test: int = 500,
    grid: Optional[LambdaGrid] = None,
    hyper: ProbeHyper = ProbeHyper(),
    pca_dim: int = DEFAULT_PCA_DIM,
    window: int = 10,
    progress=None,
) -> CoverageReport:
    """Violation frequency of the calibrated threshold over fresh data draws.

    Every repeat draws new train/calibration/test splits, fits PCA and probes
    on train, calibrates on calibration and measures the risk on test. All
    levels in ``epsilons`` (default: ``spec.epsilon``) share the same draws.
    """
    if repeats < 50:
        raise ValueError("coverage_experiment needs at least 50 repeats")
    grid = grid or LambdaGrid.default()
    epsilons = tuple(sorted(epsilons or (spec.epsilon,)))
    label_kind = RISK_LABEL[spec.mode]
    total = n_train + n_cal + n_test
    risks = {e: [] for e in epsilons}
    lambdas = {e: [] for e in epsilons}
    stop_steps = {e: [] for e in epsilons}
    stop_tokens = {e: [] for e in epsilons}
    full_steps, full_tokens = [], []

    for r in range(repeats):
        pool = generate(replace(config, seed=repeat_seed(config.seed, r), n_traces=total))
        train = pool.subset(range(n_train), "train")
        cal = pool.subset(range(n_train, n_train + n_cal), "calibration")
        test = pool.subset(range(n_train + n_cal, total), "test")
        scorer, pca = fit_scorer(spec.mode, train, pca_dim, hyper, window)
        scored_cal = score_set(cal, scorer, pca, label_kind)
        scored_test = score_set(test, scorer, pca, label_kind)
        cum_tokens = [np.cumsum(tr.token_counts) for tr in test.traces]
        full_steps.append(np.mean([len(tr) for tr in test.traces]))
        full_tokens.append(np.mean([c[-1] for c in cum_tokens]))
        for e in epsilons:
            result = calibrate_scored(scored_cal, grid, replace(spec, epsilon=e))
            losses, _ = loss_matrix(scored_test, [result.selected_lambda], spec.loss_form)
            risks[e].append(math.fsum(losses[:, 0]) / n_test)
            lambdas[e].append(result.selected_lambda)
            lam = np.inf if result.selected_lambda is None else result.selected_lambda
            pos = [int(np.searchsorted(np.maximum.accumulate(s), lam)) for s in scored_test.scores]
            pos = [min(p, len(s) - 1) for p, s in zip(pos, scored_test.scores)]
            stop_steps[e].append(np.mean(pos) + 1)
            stop_tokens[e].append(np.mean([c[p] for c, p in zip(cum_tokens, pos)]))
        if progress is not None:
            progress(r + 1, repeats)

    rows = []
    for e in epsilons:
        k = int(sum(v > spec.delta for v in risks[e]))
        lo, hi = clopper_pearson(k, repeats)
        valid = [v for v in lambdas[e] if v is not None]
        rows.append(CoverageRow(
            epsilon=e,
            delta=spec.delta,
            repeats=repeats,
            violations=k,
            violation_fraction=k / repeats,
            ci_low=lo,
            ci_high=hi,
            bound=e + 2.0 * math.sqrt(e * (1 - e) / repeats),
            mean_test_risk=float(np.mean(risks[e])),
            none_fraction=1.0 - len(valid) / repeats,
            mean_selected_lambda=float(np.mean(valid)) if valid else float("nan"),
            mean_stop_step=float(np.mean(stop_steps[e])),
            mean_full_steps=float(np.mean(full_steps)),
            token_savings=1.0 - float(np.mean(stop_tokens[e])) / float(np.mean(full_tokens)),
        ))
    return CoverageReport(spec, tuple(rows), {e: tuple(risks[e]) for e in epsilons})
