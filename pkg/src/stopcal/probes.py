"""Linear probes on step embeddings, combined exit scores and ranking metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .features import PcaModel, SmoothingSpec, project, smooth_scores
from .traces import LABEL_FIELDS, Trace, TraceSet

PROBE_KINDS = tuple(LABEL_FIELDS)
SCORER_MODES = ("correct", "consistent", "novel_leaf")


class DegenerateLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    class_balance: bool = True


@dataclass(frozen=True, eq=False)
class ProbeModel:
    kind: str
    weights: np.ndarray
    bias: float
    pca_ref: str = ""
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe kind {self.kind!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or not np.all(np.isfinite(w)):
            raise ValueError("probe weights must be a finite vector")
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return int(self.weights.shape[0])


@dataclass(frozen=True)
class CombinedScorer:
    mode: str
    probes: Mapping[str, ProbeModel]
    smoothing: SmoothingSpec = SmoothingSpec()

    def __post_init__(self):
        if self.mode not in SCORER_MODES:
            raise ValueError(f"unknown scorer mode {self.mode!r}")
        needed = {"leaf", "novel"} if self.mode == "novel_leaf" else {self.mode}
        missing = needed - set(self.probes)
        if missing:
            raise ValueError(f"mode {self.mode!r} requires probe(s) {sorted(missing)}")
        extra = set(self.probes) - needed
        if extra:
            raise ValueError(f"mode {self.mode!r} does not use probe(s) {sorted(extra)}")
        for kind, probe in self.probes.items():
            if probe.kind != kind:
                raise ValueError(f"probe registered as {kind!r} has kind {probe.kind!r}")


# ---------------------------------------------------------------------------
# training


def example_weights(y: np.ndarray, class_balance: bool) -> np.ndarray:
    n = y.shape[0]
    if not class_balance:
        return np.ones(n)
    n_pos = int(y.sum())
    return np.where(y, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))


def logistic_loss(w, b, x, y, sample_weight, l2) -> float:
    """Weighted mean logistic loss plus ``l2 * |w|^2 / 2``."""
    z = x @ w + b
    # log(1 + e^{-z}) for positives, log(1 + e^{z}) for negatives
    per_example = np.logaddexp(0.0, np.where(y, -z, z))
    return float(sample_weight @ per_example / sample_weight.sum() + 0.5 * l2 * (w @ w))


def logistic_gradient(w, b, x, y, sample_weight, l2):
    """Gradient of :func:`logistic_loss` as ``(grad_w, grad_b)``."""
    z = x @ w + b
    resid = sample_weight * (expit(z) - y) / sample_weight.sum()
    return x.T @ resid + l2 * w, float(resid.sum())


def fit_logistic(x, y, hyper: ProbeHyper = ProbeHyper()):
    """Full-batch gradient descent from ``w = 0, b = 0``.

    Returns ``(weights, bias, meta)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.shape[0]:
        raise DegenerateLabelsError("degenerate labels: need both positive and negative examples")
    v = example_weights(y, hyper.class_balance)
    yf = y.astype(np.float64)
    w = np.zeros(x.shape[1])
    b = 0.0
    initial_loss = logistic_loss(w, b, x, y, v, hyper.l2)
    for _ in range(hyper.epochs):
        gw, gb = logistic_gradient(w, b, x, yf, v, hyper.l2)
        w = w - hyper.lr * gw
        b = b - hyper.lr * gb
    final_loss = logistic_loss(w, b, x, y, v, hyper.l2)
    meta = {
        "epochs": hyper.epochs,
        "lr": hyper.lr,
        "l2": hyper.l2,
        "class_balance": hyper.class_balance,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "n_examples": int(y.shape[0]),
        "n_positive": n_pos,
    }
    return w, b, meta


def training_examples(kind: str, train: TraceSet, pca: PcaModel):
    x = project(pca, train.stacked_embeddings())
    y = np.concatenate([tr.label_array(kind) for tr in train.traces])
    return x, y


def train_probe(
    kind: str,
    train: TraceSet,
    pca: PcaModel,
    hyper: ProbeHyper = ProbeHyper(),
    pca_ref: str = "",
) -> ProbeModel:
    """Fit an l2-regularised logistic probe on every labelled training step."""
    if kind not in PROBE_KINDS:
        raise ValueError(f"unknown probe kind {kind!r}")
    if not len(train):
        raise ValueError("empty training set")
    x, y = training_examples(kind, train, pca)
    w, b, meta = fit_logistic(x, y, hyper)
    meta["train_auroc"] = auroc(x @ w + b, y)
    return ProbeModel(kind, w, b, pca_ref, meta)


# ---------------------------------------------------------------------------
# scoring


def score_step(probe: ProbeModel, embedding) -> float:
    """Probability for one PCA-projected step embedding."""
    x = np.asarray(embedding, dtype=np.float64)
    if x.shape != (probe.dim,):
        raise ValueError(f"expected projected dimension {probe.dim}, got {x.shape}")
    return float(expit(x @ probe.weights + probe.bias))


def _folded(probe: ProbeModel, pca: PcaModel):
    # w.(C(x - m)) + b == u.x + c with u = C^T w, c = b - u.m
    if probe.dim != pca.output_dim:
        raise ValueError(f"probe dimension {probe.dim} != PCA output dimension {pca.output_dim}")
    u = pca.components.T @ probe.weights
    return u, probe.bias - float(u @ pca.mean)


def _probabilities(probe: ProbeModel, pca: PcaModel, x: np.ndarray) -> np.ndarray:
    u, c = _folded(probe, pca)
    # row-wise elementwise product + contiguous reduction: each row's result is
    # independent of how many rows are scored together
    return expit((x * u).sum(axis=1) + c)


def raw_step_scores(scorer: CombinedScorer, pca: PcaModel, embeddings) -> np.ndarray:
    """Unsmoothed exit score for each row of an (N, D) embedding matrix."""
    x = np.ascontiguousarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != pca.input_dim:
        raise ValueError(f"expected (N, {pca.input_dim}) embeddings, got {x.shape}")
    if scorer.mode == "novel_leaf":
        p_leaf = _probabilities(scorer.probes["leaf"], pca, x)
        p_novel = _probabilities(scorer.probes["novel"], pca, x)
        return p_leaf * (1.0 - p_novel)
    return _probabilities(scorer.probes[scorer.mode], pca, x)


def score_trace(scorer: CombinedScorer, trace: Trace, pca: PcaModel) -> np.ndarray:
    """Smoothed exit score at every step of ``trace``."""
    if trace.dimension != pca.input_dim:
        raise ValueError(f"trace {trace.id} has dimension {trace.dimension}, PCA expects {pca.input_dim}")
    return smooth_scores(raw_step_scores(scorer, pca, trace.embedding_matrix), scorer.smoothing)


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("auroc needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# artifacts


def save_probe(probe: ProbeModel, path) -> None:
    doc = {
        "kind": probe.kind,
        "d": probe.dim,
        "weights": probe.weights.tolist(),
        "bias": probe.bias,
        "pca": probe.pca_ref,
        "hyperparameters": {k: probe.train_meta[k] for k in ("lr", "epochs", "l2", "class_balance")
                            if k in probe.train_meta},
        "metrics": {k: v for k, v in probe.train_meta.items()
                    if k not in ("lr", "epochs", "l2", "class_balance")},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_probe(path) -> ProbeModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    weights = np.array(doc["weights"], dtype=np.float64)
    if weights.shape[0] != doc.get("d", weights.shape[0]):
        raise ValueError(f"{path}: weight length does not match d")
    meta = dict(doc.get("hyperparameters", {}))
    meta.update(doc.get("metrics", {}))
    return ProbeModel(doc["kind"], weights, float(doc["bias"]), doc.get("pca", ""), meta)


def resolve_pca_path(probe_path, probe: ProbeModel) -> Optional[Path]:
    if not probe.pca_ref:
        return None
    ref = Path(probe.pca_ref)
    return ref if ref.is_absolute() else Path(probe_path).parent / ref
