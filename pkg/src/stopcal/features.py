"""Step featurization: PCA fit/projection and causal score smoothing."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_PCA_DIM = 256
DEFAULT_WINDOW = 10

PCA_MAGIC = b"TPCA"
PCA_VERSION = 1
_PCA_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (d, D), rows orthonormal
    explained_variance: np.ndarray

    @property
    def input_dim(self) -> int:
        return int(self.components.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.components.shape[0])


@dataclass(frozen=True)
class SmoothingSpec:
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")


def _round_robin(n: int):
    """Rounds of disjoint index pairs covering every pair exactly once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 64):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Pairs are visited in round-robin order so each round applies n/2 disjoint
    (commuting) rotations as one orthogonal matrix. Returns ``(eigenvalues,
    eigenvectors)`` with eigenvectors as columns, unsorted.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("jacobi_eigh needs a square matrix")
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n < 2 or scale == 0.0:
        return np.diag(a).copy(), v

    rounds = _round_robin(n)
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.linalg.norm(a[off_mask]) <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-18 * scale
            if not active.any():
                continue
            safe = np.where(active, apq, 1.0)
            theta = (a[q, q] - a[p, p]) / (2.0 * safe)
            big = np.abs(theta) > 1e150
            theta_sq = np.where(big, 0.0, theta) ** 2
            t = np.where(
                big,
                0.5 / np.where(big, theta, 1.0),
                np.copysign(1.0, theta) / (np.abs(theta) + np.sqrt(theta_sq + 1.0)),
            )
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            rot = np.eye(n)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a[p, q] = 0.0
            a[q, p] = 0.0
            v = v @ rot
        a = (a + a.T) / 2.0
    else:
        warnings.warn("jacobi_eigh did not converge", RuntimeWarning, stacklevel=2)
    return np.diag(a).copy(), v


def _fix_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for i, row in enumerate(out):
        if row[np.argmax(np.abs(row))] < 0:
            out[i] = -row
    return out


def fit_pca(embeddings: np.ndarray, d: int) -> PcaModel:
    """Fit the top-``d`` principal axes of the rows of ``embeddings``."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be an (N, D) matrix")
    n, dim = x.shape
    if n < 2:
        raise ValueError("fit_pca needs at least 2 rows")
    if not 1 <= d <= min(n - 1, dim):
        raise ValueError(f"target dimension {d} must lie in [1, min(N-1, D)] = [1, {min(n - 1, dim)}]")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    values, vectors = jacobi_eigh(cov)
    order = np.argsort(-values, kind="stable")[:d]
    components = _fix_signs(vectors[:, order].T)
    explained = np.clip(values[order], 0.0, None)
    return PcaModel(mean, np.ascontiguousarray(components), explained)


def fit_pca_clamped(embeddings: np.ndarray, d: int = DEFAULT_PCA_DIM) -> PcaModel:
    """``fit_pca`` with the target dimension clamped to what the data supports."""
    n, dim = np.shape(embeddings)
    usable = min(d, dim, n - 1)
    if usable < d:
        warnings.warn(f"PCA dimension clamped from {d} to {usable}", UserWarning, stacklevel=2)
    return fit_pca(embeddings, usable)


def project(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Map a length-D vector (or an (N, D) matrix of rows) into PCA coordinates."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"expected input dimension {model.input_dim}, got {x.shape[-1]}")
    return (x - model.mean) @ model.components.T


def reconstruct(model: PcaModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z @ model.components + model.mean


def smooth_scores(scores: Sequence[float], spec: SmoothingSpec = SmoothingSpec()) -> np.ndarray:
    """Trailing-window mean: ``out[t] = mean(scores[max(0, t-w+1) : t+1])``."""
    s = [float(v) for v in scores]
    if not s:
        raise ValueError("smooth_scores needs at least one score")
    if any(not 0.0 <= v <= 1.0 for v in s):
        raise ValueError("scores must lie in [0, 1]")
    w = spec.window
    out = np.empty(len(s))
    for t in range(len(s)):
        window = s[max(0, t - w + 1): t + 1]
        # fsum is order-independent, so the online monitor reproduces this bit-for-bit
        out[t] = math.fsum(window) / len(window)
    return out


def save_pca(model: PcaModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PCA_HEADER.pack(PCA_MAGIC, PCA_VERSION, model.input_dim, model.output_dim))
        fh.write(np.ascontiguousarray(model.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.components, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.explained_variance, dtype="<f8").tobytes())


def load_pca(path) -> PcaModel:
    raw = Path(path).read_bytes()
    magic, version, dim, d = _PCA_HEADER.unpack_from(raw)
    if magic != PCA_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != PCA_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw[_PCA_HEADER.size:], dtype="<f8")
    if body.size != dim + d * dim + d:
        raise ValueError(f"{path}: truncated PCA body")
    mean = body[:dim].copy()
    components = body[dim: dim + d * dim].reshape(d, dim).copy()
    explained = body[dim + d * dim:].copy()
    return PcaModel(mean, components, explained)
