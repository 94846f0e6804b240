"""Trace data model, thought segmentation and the JSON-lines + binary sidecar format."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

SPLITS = ("train", "calibration", "test")

# label kind -> StepLabels attribute; the kind names double as the on-disk keys
LABEL_FIELDS = {
    "correct": "correct_if_stopped",
    "consistent": "consistent_with_final",
    "leaf": "is_leaf",
    "novel": "is_novel",
}

SIDECAR_MAGIC = b"TCAL"
SIDECAR_VERSION = 1
_SIDECAR_HEADER = struct.Struct("<4sIIQ")

_DELIM = "\n\n"
_KEYWORD = re.compile(r"\b(?:wait|but)\b", re.IGNORECASE)


class TraceFormatError(ValueError):
    """Raised for malformed or inconsistent trace data."""


class MissingLabelError(ValueError):
    """Raised when an operation needs a label that a step does not carry."""


@dataclass(frozen=True, eq=False)
class Step:
    index: int
    text: str
    embedding: np.ndarray
    token_count: int

    def __post_init__(self):
        if self.token_count < 0:
            raise TraceFormatError(f"negative token_count at step {self.index}")
        if self.text and self.token_count < 1:
            raise TraceFormatError(f"non-empty step {self.index} has token_count 0")


@dataclass(frozen=True)
class StepLabels:
    correct_if_stopped: Optional[bool] = None
    consistent_with_final: Optional[bool] = None
    is_leaf: Optional[bool] = None
    is_novel: Optional[bool] = None

    def get(self, kind: str) -> Optional[bool]:
        return getattr(self, LABEL_FIELDS[kind])


@dataclass(frozen=True, eq=False)
class Trace:
    """One question's thought trajectory with per-step embeddings and labels."""

    id: str
    question: str
    steps: tuple
    labels: tuple
    final_correct: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.steps:
            raise TraceFormatError(f"trace {self.id!r} has no steps")
        if len(self.labels) != len(self.steps):
            raise TraceFormatError(f"label/step length mismatch at id={self.id}")
        dim = self.steps[0].embedding.shape[0]
        for step in self.steps:
            if step.embedding.ndim != 1 or step.embedding.shape[0] != dim:
                raise TraceFormatError(f"embedding dimension mismatch within id={self.id}")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def dimension(self) -> int:
        return int(self.steps[0].embedding.shape[0])

    @property
    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.steps)

    @cached_property
    def embedding_matrix(self) -> np.ndarray:
        m = np.stack([s.embedding for s in self.steps]).astype(np.float32, copy=False)
        m.flags.writeable = False
        return m

    @cached_property
    def token_counts(self) -> np.ndarray:
        return np.array([s.token_count for s in self.steps], dtype=np.int64)

    def label_array(self, kind: str) -> np.ndarray:
        """Boolean vector of one label kind; fails on the first missing entry."""
        out = np.empty(len(self.steps), dtype=bool)
        for t, lab in enumerate(self.labels):
            value = lab.get(kind)
            if value is None:
                raise MissingLabelError(f"missing {kind!r} label at id={self.id} step={t}")
            out[t] = value
        return out

    def label_at(self, kind: str, t: int) -> bool:
        value = self.labels[t].get(kind)
        if value is None:
            raise MissingLabelError(f"missing {kind!r} label at id={self.id} step={t}")
        return value


@dataclass(frozen=True, eq=False)
class TraceSet:
    traces: tuple
    dimension: int
    split_tag: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))
        if self.split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}, got {self.split_tag!r}")
        seen = set()
        for tr in self.traces:
            if tr.id in seen:
                raise TraceFormatError(f"duplicate id {tr.id!r}")
            seen.add(tr.id)
            if tr.dimension != self.dimension:
                raise TraceFormatError(
                    f"dimension mismatch at id={tr.id}: {tr.dimension} != {self.dimension}"
                )

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __getitem__(self, i):
        return self.traces[i]

    def subset(self, indices: Iterable[int], split_tag: Optional[str] = None) -> "TraceSet":
        return TraceSet(
            tuple(self.traces[i] for i in indices),
            self.dimension,
            split_tag or self.split_tag,
        )

    def stacked_embeddings(self) -> np.ndarray:
        if not self.traces:
            return np.zeros((0, self.dimension), dtype=np.float32)
        return np.concatenate([tr.embedding_matrix for tr in self.traces])


def make_trace(
    trace_id: str,
    embeddings: np.ndarray,
    labels: Sequence[StepLabels],
    texts: Optional[Sequence[str]] = None,
    token_counts: Optional[Sequence[int]] = None,
    question: str = "",
    final_correct: Optional[bool] = None,
) -> Trace:
    """Convenience constructor from a (T, D) embedding matrix."""
    emb = np.asarray(embeddings, dtype=np.float32)
    n = emb.shape[0]
    texts = list(texts) if texts is not None else [""] * n
    counts = list(token_counts) if token_counts is not None else [1] * n
    steps = tuple(
        Step(i, texts[i], emb[i], int(counts[i])) for i in range(n)
    )
    return Trace(trace_id, question, steps, tuple(labels), final_correct)


# ---------------------------------------------------------------------------
# segmentation


def segment_thoughts(raw_text: str) -> list[str]:
    """Split a thought trajectory into steps at qualifying blank-line boundaries.

    A ``\\n\\n`` boundary is kept only when the section it closes contains the
    whole word "wait" or "but" (any case); other sections merge into the next.
    ``"\\n\\n".join(result) == raw_text`` always holds.
    """
    if not raw_text:
        raise ValueError("empty trace text")
    sections = raw_text.split(_DELIM)
    steps = []
    pending: list[str] = []
    for i, section in enumerate(sections):
        pending.append(section)
        last = i == len(sections) - 1
        # earlier pending sections already failed the test, so checking this one suffices
        if last or _KEYWORD.search(section):
            steps.append(_DELIM.join(pending))
            pending = []
    return steps


# ---------------------------------------------------------------------------
# serialization


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".emb")


def _label_record(lab: StepLabels) -> dict:
    return {kind: getattr(lab, attr) for kind, attr in LABEL_FIELDS.items()}


def save_traceset(traceset: TraceSet, path) -> None:
    """Write ``path`` (JSON lines) and ``path.emb`` (float32 sidecar)."""
    path = Path(path)
    dim = traceset.dimension
    blocks = []
    lines = []
    offset = 0
    for tr in traceset.traces:
        emb = tr.embedding_matrix
        if not np.all(np.isfinite(emb)):
            raise TraceFormatError(f"non-finite embedding at id={tr.id}")
        blocks.append(emb)
        steps = []
        for s in tr.steps:
            steps.append({"text": s.text, "token_count": s.token_count, "emb_off": offset})
            offset += 1
        record = {
            "id": tr.id,
            "question": tr.question,
            "dim": tr.dimension,
            "steps": steps,
            "labels": [_label_record(lab) for lab in tr.labels],
            "final_correct": tr.final_correct,
            "total_tokens": tr.total_tokens,
        }
        lines.append(json.dumps(record, ensure_ascii=False))

    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    with open(sidecar_path(path), "wb") as fh:
        fh.write(_SIDECAR_HEADER.pack(SIDECAR_MAGIC, SIDECAR_VERSION, dim, offset))
        for block in blocks:
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def read_sidecar(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _SIDECAR_HEADER.size:
        raise TraceFormatError(f"{path}: truncated sidecar header")
    magic, version, dim, count = _SIDECAR_HEADER.unpack_from(raw)
    if magic != SIDECAR_MAGIC:
        raise TraceFormatError(f"{path}: bad magic {magic!r}")
    if version != SIDECAR_VERSION:
        raise TraceFormatError(f"{path}: unsupported sidecar version {version}")
    body = raw[_SIDECAR_HEADER.size:]
    if len(body) != 4 * dim * count:
        raise TraceFormatError(f"{path}: expected {count}x{dim} floats, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float32)


def _opt_bool(value, where: str) -> Optional[bool]:
    if value is None or isinstance(value, bool):
        return value
    raise TraceFormatError(f"{where}: expected boolean or null, got {value!r}")


def _parse_record(record: dict, matrix: np.ndarray, lineno: int) -> Trace:
    where = f"line {lineno}"
    try:
        trace_id = str(record["id"])
        raw_steps = record["steps"]
        raw_labels = record["labels"]
    except (KeyError, TypeError) as exc:
        raise TraceFormatError(f"malformed record at {where}: missing {exc}") from None
    if len(raw_labels) != len(raw_steps):
        raise TraceFormatError(f"label/step length mismatch at id={trace_id}")
    steps = []
    for i, s in enumerate(raw_steps):
        try:
            off = int(s["emb_off"])
            count = int(s.get("token_count", 0))
            text = s.get("text", "")
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"malformed step {i} at {where}: {exc}") from None
        if not 0 <= off < matrix.shape[0]:
            raise TraceFormatError(f"emb_off {off} out of range at {where}")
        steps.append(Step(i, text, matrix[off], count))
    labels = []
    for i, lab in enumerate(raw_labels):
        if not isinstance(lab, dict):
            raise TraceFormatError(f"malformed label {i} at {where}")
        labels.append(StepLabels(**{
            attr: _opt_bool(lab.get(kind), f"{where} label {i}")
            for kind, attr in LABEL_FIELDS.items()
        }))
    trace = Trace(
        trace_id,
        record.get("question", "") or "",
        tuple(steps),
        tuple(labels),
        _opt_bool(record.get("final_correct"), where),
    )
    declared = record.get("total_tokens")
    if declared is not None and declared != trace.total_tokens:
        raise TraceFormatError(f"total_tokens mismatch at id={trace_id}")
    return trace


def load_traceset(path, split_tag: str = "train") -> TraceSet:
    path = Path(path)
    matrix = read_sidecar(sidecar_path(path))
    if not np.all(np.isfinite(matrix)):
        raise TraceFormatError(f"non-finite embedding in {sidecar_path(path)}")
    matrix.flags.writeable = False
    traces = []
    seen = set()
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"malformed record at line {lineno}: {exc.msg}") from None
            if not isinstance(record, dict):
                raise TraceFormatError(f"malformed record at line {lineno}")
            rec_dim = record.get("dim", matrix.shape[1])
            if dim is None:
                dim = rec_dim
            if rec_dim != dim or rec_dim != matrix.shape[1]:
                raise TraceFormatError(
                    f"dimension mismatch at id={record.get('id')}: {rec_dim} != {dim}"
                )
            trace = _parse_record(record, matrix, lineno)
            if trace.id in seen:
                raise TraceFormatError(f"duplicate id {trace.id!r} at line {lineno}")
            seen.add(trace.id)
            traces.append(trace)
    return TraceSet(tuple(traces), matrix.shape[1] if dim is None else dim, split_tag)
