"""Online stop/continue decisions, one step embedding at a time."""

from __future__ import annotations

import math
import sys
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional

import numpy as np

from .features import PcaModel
from .probes import CombinedScorer, raw_step_scores

CONTINUE, STOP, AT_BUDGET = "continue", "stop", "at_budget"


class MonitorTerminated(RuntimeError):
    pass


@dataclass(frozen=True)
class StopDecision:
    step: int  # 1-based
    raw_score: float
    smoothed_score: float
    threshold: Optional[float]
    action: str


@dataclass
class MonitorState:
    scorer: CombinedScorer
    pca: PcaModel
    lam: Optional[float]
    token_ceiling: Optional[int] = None
    window_buffer: deque = field(init=False)
    step_count: int = 0
    tokens_used: int = 0
    stopped: bool = False
    stop_step: Optional[int] = None

    def __post_init__(self):
        self.window_buffer = deque(maxlen=self.scorer.smoothing.window)


def feed_step(
    state: MonitorState, embedding, budget_t: int, token_count: int = 0
) -> StopDecision:
    """Score one step and decide whether thinking ends here.

    ``stop`` wins over ``at_budget`` when both apply on the same step.
    """
    if state.stopped:
        raise MonitorTerminated("monitor already terminated")
    x = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    raw = float(raw_step_scores(state.scorer, state.pca, x)[0])
    state.window_buffer.append(raw)
    state.step_count += 1
    state.tokens_used += token_count
    # same summation as smooth_scores, so offline and online agree exactly
    smoothed = math.fsum(state.window_buffer) / len(state.window_buffer)

    if state.lam is not None and smoothed >= state.lam:
        action = STOP
    elif state.step_count >= budget_t or (
        state.token_ceiling is not None and state.tokens_used >= state.token_ceiling
    ):
        action = AT_BUDGET
    else:
        action = CONTINUE
    if action != CONTINUE:
        state.stopped = True
        state.stop_step = state.step_count
    return StopDecision(state.step_count, raw, smoothed, state.lam, action)


def run_stream(state: MonitorState, source: Iterable, budget_t: int):
    """Feed ``source`` until a terminal decision; returns ``(stop_step, decisions)``.

    Items are embeddings or ``(embedding, token_count)`` pairs. A source that
    runs out first is treated as having reached its budget on its last step.
    """
    items: Iterator = iter(source)
    try:
        nxt = next(items)
    except StopIteration:
        raise ValueError("empty stream") from None
    decisions = []
    while True:
        item = nxt
        try:
            nxt = next(items)
            budget = budget_t
        except StopIteration:
            nxt = None
            budget = min(budget_t, state.step_count + 1)
        if isinstance(item, tuple):
            embedding, tokens = item
        else:
            embedding, tokens = item, 0
        decision = feed_step(state, embedding, budget, tokens)
        decisions.append(decision)
        if state.stopped:
            return state.stop_step, decisions


# ---------------------------------------------------------------------------
# line protocol


def _tokens(stream: IO[str]) -> Iterator[str]:
    for line in stream:
        yield from line.split()


def serve(
    scorer: CombinedScorer,
    pca: PcaModel,
    lam: Optional[float],
    budget_t: int,
    stdin: IO[str] = sys.stdin,
    stdout: IO[str] = sys.stdout,
    token_ceiling: Optional[int] = None,
) -> None:
    """Answer ``STEP <id> <dim>`` frames with ``DECIDE <id> <step> <smoothed> <action>`` lines.

    Each id gets its own monitor. Raises ``ValueError`` on malformed input and
    ``MonitorTerminated`` for steps sent after a stream ended.
    """
    states: dict = {}
    tokens = _tokens(stdin)
    for word in tokens:
        if word != "STEP":
            raise ValueError(f"expected STEP, got {word!r}")
        try:
            stream_id = next(tokens)
            dim = int(next(tokens))
            values = [float(next(tokens)) for _ in range(dim)]
        except StopIteration:
            raise ValueError("truncated STEP frame") from None
        if dim != pca.input_dim:
            raise ValueError(f"stream {stream_id}: dimension {dim} != {pca.input_dim}")
        state = states.get(stream_id)
        if state is None:
            state = states[stream_id] = MonitorState(scorer, pca, lam, token_ceiling)
        d = feed_step(state, values, budget_t)
        stdout.write(f"DECIDE {stream_id} {d.step} {d.smoothed_score:.6f} {d.action}\n")
        stdout.flush()
