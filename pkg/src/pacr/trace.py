"""Reasoning trajectories, step segmentation and ground-truth confidence series."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateTrajectoryError, NumericalDomainError

MIN_STEP_TOKENS = 5
DEFAULT_ANSWER_PREFIX = "So the final answer is \\boxed{"

# a boundary falls right after every newline and after every ". "
_BOUNDARY = re.compile(r"\n|\. ")


@dataclass(frozen=True)
class Token:
    id: int
    surface: str

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"token id must be non-negative, got {self.id}")
        if not self.surface:
            raise ValueError("token surface must be non-empty")


class WhitespaceTokenizer:
    """Splits on whitespace and assigns ids in order of first appearance.

    Each instance owns its vocabulary, so ids are only comparable between
    tokens produced by the same instance.
    """

    def __init__(self):
        self.vocab: dict[str, int] = {}

    def __len__(self):
        return len(self.vocab)

    def __call__(self, text: str) -> list[Token]:
        out = []
        for word in text.split():
            idx = self.vocab.setdefault(word, len(self.vocab))
            out.append(Token(idx, word))
        return out


@dataclass(frozen=True)
class ReasoningStep:
    tokens: tuple[Token, ...]
    raw_text: str
    # environment move that produced the step, when the step came from the simulator
    action: Optional[int] = None


@dataclass(frozen=True)
class StepConfidenceSeries:
    """``logp[k] = log p(Y_gt | q, H_<=k)`` for k = 0..T and the gains between them."""

    logp: np.ndarray
    gains: np.ndarray

    @classmethod
    def from_logp(cls, logp: Sequence[float]) -> "StepConfidenceSeries":
        arr = np.array(logp, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("logp must be a non-empty 1-d sequence")
        if np.isnan(arr).any():
            raise NumericalDomainError("NaN log-probability in confidence series")
        if (arr > 0).any():
            raise NumericalDomainError(f"positive log-probability {arr.max()!r}")
        arr.setflags(write=False)
        # two zero-confidence prefixes in a row: no change, not inf - inf
        with np.errstate(invalid="ignore"):
            gains = np.where(arr[1:] == arr[:-1], 0.0, np.diff(arr))
        gains.setflags(write=False)
        return cls(arr, gains)

    @property
    def num_steps(self) -> int:
        return self.gains.size

    def __eq__(self, other):
        if not isinstance(other, StepConfidenceSeries):
            return NotImplemented
        return np.array_equal(self.logp, other.logp)

    def __hash__(self):
        return hash(self.logp.tobytes())


@dataclass(frozen=True)
class Trajectory:
    question_id: str
    steps: tuple[ReasoningStep, ...]
    predicted_answer: tuple[Token, ...]
    gt_answer: tuple[Token, ...]
    confidence: Optional[StepConfidenceSeries] = None
    answered: bool = True
    raw_text: str = field(default="", compare=False)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def degenerate(self) -> bool:
        return len(self.steps) == 0

    def with_confidence(self, series: StepConfidenceSeries) -> "Trajectory":
        if series.logp.size != len(self.steps) + 1:
            raise ValueError(
                f"confidence has {series.logp.size} entries, expected {len(self.steps) + 1}"
            )
        return Trajectory(
            self.question_id,
            self.steps,
            self.predicted_answer,
            self.gt_answer,
            series,
            self.answered,
            self.raw_text,
        )


def split_fragments(raw_text: str) -> list[str]:
    """Cut ``raw_text`` after every newline and after every period-space pair."""
    pieces = []
    start = 0
    for m in _BOUNDARY.finditer(raw_text):
        pieces.append(raw_text[start : m.end()])
        start = m.end()
    if start < len(raw_text):
        pieces.append(raw_text[start:])
    return pieces


def segment(
    raw_text: str,
    tokenize: Optional[Callable[[str], list[Token]]] = None,
    min_tokens: int = MIN_STEP_TOKENS,
) -> list[ReasoningStep]:
    """Split a reasoning emission into steps.

    Fragments shorter than ``min_tokens`` are merged into the preceding step;
    short fragments before the first full step are carried forward into it.
    Joining the returned ``raw_text`` fields reproduces the input exactly.
    """
    if not raw_text:
        raise DegenerateTrajectoryError("empty reasoning emission")
    if tokenize is None:
        tokenize = WhitespaceTokenizer()

    # list of (text parts, tokens) per step; parts are joined once at the end
    steps: list[tuple[list[str], list[Token]]] = []
    pending_parts: list[str] = []
    pending_tokens: list[Token] = []
    for frag in split_fragments(raw_text):
        toks = tokenize(frag)
        if len(toks) >= min_tokens:
            steps.append((pending_parts + [frag], pending_tokens + toks))
            pending_parts, pending_tokens = [], []
        elif steps:
            steps[-1][0].append(frag)
            steps[-1][1].extend(toks)
        else:
            pending_parts.append(frag)
            pending_tokens.extend(toks)
    if pending_parts:
        # every fragment was short
        steps.append((pending_parts, pending_tokens))
    return [ReasoningStep(tuple(toks), "".join(parts)) for parts, toks in steps]


def evaluate_confidence(
    traj: Trajectory, scorer: Callable[[Sequence[ReasoningStep]], float]
) -> StepConfidenceSeries:
    """Score every prefix of ``traj`` (including the empty one) with ``scorer``."""
    logp = []
    for k in range(len(traj.steps) + 1):
        value = float(scorer(traj.steps[:k]))
        if math.isnan(value) or value > 0.0:
            raise NumericalDomainError(
                f"scorer returned {value!r} for prefix of length {k} ({traj.question_id})"
            )
        logp.append(value)
    return StepConfidenceSeries.from_logp(logp)


def consistency(series) -> float:
    """Fraction of steps with a strictly positive confidence gain.

    Accepts a :class:`StepConfidenceSeries` or a plain sequence of gains.
    """
    gains = np.asarray(getattr(series, "gains", series), dtype=np.float64)
    if gains.size == 0:
        raise DegenerateTrajectoryError("consistency of a trajectory with no steps")
    return float(np.count_nonzero(gains > 0.0)) / gains.size
