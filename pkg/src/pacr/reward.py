"""Terminal rewards and group-relative advantages (baseline, sparse and dense shaping)."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, MissingConfidenceError
from .trace import Trajectory, consistency

VARIANTS = ("baseline", "sparse", "dense-minmax", "dense-loo")


@dataclass(frozen=True)
class ShapingConfig:
    lambda1: float = 0.9
    lambda2: float = 0.1
    gamma: float = 1.0
    group_size: int = 8
    variant: str = "baseline"
    clip_eps: float = 0.2
    kl_beta: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be positive")
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be non-negative")

    @property
    def dense(self) -> bool:
        return self.variant.startswith("dense")


@dataclass(frozen=True)
class RolloutGroup:
    question_id: str
    trajectories: tuple[Trajectory, ...]
    terminal_rewards: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.terminal_rewards, dtype=np.float64)
        if r.shape != (len(self.trajectories),):
            raise ValueError("one terminal reward per trajectory is required")
        object.__setattr__(self, "terminal_rewards", r)

    @property
    def size(self) -> int:
        return len(self.trajectories)

    def validate(self) -> None:
        gt = {t.gt_answer for t in self.trajectories}
        if any(t.question_id != self.question_id for t in self.trajectories) or len(gt) > 1:
            raise ValueError(f"group {self.question_id} mixes questions")
        if not np.isin(self.terminal_rewards, (0.0, 1.0)).all():
            raise ValueError(f"group {self.question_id} has non-binary terminal rewards")


@dataclass(frozen=True)
class AdvantageAssignment:
    """Per-trajectory scalars (baseline/sparse) or per-step arrays (dense variants)."""

    variant: str
    scalar: Optional[np.ndarray] = None
    per_step: Optional[tuple[np.ndarray, ...]] = None
    grpo: Optional[np.ndarray] = None
    process: Optional[tuple[np.ndarray, ...]] = field(default=None, repr=False)

    def for_trajectory(self, i: int) -> np.ndarray:
        """Advantages of trajectory ``i`` as a 1-d array: one entry, or one per step."""
        if self.per_step is not None:
            return self.per_step[i]
        return self.scalar[i : i + 1]


# ---------------------------------------------------------------- answer equivalence

_BOXED = "\\boxed{"
_LEAD_PUNCT = "$,;:!?'\"`"
_TRAIL_PUNCT = ".,;:!?$'\"`"


def _unbox(s: str) -> str:
    i = s.rfind(_BOXED)
    if i < 0:
        return s
    depth, j = 1, i + len(_BOXED)
    start = j
    while j < len(s):
        if s[j] == "{":
            depth += 1
        elif s[j] == "}":
            depth -= 1
            if depth == 0:
                return s[start:j]
        j += 1
    return s[start:]


def normalize_answer(text: str) -> str:
    s = _unbox(text.strip())
    s = re.sub(r"\s+", "", s).casefold()
    return s.lstrip(_LEAD_PUNCT).rstrip(_TRAIL_PUNCT)


def _as_number(s: str) -> Optional[float]:
    try:
        if "/" in s:
            return float(Fraction(s))
        x = float(s)
    except (ValueError, ZeroDivisionError):
        return None
    return x if math.isfinite(x) else None


def is_equivalent(predicted: str, gt: str, atol: float = 1e-9) -> bool:
    a, b = normalize_answer(predicted), normalize_answer(gt)
    if a == b:
        return True
    x, y = _as_number(a), _as_number(b)
    return x is not None and y is not None and abs(x - y) <= atol


def _text(answer) -> str:
    if isinstance(answer, str):
        return answer
    return "".join(tok.surface for tok in answer)


def terminal_reward(predicted, gt) -> int:
    """1 if the predicted answer matches the ground truth after normalization, else 0."""
    return int(is_equivalent(_text(predicted), _text(gt)))


# ---------------------------------------------------------------- trajectory-level shaping


def sparse_consistency_reward(traj: Trajectory) -> float:
    if traj.degenerate:
        return 0.0
    if traj.confidence is None:
        raise MissingConfidenceError(f"{traj.question_id}: confidence not evaluated")
    return consistency(traj.confidence)


def _check_group(group: RolloutGroup) -> None:
    if group.size < 2:
        raise ConfigError(f"group {group.question_id} has {group.size} trajectories; need >= 2")


def baseline_advantages(group: RolloutGroup) -> AdvantageAssignment:
    r = group.terminal_rewards
    a = r - r.mean()
    return AdvantageAssignment("baseline", scalar=a, grpo=a)


def sparse_pacr_advantages(group: RolloutGroup, cfg: ShapingConfig) -> AdvantageAssignment:
    _check_group(group)
    c = np.array([sparse_consistency_reward(t) for t in group.trajectories])
    shaped = cfg.lambda1 * group.terminal_rewards + cfg.lambda2 * c
    return AdvantageAssignment("sparse", scalar=shaped - shaped.mean(), grpo=group.terminal_rewards - group.terminal_rewards.mean())


# ---------------------------------------------------------------- step-level shaping


def dense_returns(traj: Trajectory, gamma: float) -> np.ndarray:
    """Discounted suffix sums of the confidence gains, one per step."""
    if traj.confidence is None:
        raise MissingConfidenceError(f"{traj.question_id}: confidence not evaluated")
    gains = traj.confidence.gains
    out = np.empty_like(gains)
    acc = 0.0
    for k in range(gains.size - 1, -1, -1):
        acc = gains[k] + gamma * acc
        out[k] = acc
    return out


def _padded_returns(group: RolloutGroup, gamma: float):
    """Returns matrix with zeros for missing steps, plus the lengths.

    Degenerate (step-less) trajectories are excluded from the statistics.
    """
    lengths = np.array([t.num_steps for t in group.trajectories])
    included = np.flatnonzero(lengths > 0)
    width = int(lengths.max()) if lengths.size else 0
    G = np.zeros((group.size, width))
    for i in included:
        G[i, : lengths[i]] = dense_returns(group.trajectories[i], gamma)
    return G, lengths, included


def minmax_normalize(column: np.ndarray) -> np.ndarray:
    """Affine map of ``column`` onto [0, 1]; all zeros when it has no spread."""
    lo, hi = column.min(), column.max()
    if hi > lo:
        return (column - lo) / (hi - lo)
    return np.zeros_like(column)


def leave_one_out(column: np.ndarray) -> np.ndarray:
    """Each entry minus the mean of the other entries."""
    n = column.size
    if n < 2:
        raise ConfigError("leave-one-out baseline needs at least two entries")
    total = column.sum()
    return column - (total - column) / (n - 1)


def _combine(group: RolloutGroup, cfg: ShapingConfig, variant: str, process_fn) -> AdvantageAssignment:
    _check_group(group)
    r = group.terminal_rewards
    grpo = r - r.mean()
    G, lengths, included = _padded_returns(group, cfg.gamma)
    P = np.zeros_like(G)
    if included.size >= 2:
        for k in range(G.shape[1]):
            P[included, k] = process_fn(G[included, k])
    per_step, process = [], []
    for i in range(group.size):
        p = P[i, : lengths[i]]
        process.append(p)
        per_step.append(cfg.lambda1 * grpo[i] + cfg.lambda2 * p)
    return AdvantageAssignment(variant, per_step=tuple(per_step), grpo=grpo, process=tuple(process))


def dense_minmax_advantages(group: RolloutGroup, cfg: ShapingConfig) -> AdvantageAssignment:
    """Min-Max over each step column of returns; steps past a trajectory's end count as 0."""
    return _combine(group, cfg, "dense-minmax", minmax_normalize)


def dense_loo_advantages(group: RolloutGroup, cfg: ShapingConfig) -> AdvantageAssignment:
    """Leave-one-out centering per step column, with the same zero padding as Min-Max."""
    return _combine(group, cfg, "dense-loo", leave_one_out)


def compute_advantages(group: RolloutGroup, cfg: ShapingConfig) -> AdvantageAssignment:
    if cfg.variant == "baseline":
        _check_group(group)
        return baseline_advantages(group)
    if cfg.variant == "sparse":
        return sparse_pacr_advantages(group, cfg)
    if cfg.variant == "dense-minmax":
        return dense_minmax_advantages(group, cfg)
    return dense_loo_advantages(group, cfg)


def group_consistencies(trajs: Sequence[Trajectory]) -> list[float]:
    return [consistency(t.confidence) for t in trajs if not t.degenerate and t.confidence is not None]
