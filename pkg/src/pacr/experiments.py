"""Desk-scale experiment helpers: simulator trajectory logs and multi-seed variant comparisons."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import _kernels
from . import env as E
from .analysis import LogStep, TrajectoryLogRecord
from .optimizer import TrainConfig, derive_rng, train, train_with_state
from .reward import terminal_reward

_LOG_STREAM = 3


def correct_chain(task: E.TaskInstance) -> list[int]:
    """Intermediate values of the intended computation, one per operation."""
    v, out = task.start, []
    for kind, c in task.ops:
        v = E.apply_op(kind, c, v, task.modulus)
        out.append(v)
    return out


def simulate_records(
    tasks: Sequence[E.TaskInstance],
    policy: E.PolicySnapshot,
    per_task: int = 8,
    seed: int = 0,
) -> list[TrajectoryLogRecord]:
    """Sample trajectories and log their exact ground-truth confidences.

    Correct trajectories are labelled coherent when every written value follows
    the intended chain and the answer is given right after the last operation;
    otherwise spurious (right answer, wrong reasoning).
    """
    records = []
    for ti, task in enumerate(tasks):
        tb = E.policy_tables(task, policy)
        u = derive_rng(seed, _LOG_STREAM, ti).random((per_task, task.horizon + task.answer_len))
        actions, lengths, digits = _kernels.sample_paths(tb.cdf_step, tb.cdf_ans, task.start, u)
        chain = correct_chain(task)
        lc = tb.log_confidence
        for i in range(per_task):
            moves = actions[i, : lengths[i]].tolist()
            traj = E.build_trajectory(task, moves, digits[i].tolist())
            correct = bool(terminal_reward(traj.predicted_answer, traj.gt_answer))
            label = "unlabeled"
            if correct:
                label = "coherent" if moves == chain else "spurious"
            steps = tuple(LogStep(s.raw_text, float(lc[t + 1, a])) for t, (s, a) in enumerate(zip(traj.steps, moves)))
            if not steps:
                continue
            records.append(
                TrajectoryLogRecord(
                    f"{task.question_id}#{i}", correct, steps, label, float(lc[0, task.start])
                )
            )
    return records


def mid_training_policy(suite: E.TaskSuite, cfg: TrainConfig, updates: int) -> E.PolicySnapshot:
    """Policy after ``updates`` training updates under ``cfg``."""
    _, params = train_with_state(suite, replace(cfg, total_updates=updates, eval_every=max(updates, 1)))
    policy = suite.initial_policy(cfg.temperature)
    return policy.with_params(params[-1]) if params else policy


def updates_to_fraction(curve: Sequence[float], frac: float = 0.9, tail: int = 5) -> int:
    """First update (1-based) whose accuracy reaches ``frac`` of the final level.

    The final level is the mean of the last ``tail`` evaluations, which damps
    single-evaluation noise at the end of the run.
    """
    c = np.asarray(curve, dtype=np.float64)
    final = c[-tail:].mean()
    return int(np.argmax(c >= frac * final)) + 1


def final_accuracy(curve: Sequence[float], tail: int = 5) -> float:
    return float(np.asarray(curve, dtype=np.float64)[-tail:].mean())


@dataclass
class VariantRuns:
    variant: str
    seeds: list
    curves: np.ndarray  # [seeds, updates] held-out accuracy

    @property
    def t90(self) -> np.ndarray:
        return np.array([updates_to_fraction(c) for c in self.curves])

    @property
    def finals(self) -> np.ndarray:
        return np.array([final_accuracy(c) for c in self.curves])

    def early_rate(self, window: int = 20) -> np.ndarray:
        """Mean accuracy gain per update over the first ``window`` updates."""
        start = self.curves[:, 0] if window > 1 else 0.0
        return (self.curves[:, window - 1] - start) / max(window - 1, 1)


def run_variant(suite: E.TaskSuite, variant: str, seeds: Sequence[int], base: Optional[TrainConfig] = None) -> VariantRuns:
    base = base or TrainConfig()
    curves = []
    for s in seeds:
        cfg = replace(base, shaping=replace(base.shaping, variant=variant), seed=int(s))
        curves.append([r["heldout_accuracy"] for r in train(suite, cfg)])
    return VariantRuns(variant, list(seeds), np.array(curves, dtype=np.float64))


def mean_ci(x, level: float = 0.95) -> tuple[float, float, float]:
    """Sample mean with a Student-t interval."""
    x = np.asarray(x, dtype=np.float64)
    m = float(x.mean())
    if x.size < 2 or np.all(x == x[0]):
        return m, m, m
    lo, hi = stats.t.interval(level, x.size - 1, loc=m, scale=stats.sem(x))
    return m, float(lo), float(hi)


def faster_than(a: np.ndarray, b: np.ndarray) -> float:
    """One-sided paired Wilcoxon p-value for ``a < b``; 1.0 when all pairs tie."""
    d = np.asarray(a) - np.asarray(b)
    if not np.any(d):
        return 1.0
    return float(stats.wilcoxon(a, b, alternative="less").pvalue)
