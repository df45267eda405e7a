"""Dr.GRPO training loop with clipped surrogate updates on the simulator policy.

Randomness: every draw derives from the master seed through
``numpy.random.SeedSequence([seed, stream, update, group])`` with stream
``1`` for task selection and ``2`` for rollout uniforms, so any single update
or group can be regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from . import env as E
from .errors import ConfigError, PacrError
from .reward import (
    AdvantageAssignment,
    RolloutGroup,
    ShapingConfig,
    compute_advantages,
    terminal_reward,
)
from .trace import DEFAULT_ANSWER_PREFIX, consistency, evaluate_confidence

_TASK_STREAM = 1
_ROLLOUT_STREAM = 2

METRIC_COLUMNS = (
    "update",
    "mean_terminal_reward",
    "heldout_accuracy",
    "mean_consistency",
    "mean_abs_gain",
    "clip_fraction",
)


class NonFiniteGradientError(PacrError):
    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    suite: str = "medium"
    suite_seed: int = 0
    learning_rate: float = 4.0
    batch_size: int = 16
    total_updates: int = 120
    eval_every: int = 1
    seed: int = 0
    temperature: float = 1.0
    optimizer: str = "sgd"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    minibatches: int = 1
    answer_prefix: str = DEFAULT_ANSWER_PREFIX

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_updates < 0:
            raise ConfigError("total_updates must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if not 1 <= self.minibatches <= self.batch_size:
            raise ConfigError("minibatches must lie in 1..batch_size")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class TrainState:
    policy: E.PolicySnapshot
    old_policy: E.PolicySnapshot
    ref_policy: E.PolicySnapshot
    step_count: int = 0
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None
    metrics: list = field(default_factory=list)

    @classmethod
    def initial(cls, policy: E.PolicySnapshot) -> "TrainState":
        return cls(policy, policy, policy)


def derive_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, *keys]))


# ---------------------------------------------------------------- rollouts


def collect_group(
    task: E.TaskInstance,
    state: TrainState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    tables: Optional[E.PolicyTables] = None,
) -> RolloutGroup:
    """Sample N trajectories from the behaviour policy, score and reward them."""
    tb = tables if tables is not None else E.policy_tables(task, state.old_policy)
    n = cfg.shaping.group_size
    u = rng.random((n, task.horizon + task.answer_len))
    actions, lengths, digits = _kernels.sample_paths(tb.cdf_step, tb.cdf_ans, task.start, u)
    scorer = E.ExactScorer(task, state.old_policy, tb)
    trajs, rewards = [], []
    for i in range(n):
        traj = E.build_trajectory(task, actions[i, : lengths[i]].tolist(), digits[i].tolist(), cfg.answer_prefix)
        traj = traj.with_confidence(evaluate_confidence(traj, scorer))
        trajs.append(traj)
        rewards.append(terminal_reward(traj.predicted_answer, traj.gt_answer))
    group = RolloutGroup(task.question_id, tuple(trajs), np.array(rewards, dtype=np.float64))
    group.validate()
    return group


# ---------------------------------------------------------------- surrogate objective


@dataclass
class _PreparedTrajectory:
    task: E.TaskInstance
    tokens: E.TokenBatch
    step_seg: np.ndarray
    ans_seg: np.ndarray
    advantages: np.ndarray  # one per segment
    old_step_lp: np.ndarray
    old_ans_lp: np.ndarray


@dataclass
class PreparedBatch:
    items: list
    n_trajectories: int
    assignments: list

    @property
    def tasks(self):
        seen = {}
        for it in self.items:
            seen.setdefault(it.task.question_id, it.task)
        return list(seen.values())


def prepare_batch(
    groups: Sequence[RolloutGroup],
    tasks: Sequence[E.TaskInstance],
    old_policy: E.PolicySnapshot,
    shaping: ShapingConfig,
    assignments: Optional[Sequence[AdvantageAssignment]] = None,
) -> PreparedBatch:
    """Freeze advantages and behaviour log-probs for a batch of groups.

    Scalar advantages use one trajectory-level ratio; per-step advantages use
    one ratio per reasoning step (the answer span counts toward the last step).
    """
    items, assigns = [], []
    n_traj = 0
    for gi, (group, task) in enumerate(zip(groups, tasks)):
        assign = assignments[gi] if assignments is not None else compute_advantages(group, shaping)
        assigns.append(assign)
        old_tables = E.policy_tables(task, old_policy)
        for i, traj in enumerate(group.trajectories):
            tb = E.trajectory_tokens(task, traj)
            adv = assign.for_trajectory(i)
            if assign.per_step is not None and traj.degenerate:
                adv = np.array([shaping.lambda1 * assign.grpo[i]])
            if adv.size == 1:
                step_seg = np.zeros(tb.step_t.size, dtype=np.int64)
                ans_seg = np.zeros(tb.ans_v.size, dtype=np.int64)
            else:
                step_seg, ans_seg = tb.step_seg, tb.ans_seg
            old_step, old_ans = E.token_logprobs(old_tables, tb)
            items.append(_PreparedTrajectory(task, tb, step_seg, ans_seg, np.asarray(adv, dtype=np.float64), old_step, old_ans))
        n_traj += group.size
    return PreparedBatch(items, n_traj, assigns)


def _kl_and_grad(grad_ext, tables, ref_tables, policy, tb: E.TokenBatch, scale: float) -> float:
    """Exact per-visited-state KL(pi || ref) summed over tokens; adds scale * gradient."""
    inv_temp = 1.0 / policy.temperature
    total = 0.0
    if tb.step_t.size:
        lp = tables.logp_step[tb.step_t, tb.step_v]
        lq = ref_tables.logp_step[tb.step_t, tb.step_v]
        p = np.exp(lp)
        with np.errstate(invalid="ignore"):
            diff = np.where(p > 0, lp - lq, 0.0)
        kl = (p * diff).sum(axis=1)
        total += float(kl.sum())
        dz = p * (diff - kl[:, None])
        feat = tables.compiled.feat[tb.step_t, tb.step_v]  # [n, A, K]
        np.add.at(grad_ext, feat.ravel(), np.repeat((scale * inv_temp) * dz.ravel(), feat.shape[-1]))
    if tb.ans_v.size:
        lp = tables.logp_ans[tb.ans_v, tb.ans_l]
        lq = ref_tables.logp_ans[tb.ans_v, tb.ans_l]
        p = np.exp(lp)
        kl = (p * (lp - lq)).sum(axis=1)
        total += float(kl.sum())
        dig = tables.compiled.value_digits[tb.ans_v, tb.ans_l]
        rows = np.arange(tb.ans_v.size)
        dz = p[rows, dig] * (lp[rows, dig] - lq[rows, dig] - kl)
        grad_ext[E.PARAM_INDEX["answer/match"]] += scale * inv_temp * float(dz.sum())
    return total


def surrogate_objective(
    batch: PreparedBatch,
    policy: E.PolicySnapshot,
    shaping: ShapingConfig,
    ref_policy: Optional[E.PolicySnapshot] = None,
):
    """Clipped surrogate (token-sum, no length normalisation) and its exact gradient.

    Returns ``(objective, gradient, clip_fraction)``. The objective is averaged
    over trajectories in the batch (1/N per group, groups averaged).
    """
    eps = shaping.clip_eps
    scale = 1.0 / batch.n_trajectories
    tables = {t.question_id: E.policy_tables(t, policy) for t in batch.tasks}
    ref_tables = {}
    if shaping.kl_beta > 0:
        ref = ref_policy if ref_policy is not None else policy
        ref_tables = {t.question_id: E.policy_tables(t, ref) for t in batch.tasks}
    grad = np.zeros(E.NUM_PARAMS + 1)
    objective = 0.0
    n_seg = n_clipped = 0
    for it in batch.items:
        tb_new = tables[it.task.question_id]
        new_step, new_ans = E.token_logprobs(tb_new, it.tokens)
        nseg = it.advantages.size
        log_ratio = np.bincount(it.step_seg, new_step - it.old_step_lp, minlength=nseg)
        if it.ans_seg.size:
            log_ratio = log_ratio + np.bincount(it.ans_seg, new_ans - it.old_ans_lp, minlength=nseg)
        ratio = np.exp(log_ratio)
        adv = it.advantages
        clipped_ratio = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        objective += scale * float(np.minimum(ratio * adv, clipped_ratio * adv).sum())
        clipped = ((adv > 0) & (ratio > 1.0 + eps)) | ((adv < 0) & (ratio < 1.0 - eps))
        coef = np.where(clipped, 0.0, adv * ratio) * scale
        n_seg += nseg
        n_clipped += int(clipped.sum())
        E.accumulate_grad(grad, tb_new, policy, it.tokens, coef[it.step_seg], coef[it.ans_seg])
        if shaping.kl_beta > 0:
            kl = _kl_and_grad(grad, tb_new, ref_tables[it.task.question_id], policy, it.tokens, -shaping.kl_beta * scale)
            objective -= shaping.kl_beta * scale * kl
    return objective, grad[: E.NUM_PARAMS], (n_clipped / n_seg if n_seg else 0.0)


def _apply_step(state: TrainState, grad: np.ndarray, cfg: TrainConfig) -> E.PolicySnapshot:
    theta = state.policy.params
    if cfg.optimizer == "sgd":
        return state.policy.with_params(theta + cfg.learning_rate * grad)
    b1, b2 = cfg.adam_betas
    m = np.zeros_like(theta) if state.adam_m is None else state.adam_m
    v = np.zeros_like(theta) if state.adam_v is None else state.adam_v
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    state.adam_m, state.adam_v = m, v
    k = state.step_count + 1
    mhat = m / (1 - b1**k)
    vhat = v / (1 - b2**k)
    return state.policy.with_params(theta + cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps))


def surrogate_update(
    groups: Sequence[RolloutGroup],
    tasks: Sequence[E.TaskInstance],
    state: TrainState,
    cfg: TrainConfig,
) -> tuple[TrainState, float]:
    """One epoch of ascent on the clipped surrogate over the rollout batch.

    Returns the new state and the fraction of clipped ratio terms.
    """
    batch = prepare_batch(groups, tasks, state.old_policy, cfg.shaping)
    chunks = np.array_split(np.arange(len(groups)), cfg.minibatches)
    clip_fracs = []
    for chunk in chunks:
        if cfg.minibatches == 1:
            sub = batch
        else:
            sub = prepare_batch(
                [groups[i] for i in chunk], [tasks[i] for i in chunk], state.old_policy, cfg.shaping,
                [batch.assignments[i] for i in chunk],
            )
        _, grad, clip_frac = surrogate_objective(sub, state.policy, cfg.shaping, state.ref_policy)
        if not np.all(np.isfinite(grad)):
            dump = {
                "step_count": state.step_count,
                "params": state.policy.named(),
                "grad": [float(g) for g in grad],
                "questions": [g.question_id for g in groups],
            }
            raise NonFiniteGradientError(f"non-finite gradient at update {state.step_count + 1}", dump)
        new_policy = _apply_step(state, grad, cfg)
        state = replace(state, policy=new_policy, step_count=state.step_count + 1)
        clip_fracs.append(clip_frac)
    return state, float(np.mean(clip_fracs))


# ---------------------------------------------------------------- training


def heldout_accuracy(tasks: Sequence[E.TaskInstance], policy: E.PolicySnapshot) -> float:
    """Greedy-decode (temperature 0) accuracy."""
    if not tasks:
        return math.nan
    return float(np.mean([E.greedy_correct(E.policy_tables(t, policy)) for t in tasks]))


def train(suite: E.TaskSuite, cfg: TrainConfig, progress=None) -> list[dict]:
    """Run ``cfg.total_updates`` updates; returns one metrics row per update.

    The result is a pure function of (suite, cfg).
    """
    policy = suite.initial_policy(cfg.temperature)
    state = TrainState.initial(policy)
    train_tasks = suite.train
    n_tasks = len(train_tasks)
    for u in range(1, cfg.total_updates + 1):
        pick = derive_rng(cfg.seed, _TASK_STREAM, u).choice(n_tasks, size=cfg.batch_size, replace=cfg.batch_size > n_tasks)
        tasks = [train_tasks[int(j)] for j in pick]
        state.old_policy = state.policy
        groups = []
        for g, task in enumerate(tasks):
            groups.append(collect_group(task, state, cfg, derive_rng(cfg.seed, _ROLLOUT_STREAM, u, g)))
        state, clip_frac = surrogate_update(groups, tasks, state, cfg)

        rewards = np.concatenate([g.terminal_rewards for g in groups])
        trajs = [t for g in groups for t in g.trajectories if not t.degenerate]
        cons = [consistency(t.confidence) for t in trajs]
        gains = np.concatenate([t.confidence.gains for t in trajs]) if trajs else np.zeros(0)
        acc = heldout_accuracy(suite.heldout, state.policy) if (u % cfg.eval_every == 0 or u == cfg.total_updates) else math.nan
        row = {
            "update": u,
            "mean_terminal_reward": float(rewards.mean()),
            "heldout_accuracy": acc,
            "mean_consistency": float(np.mean(cons)) if cons else math.nan,
            "mean_abs_gain": float(np.abs(gains).mean()) if gains.size else math.nan,
            "clip_fraction": clip_frac,
        }
        state.metrics.append(row)
        if progress is not None:
            progress(row, state)
    return state.metrics


def train_with_state(suite: E.TaskSuite, cfg: TrainConfig):
    """Like :func:`train` but also returns the parameter vector after every update."""
    params = []
    rows = train(suite, cfg, progress=lambda row, st: params.append(st.policy.params.copy()))
    return rows, params
