"""Chain-arithmetic reasoning tasks and a linear-softmax policy with exact oracles.

A task asks for the value of ``start`` after a chain of modular operations.
The policy writes one intermediate value per step, then emits an answer
marker followed by the base-``r`` digits of its final value. Because the
policy is Markov in ``(steps taken, current value)``, every quantity the
reward needs is computed exactly by dynamic programming over that grid:

* the probability of eventually answering ``Y_gt`` from any prefix,
* its per-digit conditionals (the answer-token factorisation),
* the answer-conditioned ("oracle") next-move distribution by Bayes inversion.

The move set at a prefix is the ``M`` value tokens plus ``STOP`` (the answer
marker). ``STOP`` is illegal before the first step and forced once
``horizon`` steps have been written, so every rollout answers.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax

from . import _kernels as K
from .errors import ConfigError, NullConditioningError, StructuralError, SupportError
from .trace import (
    DEFAULT_ANSWER_PREFIX,
    ReasoningStep,
    Token,
    Trajectory,
    WhitespaceTokenizer,
    segment,
)

SUITE_FORMAT = "pacr-suite"
SUITE_VERSION = 1

OP_KINDS = ("add", "sub", "mul")
OPERANDS = {"add": (1, 2, 3), "sub": (1, 2, 3), "mul": (2, 3, 5)}
_SYMBOL = {"add": "+", "sub": "-", "mul": "*"}


def _param_names():
    names = []
    for prefix in ("correct", "trap"):
        for kind in OP_KINDS:
            names += [f"{prefix}/{kind}/{c}" for c in OPERANDS[kind]]
    names += ["copy", "overrun", "stop/early", "stop/done", "stop/late", "answer/match"]
    return tuple(names)


PARAM_NAMES = _param_names()
PARAM_INDEX = {name: i for i, name in enumerate(PARAM_NAMES)}
NUM_PARAMS = len(PARAM_NAMES)
_PAD = NUM_PARAMS  # index of the always-zero padding slot
_MAX_ACTIVE = 4


def apply_op(kind: str, operand: int, value: int, modulus: int) -> int:
    if kind == "add":
        return (value + operand) % modulus
    if kind == "sub":
        return (value - operand) % modulus
    if kind == "mul":
        return (value * operand) % modulus
    raise ValueError(f"unknown op kind {kind!r}")


def distractor(kind: str, operand: int, value: int, modulus: int) -> Optional[int]:
    """The tempting wrong result of an op, or None when it equals the right one."""
    if kind == "add":
        wrong = (value + operand + 1) % modulus
    elif kind == "sub":
        wrong = (operand - value) % modulus
    else:
        wrong = (value + operand) % modulus
    return None if wrong == apply_op(kind, operand, value, modulus) else wrong


def answer_base(modulus: int, answer_len: int) -> int:
    """Smallest digit alphabet that writes every value in ``answer_len`` digits."""
    if modulus == 1:
        return 1
    r = 2
    while r**answer_len < modulus:
        r += 1
    return r


def to_digits(value: int, base: int, length: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        out.append(value % base)
        value //= base
    return tuple(reversed(out))


@dataclass(frozen=True)
class TaskInstance:
    question_id: str
    modulus: int
    horizon: int
    start: int
    ops: tuple[tuple[str, int], ...]
    traps: tuple[bool, ...]
    answer_len: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.modulus < 1:
            raise ConfigError("modulus must be >= 1")
        if not 1 <= len(self.ops) <= self.horizon:
            raise ConfigError(f"{self.question_id}: need 1..horizon ops, got {len(self.ops)}")
        if len(self.traps) != len(self.ops):
            raise ConfigError(f"{self.question_id}: traps and ops differ in length")
        if not 0 <= self.start < self.modulus:
            raise ConfigError(f"{self.question_id}: start outside 0..modulus-1")
        for kind, c in self.ops:
            if kind not in OPERANDS or c not in OPERANDS[kind]:
                raise ConfigError(f"{self.question_id}: unsupported op ({kind}, {c})")
        if self.answer_len < 1:
            raise ConfigError("answer_len must be >= 1")

    @property
    def num_ops(self) -> int:
        return len(self.ops)

    @property
    def base(self) -> int:
        return answer_base(self.modulus, self.answer_len)

    @functools.cached_property
    def gt_value(self) -> int:
        v = self.start
        for kind, c in self.ops:
            v = apply_op(kind, c, v, self.modulus)
        return v

    @property
    def gt_digits(self) -> tuple[int, ...]:
        return to_digits(self.gt_value, self.base, self.answer_len)

    @property
    def gt_answer(self) -> tuple[Token, ...]:
        return tuple(Token(d, str(d)) for d in self.gt_digits)

    @property
    def question_text(self) -> str:
        chain = ", then ".join(f"{kind} {c}" for kind, c in self.ops)
        return f"Start at {self.start}. Apply {chain}. Work modulo {self.modulus}."

    @property
    def question_tokens(self) -> tuple[Token, ...]:
        return tuple(WhitespaceTokenizer()(self.question_text))

    @property
    def state_space(self) -> list[tuple[int, int]]:
        """All (steps taken, current value) pairs; only ``(0, start)`` at depth 0."""
        return [(0, self.start)] + [(t, v) for t in range(1, self.horizon + 1) for v in range(self.modulus)]

    def to_json(self) -> dict:
        return {
            "question_id": self.question_id,
            "start": self.start,
            "ops": [[k, c] for k, c in self.ops],
            "traps": list(self.traps),
        }

    @classmethod
    def from_json(cls, d: dict, modulus: int, horizon: int, answer_len: int) -> "TaskInstance":
        return cls(
            question_id=str(d["question_id"]),
            modulus=modulus,
            horizon=horizon,
            start=int(d["start"]),
            ops=tuple((str(k), int(c)) for k, c in d["ops"]),
            traps=tuple(bool(x) for x in d["traps"]),
            answer_len=answer_len,
        )


# ---------------------------------------------------------------- suites

SUITE_PRESETS = {
    # name: modulus, horizon, answer_len, min ops, max ops, n_train, n_heldout, trap rate
    "trivial": (8, 1, 1, 1, 1, 16, 16, 0.0),
    "small": (8, 4, 1, 1, 3, 32, 32, 0.5),
    "medium": (16, 6, 2, 2, 5, 64, 64, 0.5),
    "large": (32, 8, 2, 3, 7, 64, 64, 0.5),
}

DEFAULT_INIT = {
    "correct": 3.0,
    "trap": 3.5,
    "copy": 0.5,
    "overrun": 0.0,
    "stop/early": -1.0,
    "stop/done": 1.5,
    "stop/late": 0.5,
    "answer/match": 2.5,
}


def default_init_params() -> dict[str, float]:
    out = {}
    for name in PARAM_NAMES:
        head = name.split("/")[0]
        out[name] = DEFAULT_INIT.get(name, DEFAULT_INIT.get(head, 0.0))
    return out


@dataclass(frozen=True)
class TaskSuite:
    name: str
    modulus: int
    horizon: int
    answer_len: int
    trap_rate: float
    init_params: dict = field(hash=False)
    train: tuple[TaskInstance, ...] = ()
    heldout: tuple[TaskInstance, ...] = ()

    @property
    def tasks(self) -> tuple[TaskInstance, ...]:
        return self.train + self.heldout

    def initial_policy(self, temperature: float = 1.0) -> "PolicySnapshot":
        theta = np.array([float(self.init_params[n]) for n in PARAM_NAMES])
        return PolicySnapshot(theta, temperature)

    def to_json(self) -> dict:
        return {
            "format": SUITE_FORMAT,
            "version": SUITE_VERSION,
            "name": self.name,
            "modulus": self.modulus,
            "horizon": self.horizon,
            "answer_len": self.answer_len,
            "trap_rate": self.trap_rate,
            "init_params": {n: float(self.init_params[n]) for n in PARAM_NAMES},
            "train": [t.to_json() for t in self.train],
            "heldout": [t.to_json() for t in self.heldout],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TaskSuite":
        if d.get("format") != SUITE_FORMAT or d.get("version") != SUITE_VERSION:
            raise ConfigError(f"not a {SUITE_FORMAT} v{SUITE_VERSION} document")
        missing = [n for n in PARAM_NAMES if n not in d["init_params"]]
        if missing:
            raise ConfigError(f"init_params missing {missing}")
        m, h, ln = int(d["modulus"]), int(d["horizon"]), int(d["answer_len"])
        return cls(
            name=str(d["name"]),
            modulus=m,
            horizon=h,
            answer_len=ln,
            trap_rate=float(d["trap_rate"]),
            init_params={n: float(d["init_params"][n]) for n in PARAM_NAMES},
            train=tuple(TaskInstance.from_json(t, m, h, ln) for t in d["train"]),
            heldout=tuple(TaskInstance.from_json(t, m, h, ln) for t in d["heldout"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TaskSuite":
        return cls.from_json(json.loads(Path(path).read_text()))


def make_suite(name: str, seed: int = 0, trap_rate: Optional[float] = None) -> TaskSuite:
    """Deterministically generate one of the preset suites."""
    if name not in SUITE_PRESETS:
        raise ConfigError(f"unknown suite {name!r}; choose from {sorted(SUITE_PRESETS)}")
    modulus, horizon, answer_len, lo, hi, n_train, n_heldout, rate = SUITE_PRESETS[name]
    if trap_rate is not None:
        rate = trap_rate
    rng = np.random.default_rng([seed, 7919])

    def draw(split, i):
        n_ops = int(rng.integers(lo, hi + 1))
        ops, traps = [], []
        v = int(rng.integers(modulus))
        start = v
        for _ in range(n_ops):
            kind = OP_KINDS[int(rng.integers(len(OP_KINDS)))]
            c = OPERANDS[kind][int(rng.integers(3))]
            ops.append((kind, c))
            traps.append(bool(rng.random() < rate))
        return TaskInstance(f"{name}-{split}-{i:04d}", modulus, horizon, start, tuple(ops), tuple(traps), answer_len)

    train = tuple(draw("train", i) for i in range(n_train))
    heldout = tuple(draw("heldout", i) for i in range(n_heldout))
    return TaskSuite(name, modulus, horizon, answer_len, rate, default_init_params(), train, heldout)


# ---------------------------------------------------------------- compiled feature tables


@dataclass(frozen=True)
class CompiledTask:
    task: TaskInstance
    feat: np.ndarray  # int [H+1, M, A, K]
    legal: np.ndarray  # bool [H+1, M, A]
    value_digits: np.ndarray  # int [M, L]
    gt_digits: np.ndarray  # int [L]

    @property
    def stop(self) -> int:
        return self.task.modulus


@functools.lru_cache(maxsize=4096)
def compile_task(task: TaskInstance) -> CompiledTask:
    H, M = task.horizon, task.modulus
    A = M + 1
    feat = np.full((H + 1, M, A, _MAX_ACTIVE), _PAD, dtype=np.int64)
    legal = np.zeros((H + 1, M, A), dtype=bool)
    m = task.num_ops
    for t in range(H + 1):
        for v in range(M):
            if t == H:
                legal[t, v, M] = True
                continue
            legal[t, v, :M] = True
            legal[t, v, M] = t >= 1
            if t < m:
                kind, c = task.ops[t]
                right = apply_op(kind, c, v, M)
                wrong = distractor(kind, c, v, M) if task.traps[t] else None
            for x in range(M):
                active = []
                if t < m:
                    if x == right:
                        active.append(PARAM_INDEX[f"correct/{kind}/{c}"])
                    if wrong is not None and x == wrong:
                        active.append(PARAM_INDEX[f"trap/{kind}/{c}"])
                else:
                    active.append(PARAM_INDEX["overrun"])
                if x == v:
                    active.append(PARAM_INDEX["copy"])
                feat[t, v, x, : len(active)] = active
            if t >= 1:
                name = "stop/early" if t < m else ("stop/done" if t == m else "stop/late")
                feat[t, v, M, 0] = PARAM_INDEX[name]
    base = task.base
    value_digits = np.array([to_digits(v, base, task.answer_len) for v in range(M)], dtype=np.int64)
    for arr in (feat, legal, value_digits):
        arr.setflags(write=False)
    gt = np.array(task.gt_digits, dtype=np.int64)
    gt.setflags(write=False)
    return CompiledTask(task, feat, legal, value_digits, gt)


# ---------------------------------------------------------------- policy


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    """Immutable parameter vector of the linear-softmax policy."""

    params: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64)
        if p.shape != (NUM_PARAMS,):
            raise ConfigError(f"expected {NUM_PARAMS} parameters, got shape {p.shape}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def with_params(self, params) -> "PolicySnapshot":
        return PolicySnapshot(params, self.temperature)

    def named(self) -> dict[str, float]:
        return {n: float(x) for n, x in zip(PARAM_NAMES, self.params)}

    def features(self, task: TaskInstance, t: int, v: int, action: int) -> np.ndarray:
        """Dense feature vector of a step move (``action == modulus`` is STOP)."""
        ct = compile_task(task)
        phi = np.zeros(NUM_PARAMS + 1)
        for k in ct.feat[t, v, action]:
            phi[k] += 1.0
        return phi[:NUM_PARAMS]


def _log_softmax_masked(logits, legal):
    z = np.where(legal, logits, -np.inf)
    mx = z.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        shifted = z - mx
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


@dataclass(frozen=True, eq=False)
class PolicyTables:
    """Exact distributions of one policy on one task."""

    compiled: CompiledTask
    logp_step: np.ndarray  # [H+1, M, A], -inf for illegal moves
    prob_step: np.ndarray
    cdf_step: np.ndarray
    logp_ans: np.ndarray  # [M, L, r]
    cdf_ans: np.ndarray
    ans_cum: np.ndarray  # [L+1, M]
    Q: np.ndarray  # [L+1, H+1, M]

    @property
    def task(self) -> TaskInstance:
        return self.compiled.task

    @functools.cached_property
    def log_confidence(self) -> np.ndarray:
        """log P(answer == Y_gt | t, v) over the (t, v) grid."""
        with np.errstate(divide="ignore"):
            return np.minimum(np.log(self.Q[-1]), 0.0)


def _cdf(prob, legal):
    c = np.cumsum(prob, axis=-1)
    # pin the top of each row so u in [0, 1) always lands on a legal move
    last = legal.shape[-1] - 1 - np.argmax(legal[..., ::-1], axis=-1)
    cols = np.arange(legal.shape[-1])
    c[cols >= last[..., None]] = 1.0
    return c


def policy_tables(task: TaskInstance, policy: PolicySnapshot) -> PolicyTables:
    ct = compile_task(task)
    inv_temp = 1.0 / policy.temperature
    theta_ext = np.append(policy.params, 0.0)
    logits = K.step_logits(theta_ext, ct.feat, inv_temp)
    logp_step = _log_softmax_masked(logits, ct.legal)
    prob_step = np.exp(logp_step)

    r = task.base
    match = policy.params[PARAM_INDEX["answer/match"]] * inv_temp
    ans_logits = np.where(np.arange(r)[None, None, :] == ct.value_digits[:, :, None], match, 0.0)
    logp_ans = log_softmax(ans_logits, axis=-1)
    prob_ans = np.exp(logp_ans)
    cdf_ans = np.cumsum(prob_ans, axis=-1)
    cdf_ans[..., -1] = 1.0

    L = task.answer_len
    gt_lp = logp_ans[:, np.arange(L), ct.gt_digits]  # [M, L]
    ans_cum = np.ones((L + 1, task.modulus))
    ans_cum[1:] = np.exp(np.cumsum(gt_lp, axis=1)).T
    Q = K.value_dp(prob_step, ans_cum)
    return PolicyTables(ct, logp_step, prob_step, _cdf(prob_step, ct.legal), logp_ans, cdf_ans, ans_cum, Q)


# ---------------------------------------------------------------- prefixes and scoring


def prefix_state(task: TaskInstance, prefix: Sequence[ReasoningStep]) -> tuple[int, int]:
    """Map a step prefix to its (steps taken, current value) state."""
    if len(prefix) > task.horizon:
        raise StructuralError(f"prefix of {len(prefix)} steps exceeds horizon {task.horizon}")
    v = task.start
    for k, step in enumerate(prefix):
        a = step.action
        if a is None or not 0 <= a < task.modulus:
            raise StructuralError(f"step {k + 1} does not carry a legal value move (action={a!r})")
        v = a
    return len(prefix), v


def answer_token_conditionals(tables: PolicyTables, prefix: Sequence[ReasoningStep]) -> np.ndarray:
    """log p(y^l | q, prefix, answer marker, y^<l) for each ground-truth digit l."""
    t, v = prefix_state(tables.task, prefix)
    q = tables.Q[:, t, v]
    with np.errstate(divide="ignore"):
        return np.log(q[1:]) - np.log(q[:-1])


class ExactScorer:
    """Callable prefix -> log p(Y_gt | q, prefix), backed by one DP table."""

    def __init__(self, task: TaskInstance, policy: PolicySnapshot, tables: Optional[PolicyTables] = None):
        self.task = task
        self.policy = policy
        self.tables = tables if tables is not None else policy_tables(task, policy)

    def __call__(self, prefix: Sequence[ReasoningStep]) -> float:
        lp = float(answer_token_conditionals(self.tables, prefix).sum())
        # summed conditionals can exceed 0 by roundoff when the answer is certain
        return min(lp, 0.0)


def enumerate_answer_prob(task: TaskInstance, policy: PolicySnapshot, prefix: Sequence[ReasoningStep]) -> float:
    return ExactScorer(task, policy)(prefix)


def step_move_labels(task: TaskInstance) -> list[str]:
    return [str(x) for x in range(task.modulus)] + ["STOP"]


def oracle_step_distribution(
    task: TaskInstance,
    policy: PolicySnapshot,
    prefix: Sequence[ReasoningStep],
    tables: Optional[PolicyTables] = None,
) -> np.ndarray:
    """Next-move distribution conditioned on the answer being ``Y_gt``.

    Index ``x < modulus`` writes value ``x``; index ``modulus`` is STOP.
    """
    tb = tables if tables is not None else policy_tables(task, policy)
    t, v = prefix_state(task, prefix)
    if t >= task.horizon:
        raise StructuralError("no step can follow a prefix at the horizon")
    base = tb.prob_step[t, v]
    nxt = np.append(tb.Q[-1, t + 1, :], tb.ans_cum[-1, v])
    joint = base * nxt
    z = joint.sum()
    if z <= 0.0:
        raise NullConditioningError(f"{task.question_id}: P(Y_gt | prefix) = 0 at state {(t, v)}")
    return joint / z


def base_step_distribution(task: TaskInstance, policy: PolicySnapshot, prefix: Sequence[ReasoningStep]) -> np.ndarray:
    t, v = prefix_state(task, prefix)
    return policy_tables(task, policy).prob_step[t, v].copy()


def step_gains(task: TaskInstance, policy: PolicySnapshot, prefix: Sequence[ReasoningStep], tables=None) -> np.ndarray:
    """C_k for every candidate next move after ``prefix``."""
    tb = tables if tables is not None else policy_tables(task, policy)
    t, v = prefix_state(task, prefix)
    lc = tb.log_confidence
    nxt = np.append(lc[t + 1, :], np.log(tb.ans_cum[-1, v]))
    return nxt - lc[t, v]


# ---------------------------------------------------------------- rollouts


def render_step(task: TaskInstance, t: int, v: int, x: int) -> str:
    if t < task.num_ops:
        kind, c = task.ops[t]
        return f"Step {t + 1}: {v} {_SYMBOL[kind]} {c} gives {x}.\n"
    return f"Step {t + 1}: nothing left, write {x}.\n"


def rollout_uniforms(task: TaskInstance, rng_seed: int) -> np.ndarray:
    return np.random.default_rng(rng_seed).random(task.horizon + task.answer_len)


def build_trajectory(task: TaskInstance, actions: Sequence[int], digits: Sequence[int], answer_prefix: str = DEFAULT_ANSWER_PREFIX) -> Trajectory:
    """Render simulator moves as text, segment it and attach the moves to the steps."""
    v = task.start
    lines = []
    for t, x in enumerate(actions):
        lines.append(render_step(task, t, v, x))
        v = x
    raw = "".join(lines)
    tok = WhitespaceTokenizer()
    steps = segment(raw, tok) if raw else []
    if len(steps) != len(actions):
        raise StructuralError(f"rendered {len(actions)} moves but segmented {len(steps)} steps")
    steps = tuple(ReasoningStep(s.tokens, s.raw_text, int(a)) for s, a in zip(steps, actions))
    answer = tuple(Token(int(d), str(int(d))) for d in digits)
    text = raw + answer_prefix + "".join(t.surface for t in answer) + "}"
    return Trajectory(task.question_id, steps, answer, task.gt_answer, None, True, text)


def sample_moves(tables: PolicyTables, seeds: Sequence[int]):
    task = tables.task
    u = np.stack([rollout_uniforms(task, s) for s in seeds]) if len(seeds) else np.zeros((0, task.horizon + task.answer_len))
    return K.sample_paths(tables.cdf_step, tables.cdf_ans, task.start, u)


def rollout(
    task: TaskInstance,
    policy: PolicySnapshot,
    rng_seed: int,
    tables: Optional[PolicyTables] = None,
    answer_prefix: str = DEFAULT_ANSWER_PREFIX,
) -> Trajectory:
    """Sample one trajectory; a pure function of (task, params, temperature, seed)."""
    tb = tables if tables is not None else policy_tables(task, policy)
    actions, lengths, digits = sample_moves(tb, [rng_seed])
    return build_trajectory(task, actions[0, : lengths[0]].tolist(), digits[0].tolist(), answer_prefix)


def rollout_many(task, policy, seeds, tables=None, answer_prefix=DEFAULT_ANSWER_PREFIX) -> list[Trajectory]:
    tb = tables if tables is not None else policy_tables(task, policy)
    actions, lengths, digits = sample_moves(tb, list(seeds))
    return [
        build_trajectory(task, actions[i, : lengths[i]].tolist(), digits[i].tolist(), answer_prefix)
        for i in range(len(seeds))
    ]


def greedy_moves(tables: PolicyTables) -> tuple[list[int], list[int]]:
    """Temperature-0 decode; ties go to the lowest move index."""
    task = tables.task
    v, actions = task.start, []
    for t in range(task.horizon):
        a = int(np.argmax(tables.logp_step[t, v]))
        if a == task.modulus:
            break
        actions.append(a)
        v = a
    digits = [int(np.argmax(tables.logp_ans[v, l])) for l in range(task.answer_len)]
    return actions, digits


def greedy_correct(tables: PolicyTables) -> bool:
    _, digits = greedy_moves(tables)
    return tuple(digits) == tables.task.gt_digits


# ---------------------------------------------------------------- log-probabilities and gradients


@dataclass(frozen=True)
class TokenBatch:
    """Flattened policy tokens of one trajectory.

    Step tokens (value writes and STOP) index ``prob_step[t, v, a]``; answer
    tokens index ``logp_ans[v, l, d]``. ``segment`` gives the reasoning step
    each token is credited to (answer marker and digits go to the last step).
    """

    step_t: np.ndarray
    step_v: np.ndarray
    step_a: np.ndarray
    step_seg: np.ndarray
    ans_v: np.ndarray
    ans_l: np.ndarray
    ans_d: np.ndarray
    ans_seg: np.ndarray
    num_segments: int


def trajectory_tokens(task: TaskInstance, traj: Trajectory) -> TokenBatch:
    t_, v_, a_, s_ = [], [], [], []
    v = task.start
    T = traj.num_steps
    if T > task.horizon:
        raise StructuralError("trajectory longer than horizon")
    for k, step in enumerate(traj.steps):
        if step.action is None or not 0 <= step.action < task.modulus:
            raise StructuralError(f"step {k + 1} has no legal value move")
        t_.append(k), v_.append(v), a_.append(step.action), s_.append(k)
        v = step.action
    last = max(T - 1, 0)
    av, al, ad, aseg = [], [], [], []
    if traj.answered:
        if T < task.horizon:
            t_.append(T), v_.append(v), a_.append(task.modulus), s_.append(last)
        if len(traj.predicted_answer) != task.answer_len:
            raise StructuralError("answer length does not match the task")
        for l, tok in enumerate(traj.predicted_answer):
            av.append(v), al.append(l), ad.append(tok.id), aseg.append(last)
    i64 = lambda x: np.array(x, dtype=np.int64)
    return TokenBatch(i64(t_), i64(v_), i64(a_), i64(s_), i64(av), i64(al), i64(ad), i64(aseg), max(T, 1))


def token_logprobs(tables: PolicyTables, tb: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    step_lp = tables.logp_step[tb.step_t, tb.step_v, tb.step_a]
    ans_lp = tables.logp_ans[tb.ans_v, tb.ans_l, tb.ans_d]
    return step_lp, ans_lp


def accumulate_grad(grad_ext, tables, policy, tb: TokenBatch, step_w, ans_w) -> None:
    """Add sum_i w_i * grad log pi(token_i) into ``grad_ext`` (length NUM_PARAMS + 1)."""
    inv_temp = 1.0 / policy.temperature
    if tb.step_t.size:
        K.accumulate_step_grad(
            grad_ext, tables.compiled.feat, tables.prob_step, tb.step_t, tb.step_v, tb.step_a,
            np.ascontiguousarray(step_w, dtype=np.float64), inv_temp,
        )
    if tb.ans_v.size:
        digits = tables.compiled.value_digits[tb.ans_v, tb.ans_l]
        p_match = np.exp(tables.logp_ans[tb.ans_v, tb.ans_l, digits])
        ind = (tb.ans_d == digits).astype(np.float64)
        grad_ext[PARAM_INDEX["answer/match"]] += float(np.sum(ans_w * (ind - p_match))) * inv_temp


def policy_logprob_and_grad(policy: PolicySnapshot, task: TaskInstance, traj: Trajectory, tables=None):
    """Exact ``log pi(traj | q)`` and its gradient with respect to the parameters."""
    tbl = tables if tables is not None else policy_tables(task, policy)
    tb = trajectory_tokens(task, traj)
    step_lp, ans_lp = token_logprobs(tbl, tb)
    total = float(step_lp.sum() + ans_lp.sum())
    if not math.isfinite(total):
        raise SupportError(f"{traj.question_id}: trajectory has a zero-probability token")
    grad = np.zeros(NUM_PARAMS + 1)
    accumulate_grad(grad, tbl, policy, tb, np.ones(tb.step_t.size), np.ones(tb.ans_v.size))
    return total, grad[:NUM_PARAMS]


# ---------------------------------------------------------------- oracle-gain identity


@dataclass
class PropositionReport:
    checked: int
    max_abs_diff: float
    min_expected_gain: float
    worst: Optional[tuple] = None  # (question_id, state, draw) with the largest violation
    failures: list = field(default_factory=list)

    def passed(self, tol: float = 1e-9, floor: float = -1e-12) -> bool:
        return self.max_abs_diff <= tol and self.min_expected_gain >= floor


def verify_oracle_gain(
    tasks: Sequence[TaskInstance],
    trials: int = 200,
    seed: int = 0,
    scale: float = 2.0,
    tol: float = 1e-9,
    floor: float = -1e-12,
    break_bayes: bool = False,
) -> PropositionReport:
    """Check E_oracle[C_k] == KL(oracle || base) >= 0 at every reachable prefix.

    Policies are drawn as ``theta ~ N(0, scale^2)``. ``break_bayes`` swaps the
    oracle for the unconditioned policy (a fault-injection hook for tests).
    """
    rng = np.random.default_rng([seed, 104729])
    report = PropositionReport(0, 0.0, math.inf)
    for draw in range(trials):
        policy = PolicySnapshot(rng.normal(0.0, scale, NUM_PARAMS))
        for task in tasks:
            tb = policy_tables(task, policy)
            if break_bayes:
                gain, kl = _unconditioned_gain_kl(tb)
            else:
                gain, kl = K.oracle_gain_kl(tb.prob_step, tb.Q, tb.ans_cum)
            # depth 0 is only reachable at the start value
            mask = np.ones_like(gain, dtype=bool)
            mask[0] = False
            mask[0, task.start] = True
            diff = np.abs(gain - kl)
            diff[~mask] = 0.0
            g = np.where(mask, gain, np.inf)
            report.checked += int(mask.sum())
            i = np.unravel_index(np.argmax(diff), diff.shape)
            if diff[i] > report.max_abs_diff:
                report.max_abs_diff = float(diff[i])
                if diff[i] > tol:
                    report.worst = (task.question_id, tuple(int(x) for x in i), draw)
            j = np.unravel_index(np.argmin(g), g.shape)
            if g[j] < report.min_expected_gain:
                report.min_expected_gain = float(g[j])
                if g[j] < floor and report.worst is None:
                    report.worst = (task.question_id, tuple(int(x) for x in j), draw)
    return report


def _unconditioned_gain_kl(tb: PolicyTables):
    H, M = tb.task.horizon, tb.task.modulus
    base = tb.prob_step[:H]
    nxt = np.empty((H, M, M + 1))
    nxt[:, :, :M] = tb.Q[-1, 1:, None, :]
    nxt[:, :, M] = tb.ans_cum[-1][None, :]
    here = tb.Q[-1, :H, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(base > 0, base * (np.log(nxt) - np.log(here)), 0.0).sum(-1)
    return g, np.zeros_like(g)
