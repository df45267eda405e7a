from dataclasses import replace

import numpy as np
import pytest

from pacr import env as E
from pacr.errors import ConfigError
from pacr.optimizer import (
    NonFiniteGradientError,
    TrainConfig,
    TrainState,
    collect_group,
    derive_rng,
    prepare_batch,
    surrogate_objective,
    surrogate_update,
    train,
    train_with_state,
)
from pacr.reward import VARIANTS, RolloutGroup, ShapingConfig

SMALL = E.make_suite("small")
MEDIUM = E.make_suite("medium")


def _state(params, temperature=1.0):
    return TrainState.initial(E.PolicySnapshot(params, temperature))


def _batch_case(variant, seed, n_groups=2, kl_beta=0.0):
    rng = np.random.default_rng(seed)
    suite = MEDIUM if seed % 2 else SMALL
    shaping = ShapingConfig(variant=variant, group_size=int(rng.integers(2, 7)), kl_beta=kl_beta,
                            lambda1=0.9, lambda2=float(rng.uniform(0.05, 0.5)), gamma=float(rng.choice([1.0, 0.9])))
    cfg = TrainConfig(shaping=shaping, temperature=float(rng.choice([1.0, 0.8])))
    old = rng.normal(0.0, 1.5, E.NUM_PARAMS)
    state = _state(old, cfg.temperature)
    tasks = [suite.train[int(j)] for j in rng.choice(len(suite.train), n_groups, replace=False)]
    groups = [collect_group(t, state, cfg, derive_rng(seed, 2, 0, g)) for g, t in enumerate(tasks)]
    batch = prepare_batch(groups, tasks, state.old_policy, shaping)
    ref = E.PolicySnapshot(old + rng.normal(0, 0.3, E.NUM_PARAMS), cfg.temperature)
    return batch, shaping, old, ref, rng, cfg, groups, tasks


def _objective(batch, shaping, theta, ref, temperature):
    return surrogate_objective(batch, E.PolicySnapshot(theta, temperature), shaping, ref)


def _safe_from_clip_kinks(batch, shaping, theta, temperature, margin=1e-3):
    eps = shaping.clip_eps
    pol = E.PolicySnapshot(theta, temperature)
    tables = {t.question_id: E.policy_tables(t, pol) for t in batch.tasks}
    for it in batch.items:
        ns, na = E.token_logprobs(tables[it.task.question_id], it.tokens)
        lr = np.bincount(it.step_seg, ns - it.old_step_lp, minlength=it.advantages.size)
        if it.ans_seg.size:
            lr = lr + np.bincount(it.ans_seg, na - it.old_ans_lp, minlength=it.advantages.size)
        r = np.exp(lr)
        if np.any(np.abs(r - (1 + eps)) < margin) or np.any(np.abs(r - (1 - eps)) < margin):
            return False
    return True


@pytest.mark.parametrize("variant", VARIANTS)
def test_surrogate_gradient_finite_differences(variant):
    checked = 0
    seed = 0
    worst = 0.0
    while checked < 50:
        seed += 1
        batch, shaping, old, ref, rng, cfg, *_ = _batch_case(variant, seed, kl_beta=0.05 if seed % 3 == 0 else 0.0)
        # move away from theta_old so ratios differ from 1 and some segments clip
        theta = old + rng.normal(0.0, 0.15, E.NUM_PARAMS)
        if not _safe_from_clip_kinks(batch, shaping, theta, cfg.temperature):
            continue
        _, grad, _ = _objective(batch, shaping, theta, ref, cfg.temperature)
        h = 1e-6
        fd = np.zeros_like(theta)
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h
            up = _objective(batch, shaping, theta + e, ref, cfg.temperature)[0]
            dn = _objective(batch, shaping, theta - e, ref, cfg.temperature)[0]
            fd[j] = (up - dn) / (2 * h)
        denom = max(np.linalg.norm(fd), 1e-6)
        rel = np.linalg.norm(grad - fd) / denom
        worst = max(worst, rel)
        assert rel <= 1e-4, (variant, seed, rel)
        checked += 1
    assert worst <= 1e-4


@pytest.mark.parametrize("variant", VARIANTS)
def test_clip_inert_at_old_policy(variant):
    for seed in range(5):
        batch, shaping, old, _, _, cfg, groups, tasks = _batch_case(variant, seed)
        obj, grad, clip = _objective(batch, shaping, old, None, cfg.temperature)
        assert clip == 0.0
        plain = sum(float(it.advantages.sum()) for it in batch.items) / batch.n_trajectories
        assert obj == pytest.approx(plain, abs=1e-15)
        # gradient equals the advantage-weighted score function
        pol = E.PolicySnapshot(old, cfg.temperature)
        want = np.zeros(E.NUM_PARAMS)
        for it in batch.items:
            tables = E.policy_tables(it.task, pol)
            g = np.zeros(E.NUM_PARAMS + 1)
            E.accumulate_grad(g, tables, pol, it.tokens, it.advantages[it.step_seg], it.advantages[it.ans_seg])
            want += g[:-1] / batch.n_trajectories
        assert np.allclose(grad, want, rtol=1e-12, atol=1e-14)


def test_scalar_variants_match_trajectory_score():
    batch, shaping, old, _, _, cfg, groups, tasks = _batch_case("baseline", 3)
    pol = E.PolicySnapshot(old, cfg.temperature)
    _, grad, _ = _objective(batch, shaping, old, None, cfg.temperature)
    want = np.zeros(E.NUM_PARAMS)
    for group, task in zip(groups, tasks):
        adv = group.terminal_rewards - group.terminal_rewards.mean()
        for a, traj in zip(adv, group.trajectories):
            _, g = E.policy_logprob_and_grad(pol, task, traj)
            want += a * g / batch.n_trajectories
    assert np.allclose(grad, want, rtol=1e-12, atol=1e-14)


def test_zero_advantage_leaves_parameters():
    task = SMALL.train[0]
    cfg = TrainConfig(shaping=ShapingConfig(variant="baseline", group_size=4), learning_rate=10.0)
    state = _state(SMALL.initial_policy().params)
    g = collect_group(task, state, cfg, derive_rng(0, 2, 0, 0))
    flat = RolloutGroup(g.question_id, g.trajectories, np.ones(g.size))
    new, _ = surrogate_update([flat], [task], state, cfg)
    assert np.array_equal(new.policy.params, state.policy.params)


def test_positive_advantage_trajectory_gains_probability():
    task = SMALL.train[2]
    cfg = TrainConfig(shaping=ShapingConfig(variant="baseline", group_size=2), learning_rate=0.05)
    state = _state(SMALL.initial_policy().params)
    rng = derive_rng(1, 2, 0, 0)
    for _ in range(50):
        g = collect_group(task, state, cfg, rng)
        if g.trajectories[0] != g.trajectories[1]:
            break
    group = RolloutGroup(g.question_id, g.trajectories, np.array([1.0, 0.0]))
    before = [E.policy_logprob_and_grad(state.policy, task, t)[0] for t in group.trajectories]
    new, _ = surrogate_update([group], [task], state, cfg)
    after = [E.policy_logprob_and_grad(new.policy, task, t)[0] for t in group.trajectories]
    assert after[0] > before[0]


def test_collect_group_contents():
    task = MEDIUM.train[0]
    cfg = TrainConfig()
    state = _state(MEDIUM.initial_policy().params)
    g = collect_group(task, state, cfg, derive_rng(0, 2, 1, 0))
    assert g.size == 8
    for t in g.trajectories:
        assert t.confidence is not None and t.confidence.logp.size == t.num_steps + 1
    again = collect_group(task, state, cfg, derive_rng(0, 2, 1, 0))
    assert again.trajectories == g.trajectories
    assert np.array_equal(again.terminal_rewards, g.terminal_rewards)
    two = collect_group(task, state, replace(cfg, shaping=ShapingConfig(group_size=2)), derive_rng(0, 2, 1, 0))
    two.validate()
    assert two.size == 2


@pytest.mark.parametrize("variant", ["sparse", "dense-minmax", "dense-loo"])
def test_lambda2_zero_reproduces_baseline_bitwise(variant):
    base = TrainConfig(shaping=ShapingConfig(variant="baseline", lambda1=1.0, lambda2=0.0), suite="small",
                       total_updates=8, batch_size=6, eval_every=4)
    rows_a, params_a = train_with_state(SMALL, base)
    other = replace(base, shaping=replace(base.shaping, variant=variant))
    rows_b, params_b = train_with_state(SMALL, other)
    assert all(np.array_equal(a, b) for a, b in zip(params_a, params_b))
    for ra, rb in zip(rows_a, rows_b):
        for key in ("mean_terminal_reward", "heldout_accuracy", "mean_consistency"):
            assert ra[key] == rb[key] or (np.isnan(ra[key]) and np.isnan(rb[key]))


def test_training_is_deterministic():
    cfg = TrainConfig(shaping=ShapingConfig(variant="dense-minmax"), total_updates=5, batch_size=4)
    a = train(SMALL, cfg)
    b = train(SMALL, cfg)
    assert a == b or all(
        all((x == y) or (np.isnan(x) and np.isnan(y)) for x, y in zip(ra.values(), rb.values())) for ra, rb in zip(a, b)
    )
    c = train(SMALL, replace(cfg, seed=1))
    assert [r["mean_terminal_reward"] for r in a] != [r["mean_terminal_reward"] for r in c]


def test_trivial_suite_reaches_full_accuracy():
    suite = E.make_suite("trivial")
    rows = train(suite, TrainConfig(shaping=ShapingConfig(variant="baseline"), total_updates=40, batch_size=8))
    assert rows[-1]["heldout_accuracy"] == 1.0


def test_adam_and_minibatches_run():
    cfg = TrainConfig(shaping=ShapingConfig(variant="dense-loo"), optimizer="adam", learning_rate=0.05,
                      minibatches=2, total_updates=3, batch_size=4)
    rows = train(SMALL, cfg)
    assert len(rows) == 3 and all(0.0 <= r["clip_fraction"] <= 1.0 for r in rows)


def test_nonfinite_gradient_aborts_with_dump():
    task = SMALL.train[0]
    cfg = TrainConfig(shaping=ShapingConfig(group_size=2))
    state = _state(SMALL.initial_policy().params)
    g = collect_group(task, state, cfg, derive_rng(0, 2, 0, 0))
    group = RolloutGroup(g.question_id, g.trajectories, np.array([1.0, 0.0]))
    bad = state.policy.params.copy()
    bad[E.PARAM_INDEX["copy"]] = np.nan
    state = replace(state, policy=E.PolicySnapshot(bad))
    with pytest.raises(NonFiniteGradientError) as info:
        surrogate_update([group], [task], state, cfg)
    assert "params" in info.value.dump and "grad" in info.value.dump


def test_metrics_columns():
    rows = train(SMALL, TrainConfig(total_updates=2, batch_size=2))
    assert list(rows[0]) == ["update", "mean_terminal_reward", "heldout_accuracy", "mean_consistency",
                             "mean_abs_gain", "clip_fraction"]


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(batch_size=0), dict(optimizer="rmsprop"), dict(minibatches=0),
                dict(eval_every=0), dict(temperature=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
