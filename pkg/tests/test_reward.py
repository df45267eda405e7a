import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacr.errors import ConfigError, MissingConfidenceError
from pacr.reward import (
    RolloutGroup,
    ShapingConfig,
    baseline_advantages,
    compute_advantages,
    dense_loo_advantages,
    dense_minmax_advantages,
    dense_returns,
    is_equivalent,
    leave_one_out,
    minmax_normalize,
    normalize_answer,
    sparse_consistency_reward,
    sparse_pacr_advantages,
    terminal_reward,
)
from pacr.trace import ReasoningStep, StepConfidenceSeries, Token, Trajectory


def traj_from_gains(gains, start=-5.0, qid="q"):
    logp = np.concatenate([[start], start + np.cumsum(gains)]) if len(gains) else np.array([start])
    logp = np.minimum(logp, 0.0)
    steps = tuple(ReasoningStep((Token(0, "s"),), f"s{k}\n") for k in range(len(gains)))
    t = Trajectory(qid, steps, (Token(1, "1"),), (Token(1, "1"),))
    return t.with_confidence(StepConfidenceSeries.from_logp(logp))


def group_of(gain_lists, rewards):
    return RolloutGroup("q", tuple(traj_from_gains(g) for g in gain_lists), np.array(rewards, dtype=float))


def cfg(variant, **kw):
    return ShapingConfig(variant=variant, **kw)


# ---------------------------------------------------------------- terminal reward


@pytest.mark.parametrize(
    "pred, gt, want",
    [
        ("\\boxed{42}", "42", 1),
        (" 3.14 ", "3.140", 1),
        ("41", "42", 0),
        ("So the answer is \\boxed{ X }.", "x", 1),
        ("1/2", "0.5", 1),
        ("\\boxed{\\frac{1}{2}}", "\\frac{1}{2}", 1),
        ("42.", "42", 1),
        ("0.1", "0.1000000001", 1),
        ("0.1", "0.100001", 0),
        ("abc", "abd", 0),
        ("", "", 1),
    ],
)
def test_terminal_reward_strings(pred, gt, want):
    assert terminal_reward(pred, gt) == want


def test_terminal_reward_token_lists():
    assert terminal_reward([Token(0, "1"), Token(1, "2")], [Token(5, "12")]) == 1
    assert terminal_reward([Token(0, "1")], [Token(0, "2")]) == 0


def test_normalize_answer():
    assert normalize_answer("  \\boxed{A B}.") == "ab"
    assert is_equivalent("1e3", "1000")


# ---------------------------------------------------------------- sparse


@pytest.mark.parametrize("gains, want", [([1, 1, 1], 1.0), ([-1, -1], 0.0), ([2, -1, 0, 0.1], 0.5)])
def test_sparse_consistency_reward(gains, want):
    assert sparse_consistency_reward(traj_from_gains(gains)) == want


def test_sparse_requires_confidence():
    t = Trajectory("q", (ReasoningStep((Token(0, "a"),), "a"),), (), ())
    with pytest.raises(MissingConfidenceError):
        sparse_consistency_reward(t)


def test_sparse_paper_constants():
    # C_sparse = 0.8 and 0.4
    g = group_of([[1, 1, 1, 1, -1], [1, 1, -1, -1, -1]], [1, 0])
    a = sparse_pacr_advantages(g, cfg("sparse"))
    assert np.allclose(0.9 * g.terminal_rewards + 0.1 * np.array([0.8, 0.4]), [0.98, 0.04])
    assert np.allclose(a.scalar, [0.47, -0.47], atol=1e-15)


def test_sparse_identical_rewards():
    g = group_of([[1, -1], [1, -1], [1, -1]], [1, 1, 1])
    assert np.all(sparse_pacr_advantages(g, cfg("sparse")).scalar == 0.0)


def test_sparse_group_too_small():
    g = group_of([[1]], [1])
    with pytest.raises(ConfigError):
        sparse_pacr_advantages(g, cfg("sparse"))


def test_sparse_lambda2_zero_is_baseline():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        g = group_of([rng.normal(size=int(rng.integers(1, 6))) for _ in range(n)], rng.integers(0, 2, n))
        sp = sparse_pacr_advantages(g, cfg("sparse", lambda1=1.0, lambda2=0.0)).scalar
        assert np.array_equal(sp, baseline_advantages(g).scalar)


# ---------------------------------------------------------------- dense returns


def test_dense_returns_examples():
    assert dense_returns(traj_from_gains([1, 2, 3], start=-10), 1.0).tolist() == [6, 5, 3]
    assert dense_returns(traj_from_gains([4, 2], start=-10), 0.5).tolist() == [5, 2]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=12))
def test_dense_return_telescopes(gains):
    t = traj_from_gains(gains, start=-40.0)
    g = dense_returns(t, 1.0)
    total = t.confidence.logp[-1] - t.confidence.logp[0]
    assert abs(g[0] - total) <= 1e-12 * max(1.0, abs(t.confidence.logp).max())


# ---------------------------------------------------------------- min-max


def test_minmax_examples():
    assert np.allclose(minmax_normalize(np.array([0.2, 0.8, 0.5])), [0.0, 1.0, 0.5])
    assert minmax_normalize(np.array([0.3, 0.3, 0.3])).tolist() == [0.0, 0.0, 0.0]


def test_minmax_padding_rule():
    # second trajectory has no step 2: its padded return is 0
    g = group_of([[-0.1, 0.4], [0.7]], [0, 0])
    a = dense_minmax_advantages(g, cfg("dense-minmax"))
    assert a.process[0][1] == 1.0
    assert len(a.per_step[0]) == 2 and len(a.per_step[1]) == 1


def test_dense_shapes_and_combination():
    g = group_of([[1, -1, 2], [0.5], [-1, -1]], [1, 0, 1])
    c = cfg("dense-minmax", lambda1=0.9, lambda2=0.1)
    a = dense_minmax_advantages(g, c)
    grpo = g.terminal_rewards - g.terminal_rewards.mean()
    for i, t in enumerate(g.trajectories):
        assert a.per_step[i].shape == (t.num_steps,)
        assert np.allclose(a.per_step[i], 0.9 * grpo[i] + 0.1 * a.process[i])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=10),
       st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_minmax_properties(col, scale, shift):
    x = np.array(col)
    y = minmax_normalize(x)
    assert np.all((y >= 0) & (y <= 1))
    if x.max() > x.min():
        assert y.max() == 1.0 and y.min() == 0.0
        z = minmax_normalize(scale * x + shift)
        if (scale * x + shift).max() > (scale * x + shift).min():
            assert np.allclose(y, z, atol=1e-9)


# ---------------------------------------------------------------- LOO


def test_loo_examples():
    assert leave_one_out(np.array([3.0, 1.0])).tolist() == [2.0, -2.0]
    assert leave_one_out(np.array([2.0, 2.0, 2.0])).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ConfigError):
        leave_one_out(np.array([1.0]))


def test_loo_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.normal(size=4)
        want = [x[i] - np.mean([x[j] for j in range(4) if j != i]) for i in range(4)]
        assert np.allclose(leave_one_out(x), want, atol=1e-14)


def test_loo_padding_participates():
    g = group_of([[1.0, 2.0], [4.0]], [0, 0])
    a = dense_loo_advantages(g, cfg("dense-loo"))
    # step 2 returns: 2.0 and padded 0.0
    assert a.process[0][1] == 2.0
    assert np.allclose(a.process[0][0] + a.process[1][0], 0.0)


# ---------------------------------------------------------------- baseline


def test_baseline_examples():
    assert baseline_advantages(group_of([[1]] * 4, [1, 0, 0, 1])).scalar.tolist() == [0.5, -0.5, -0.5, 0.5]
    assert baseline_advantages(group_of([[1]] * 3, [1, 1, 1])).scalar.tolist() == [0.0, 0.0, 0.0]
    rng = np.random.default_rng(1)
    for _ in range(50):
        r = rng.integers(0, 2, 8)
        assert baseline_advantages(group_of([[1]] * 8, r)).scalar.sum() == 0.0


# ---------------------------------------------------------------- group-wide properties


def random_group(rng, n=None):
    n = n or int(rng.integers(2, 9))
    gains = [rng.normal(size=int(rng.integers(1, 7))) for _ in range(n)]
    return group_of(gains, rng.integers(0, 2, n))


@pytest.mark.parametrize("seed", range(30))
def test_group_invariants(seed):
    rng = np.random.default_rng(seed)
    g = random_group(rng)
    assert abs(baseline_advantages(g).scalar.sum()) <= 1e-12
    assert abs(sparse_pacr_advantages(g, cfg("sparse")).scalar.sum()) <= 1e-12

    mm = dense_minmax_advantages(g, cfg("dense-minmax"))
    width = max(t.num_steps for t in g.trajectories)
    for k in range(width):
        col = np.array([p[k] for p in mm.process if p.size > k])
        assert np.all((col >= 0) & (col <= 1))

    loo = dense_loo_advantages(g, cfg("dense-loo"))
    padded = np.zeros((g.size, width))
    for i, p in enumerate(loo.process):
        padded[i, : p.size] = p
    G = np.zeros((g.size, width))
    for i, t in enumerate(g.trajectories):
        G[i, : t.num_steps] = dense_returns(t, 1.0)
    for k in range(width):
        want = G[:, k] - (G[:, k].sum() - G[:, k]) / (g.size - 1)
        exists = np.array([t.num_steps > k for t in g.trajectories])
        assert np.allclose(padded[exists, k], want[exists], atol=1e-12)
        # the full padded LOO column sums to zero
        assert abs(want.sum()) <= 1e-12


@pytest.mark.parametrize("variant", ["baseline", "sparse", "dense-minmax", "dense-loo"])
def test_reward_shift_invariance(variant):
    rng = np.random.default_rng(7)
    g = random_group(rng, n=6)
    shifted = RolloutGroup(g.question_id, g.trajectories, g.terminal_rewards + 3.0)
    a = compute_advantages(g, cfg(variant))
    b = compute_advantages(shifted, cfg(variant))
    for i in range(g.size):
        assert np.allclose(a.for_trajectory(i), b.for_trajectory(i), atol=1e-12)


@pytest.mark.parametrize("variant", ["dense-minmax", "dense-loo"])
def test_dense_lambda2_zero_is_constant_grpo(variant):
    rng = np.random.default_rng(11)
    for _ in range(10):
        g = random_group(rng)
        a = compute_advantages(g, cfg(variant, lambda1=1.0, lambda2=0.0))
        base = baseline_advantages(g).scalar
        for i in range(g.size):
            assert np.all(a.per_step[i] == base[i])


def test_degenerate_trajectories_excluded_from_dense_stats():
    steps0 = Trajectory("q", (), (Token(1, "1"),), (Token(1, "1"),)).with_confidence(StepConfidenceSeries.from_logp([-1.0]))
    g = RolloutGroup("q", (traj_from_gains([0.5]), traj_from_gains([0.2]), steps0), np.array([1.0, 0.0, 0.0]))
    a = dense_minmax_advantages(g, cfg("dense-minmax"))
    assert a.process[0].tolist() == [1.0] and a.process[1].tolist() == [0.0]
    assert a.per_step[2].size == 0
    assert sparse_consistency_reward(steps0) == 0.0


def test_group_validation():
    g = group_of([[1], [1]], [1, 0.5])
    with pytest.raises(ValueError):
        g.validate()
    mixed = RolloutGroup("q", (traj_from_gains([1], qid="a"), traj_from_gains([1], qid="b")), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        mixed.validate()


def test_config_validation():
    for bad in (dict(lambda1=-1), dict(gamma=0), dict(gamma=1.5), dict(group_size=1), dict(variant="x"), dict(clip_eps=0), dict(kl_beta=-1)):
        with pytest.raises(ConfigError):
            ShapingConfig(**bad)
