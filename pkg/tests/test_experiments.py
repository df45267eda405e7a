import numpy as np
import pytest

from pacr import env as E
from pacr.experiments import (
    VariantRuns,
    correct_chain,
    faster_than,
    final_accuracy,
    mean_ci,
    mid_training_policy,
    run_variant,
    simulate_records,
    updates_to_fraction,
)
from pacr.optimizer import TrainConfig
from pacr.reward import ShapingConfig

SMALL = E.make_suite("small")


def test_updates_to_fraction():
    curve = [0.0, 0.2, 0.5, 0.85, 0.9, 1.0, 1.0, 1.0, 1.0, 1.0]
    assert updates_to_fraction(curve) == 5
    assert updates_to_fraction([0.0] * 6) == 1
    assert final_accuracy(curve) == 1.0
    assert final_accuracy([0.2, 0.4, 0.6], tail=2) == pytest.approx(0.5)


def test_variant_runs_summaries():
    r = VariantRuns("x", [0, 1], np.array([[0.1, 0.3, 0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 0.2, 0.4, 0.4, 0.4]]))
    assert r.t90.tolist() == [3, 4]
    assert np.allclose(r.finals, [2.3 / 5, 1.4 / 5])  # mean of the last five evaluations
    assert np.allclose(r.early_rate(window=3), [0.2, 0.1])


def test_mean_ci_and_wilcoxon():
    m, lo, hi = mean_ci([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and lo < 2.5 < hi
    assert mean_ci([2.0, 2.0]) == (2.0, 2.0, 2.0)
    assert faster_than(np.array([1, 2, 3]), np.array([1, 2, 3])) == 1.0
    a = np.arange(20) + 1.0
    assert faster_than(a, a + np.linspace(1, 3, 20)) < 0.01
    assert faster_than(a + np.linspace(1, 3, 20), a) > 0.5


def test_correct_chain():
    task = E.TaskInstance("q", 10, 4, 3, (("add", 2), ("mul", 3)), (False, False))
    assert correct_chain(task) == [5, 5]


def test_simulated_records_labels_and_confidence():
    pol = SMALL.initial_policy()
    recs = simulate_records(SMALL.train[:8], pol, per_task=6, seed=1)
    assert recs == simulate_records(SMALL.train[:8], pol, per_task=6, seed=1)
    by_id = {t.question_id: t for t in SMALL.train}
    for r in recs:
        task = by_id[r.question_id.split("#")[0]]
        tb = E.policy_tables(task, pol)
        assert r.logp_gt_empty == pytest.approx(tb.log_confidence[0, task.start], abs=0)
        assert np.all(r.logp <= 0)
        if not r.correct:
            assert r.coherence_label == "unlabeled"
        else:
            chain_text = [f" gives {v}.\n" for v in correct_chain(task)]
            follows = len(r.steps) == len(chain_text) and all(
                s.raw_text.endswith(c) for c, s in zip(chain_text, r.steps))
            assert (r.coherence_label == "coherent") == follows


def test_mid_training_policy_and_run_variant():
    cfg = TrainConfig(shaping=ShapingConfig(variant="baseline"), total_updates=4, batch_size=4)
    assert np.array_equal(mid_training_policy(SMALL, cfg, 0).params, SMALL.initial_policy().params)
    pol = mid_training_policy(SMALL, cfg, 3)
    assert not np.array_equal(pol.params, SMALL.initial_policy().params)
    runs = run_variant(SMALL, "dense-minmax", [0, 1], cfg)
    assert runs.curves.shape == (2, 4) and runs.variant == "dense-minmax"
