"""Time the numba and numpy kernel backends on one suite and check they agree.

    python benchmarks/bench_kernels.py --suite large --repeat 20

Numba compile time is excluded: each kernel runs once before timing.
"""

import argparse
import time

import numpy as np

from pacr import _kernels as K
from pacr import env as E


def _inputs(task, policy, n_samples, seed):
    ct = E.compile_task(task)
    tb = E.policy_tables(task, policy)
    theta_ext = np.append(policy.params, 0.0)
    rng = np.random.default_rng(seed)
    u = rng.random((n_samples, task.horizon + task.answer_len))
    # a batch of visited (t, v, a) triples for the gradient kernel
    actions, lengths, _ = K.IMPLS["numpy"]["sample_paths"](tb.cdf_step, tb.cdf_ans, task.start, u)
    t_idx, v_idx, a_idx = [], [], []
    for i in range(n_samples):
        v = task.start
        for t in range(lengths[i] + (lengths[i] < task.horizon)):
            a = actions[i, t] if t < lengths[i] else task.modulus
            t_idx.append(t)
            v_idx.append(v)
            a_idx.append(a)
            v = a
    t_idx, v_idx, a_idx = (np.array(x, dtype=np.int64) for x in (t_idx, v_idx, a_idx))
    w = rng.normal(size=t_idx.size)
    return {
        "step_logits": (theta_ext, ct.feat, 1.0),
        "value_dp": (tb.prob_step, tb.ans_cum),
        "sample_paths": (tb.cdf_step, tb.cdf_ans, task.start, u),
        "accumulate_step_grad": (None, ct.feat, tb.prob_step, t_idx, v_idx, a_idx, w, 1.0),
        "oracle_gain_kl": (tb.prob_step, tb.Q, tb.ans_cum),
    }


def _call(fn, name, args):
    if name == "accumulate_step_grad":
        args = (np.zeros(E.NUM_PARAMS + 1),) + args[1:]
    return fn(*args)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--suite", default="large", choices=list(E.SUITE_PRESETS))
    ap.add_argument("--tasks", type=int, default=8)
    ap.add_argument("--samples", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend can run")
        return

    suite = E.make_suite(args.suite)
    policy = suite.initial_policy()
    tasks = suite.train[: args.tasks]
    batches = [_inputs(t, policy, args.samples, i) for i, t in enumerate(tasks)]

    print(f"suite={args.suite} tasks={len(tasks)} samples={args.samples} repeat={args.repeat}")
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  agree")
    for name in K.IMPLS["numpy"]:
        timings, agree = {}, True
        for backend in ("numpy", "numba"):
            fn = K.IMPLS[backend][name]
            for b in batches:  # warm-up / compile
                _call(fn, name, b[name])
            t0 = time.perf_counter()
            for _ in range(args.repeat):
                for b in batches:
                    _call(fn, name, b[name])
            timings[backend] = (time.perf_counter() - t0) * 1e3 / (args.repeat * len(batches))
        for b in batches:
            agree &= _same(_call(K.IMPLS["numpy"][name], name, b[name]), _call(K.IMPLS["numba"][name], name, b[name]))
        speedup = timings["numpy"] / timings["numba"]
        print(f"{name:<22}{timings['numpy']:>12.4f}{timings['numba']:>12.4f}{speedup:>9.1f}x  {'yes' if agree else 'NO'}")


if __name__ == "__main__":
    main()
