"""Hot numeric kernels for the chain-arithmetic simulator.

Every kernel exists twice: an explicit-loop version compiled with numba's
``njit`` and a vectorized numpy version. ``PACR_NUMBA=0`` in the environment
(or numba being absent) selects the numpy path. Both paths agree to float
roundoff; tests and ``benchmarks/bench_kernels.py`` compare them directly.

Array conventions (H = horizon, M = modulus, A = M + 1 actions, STOP = M):
  feat       int32 [H+1, M, A, K]   active feature indices, padded with D
  prob_step  float [H+1, M, A]      next-move probabilities (0 for illegal)
  cdf_step   float [H+1, M, A]      cumulative, 1.0 from the last legal move on
  ans_cum    float [L+1, M]         prod_{l'<=l} pi_ans(gt digit l' | stop value)
  Q          float [L+1, H+1, M]    P(first l answer digits match | state)
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("PACR_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------- logits


def _step_logits_loop(theta_ext, feat, inv_temp):
    H1, M, A, K = feat.shape
    out = np.zeros((H1, M, A))
    for t in range(H1):
        for v in range(M):
            for a in range(A):
                s = 0.0
                for k in range(K):
                    s += theta_ext[feat[t, v, a, k]]
                out[t, v, a] = s * inv_temp
    return out


def _step_logits_numpy(theta_ext, feat, inv_temp):
    return theta_ext[feat].sum(axis=-1) * inv_temp


# ---------------------------------------------------------------- answer-prefix DP


def _value_dp_loop(prob_step, ans_cum):
    H1, M, A = prob_step.shape
    L1 = ans_cum.shape[0]
    H = H1 - 1
    stop = A - 1
    Q = np.zeros((L1, H1, M))
    for l in range(L1):
        for v in range(M):
            Q[l, H, v] = ans_cum[l, v]
    for t in range(H - 1, -1, -1):
        for l in range(L1):
            for v in range(M):
                s = prob_step[t, v, stop] * ans_cum[l, v]
                for x in range(M):
                    s += prob_step[t, v, x] * Q[l, t + 1, x]
                Q[l, t, v] = s
    return Q


def _value_dp_numpy(prob_step, ans_cum):
    H1, M, A = prob_step.shape
    L1 = ans_cum.shape[0]
    H = H1 - 1
    Q = np.empty((L1, H1, M))
    Q[:, H, :] = ans_cum
    for t in range(H - 1, -1, -1):
        Q[:, t, :] = prob_step[t, :, M][None, :] * ans_cum + Q[:, t + 1, :] @ prob_step[t, :, :M].T
    return Q


# ---------------------------------------------------------------- sampling


def _sample_paths_loop(cdf_step, cdf_ans, start, uniforms):
    """Inverse-CDF sampling of ``n`` rollouts; uniforms has shape [n, H + L]."""
    H1, M, A = cdf_step.shape
    H = H1 - 1
    L = cdf_ans.shape[1]
    R = cdf_ans.shape[2]
    n = uniforms.shape[0]
    actions = np.full((n, H), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    digits = np.zeros((n, L), dtype=np.int64)
    for i in range(n):
        v = start
        t = 0
        while t < H:
            u = uniforms[i, t]
            a = A - 1
            for j in range(A):
                if u < cdf_step[t, v, j]:
                    a = j
                    break
            if a == A - 1:
                break
            actions[i, t] = a
            v = a
            t += 1
        lengths[i] = t
        for l in range(L):
            u = uniforms[i, H + l]
            d = R - 1
            for j in range(R):
                if u < cdf_ans[v, l, j]:
                    d = j
                    break
            digits[i, l] = d
    return actions, lengths, digits


def _sample_paths_numpy(cdf_step, cdf_ans, start, uniforms):
    H1, M, A = cdf_step.shape
    H = H1 - 1
    L = cdf_ans.shape[1]
    n = uniforms.shape[0]
    actions = np.full((n, H), -1, dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    v = np.full(n, start, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for t in range(H):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        rows = cdf_step[t, v[idx]]
        a = (rows <= uniforms[idx, t][:, None]).sum(axis=1)
        a = np.minimum(a, A - 1)
        stopped = a == A - 1
        moving = idx[~stopped]
        actions[moving, t] = a[~stopped]
        v[moving] = a[~stopped]
        lengths[moving] += 1
        alive[idx[stopped]] = False
    digits = np.empty((n, L), dtype=np.int64)
    for l in range(L):
        rows = cdf_ans[v, l]
        digits[:, l] = np.minimum((rows <= uniforms[:, H + l][:, None]).sum(axis=1), rows.shape[1] - 1)
    return actions, lengths, digits


# ---------------------------------------------------------------- score-function gradient


def _accumulate_step_grad_loop(grad, feat, prob_step, t_idx, v_idx, a_idx, weights, inv_temp):
    """grad += sum_i w_i * d/dtheta log pi(a_i | t_i, v_i); the last slot of grad is padding."""
    A = feat.shape[2]
    K = feat.shape[3]
    for i in range(t_idx.shape[0]):
        w = weights[i] * inv_temp
        if w == 0.0:
            continue
        t = t_idx[i]
        v = v_idx[i]
        a = a_idx[i]
        for k in range(K):
            grad[feat[t, v, a, k]] += w
        for b in range(A):
            p = prob_step[t, v, b]
            if p == 0.0:
                continue
            for k in range(K):
                grad[feat[t, v, b, k]] -= w * p
    return grad


def _accumulate_step_grad_numpy(grad, feat, prob_step, t_idx, v_idx, a_idx, weights, inv_temp):
    w = weights * inv_temp
    K = feat.shape[3]
    np.add.at(grad, feat[t_idx, v_idx, a_idx].ravel(), np.repeat(w, K))
    probs = prob_step[t_idx, v_idx]  # [n, A]
    f = feat[t_idx, v_idx]  # [n, A, K]
    contrib = -(w[:, None] * probs)[:, :, None] * np.ones(K)
    np.add.at(grad, f.ravel(), contrib.ravel())
    return grad


# ---------------------------------------------------------------- expected gain vs KL at every state


def _oracle_gain_kl_loop(prob_step, Q, ans_cum):
    """For each state (t < H, v): expected gain under the answer-conditioned
    step distribution and KL(oracle || base), computed by separate formulas."""
    H1, M, A = prob_step.shape
    H = H1 - 1
    L = Q.shape[0] - 1
    gain = np.zeros((H, M))
    kl = np.zeros((H, M))
    log_stop = np.log(ans_cum[L])
    log_next = np.empty(A)
    for t in range(H):
        # log of the continuation value depends on (t, a) only, except for STOP
        for a in range(A - 1):
            log_next[a] = np.log(Q[L, t + 1, a])
        for v in range(M):
            here = Q[L, t, v]
            z = 0.0
            for a in range(A):
                nxt = ans_cum[L, v] if a == A - 1 else Q[L, t + 1, a]
                z += prob_step[t, v, a] * nxt
            log_next[A - 1] = log_stop[v]
            log_here = np.log(here)
            g = 0.0
            d = 0.0
            for a in range(A):
                b = prob_step[t, v, a]
                if b == 0.0:
                    continue
                nxt = ans_cum[L, v] if a == A - 1 else Q[L, t + 1, a]
                o = b * nxt / z
                if o == 0.0:
                    continue
                g += o * (log_next[a] - log_here)
                d += o * (np.log(o) - np.log(b))
            gain[t, v] = g
            kl[t, v] = d
    return gain, kl


def _oracle_gain_kl_numpy(prob_step, Q, ans_cum):
    H1, M, A = prob_step.shape
    H = H1 - 1
    L = Q.shape[0] - 1
    base = prob_step[:H]  # [H, M, A]
    nxt = np.empty((H, M, A))
    nxt[:, :, :M] = Q[L, 1:, None, :]
    nxt[:, :, M] = ans_cum[L][None, :]
    joint = base * nxt
    z = joint.sum(axis=-1, keepdims=True)
    oracle = joint / z
    here = Q[L, :H, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        g_terms = np.where(oracle > 0, oracle * (np.log(nxt) - np.log(here)), 0.0)
        k_terms = np.where(oracle > 0, oracle * (np.log(oracle) - np.log(base)), 0.0)
    return g_terms.sum(axis=-1), k_terms.sum(axis=-1)


_LOOPS = {
    "step_logits": _step_logits_loop,
    "value_dp": _value_dp_loop,
    "sample_paths": _sample_paths_loop,
    "accumulate_step_grad": _accumulate_step_grad_loop,
    "oracle_gain_kl": _oracle_gain_kl_loop,
}

IMPLS = {
    "numpy": {
        "step_logits": _step_logits_numpy,
        "value_dp": _value_dp_numpy,
        "sample_paths": _sample_paths_numpy,
        "accumulate_step_grad": _accumulate_step_grad_numpy,
        "oracle_gain_kl": _oracle_gain_kl_numpy,
    },
    "numba": {name: _njit(fn) for name, fn in _LOOPS.items()},
}

BACKEND = "numba" if USE_NUMBA else "numpy"
_active = IMPLS[BACKEND]

step_logits = _active["step_logits"]
value_dp = _active["value_dp"]
sample_paths = _active["sample_paths"]
accumulate_step_grad = _active["accumulate_step_grad"]
oracle_gain_kl = _active["oracle_gain_kl"]
