"""Compiled learner loop for ensemble beliefs with a fixed alpha.

Mirrors :func:`pmdb.amg_learner.numpy_step` operation by operation and reads
the same :class:`~pmdb.amg_learner.StepNoise` blocks, so the two backends
agree up to rounding. The numpy step is the reference implementation.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .mdp_core import POSITIVE_FLOOR


@njit(cache=True)
def _soft_values(q, mu, alpha, out):
    S, A = q.shape
    for s in range(S):
        top = q[s, 0]
        for b in range(1, A):
            top = max(top, q[s, b])
        z = 0.0
        for b in range(A):
            z += mu[s, b] * np.exp((q[s, b] - top) / alpha)
        out[s] = top + alpha * np.log(z)


@njit(cache=True)
def _tilt_row(q, mu, alpha, s, out):
    A = q.shape[1]
    top = -np.inf
    for b in range(A):
        out[b] = np.log(mu[s, b]) + q[s, b] / alpha if mu[s, b] > 0 else -np.inf
        top = max(top, out[b])
    total = 0.0
    for b in range(A):
        out[b] = np.exp(out[b] - top)
        total += out[b]
    for b in range(A):
        out[b] /= total


@njit(cache=True)
def _first_above(u, probs):
    n = probs.shape[0]
    cum = 0.0
    for j in range(n - 1):
        cum += probs[j]
        if u < cum:
            return j
    return n - 1


@njit(cache=True)
def _member_values(members, v, out):
    S, A, M, _ = members.shape
    for s in range(S):
        for a in range(A):
            for m in range(M):
                g = 0.0
                for t in range(S):
                    g += members[s, a, m, t] * v[t]
                out[s, a, m] = g


@njit(cache=True)
def _kth_value(g, k, scratch):
    # insertion sort into scratch, then read position k - 1
    n = g.shape[0]
    for i in range(n):
        x = g[i]
        j = i
        while j > 0 and scratch[j - 1] > x:
            scratch[j] = scratch[j - 1]
            j -= 1
        scratch[j] = x
    return scratch[k - 1]


@njit(cache=True)
def _kth_position(g, k):
    # stable rank: strictly smaller entries, plus equal entries at lower index
    n = g.shape[0]
    for j in range(n):
        rank = 0
        for i in range(n):
            if g[i] < g[j] or (g[i] == g[j] and i < j):
                rank += 1
        if rank == k - 1:
            return j
    return n - 1


@njit(cache=True)
def _run(q, q_target, policy, policy_ref, game_states, game_steps, buf_s, buf_a, buf_members,
         members, cum_weights, reward, gamma, terminal, ds_s, ds_a, ds_sn, ds_done,
         u_action, u_members, batch, u_explore, explore_pick, u_next, restart,
         alpha, k, q_lr, policy_lr, epsilon, w_amg, w_mdp, omega1, omega2, horizon, floor,
         secondary_uses_target):
    K, C = u_action.shape
    N = u_members.shape[2]
    B = batch.shape[1]
    S, A = q.shape
    M = cum_weights.shape[2]
    row = np.empty(A)
    v_target = np.empty(S)
    v_choice = np.empty(S)
    g = np.empty(N)
    scratch = np.empty(N)
    G = np.empty((S, A, M))
    W = np.empty(S * A)
    Y = np.empty(S * A)
    visited = np.empty(S, dtype=np.bool_)
    q_flat = q.reshape(-1)
    for step in range(K):
        # primary actions and candidate members
        for c in range(C):
            s = game_states[c]
            buf_s[c] = s
            _tilt_row(q, policy_ref, alpha, s, row)
            a = _first_above(u_action[step, c], row)
            buf_a[c] = a
            for n in range(N):
                m = 0
                while m < M - 1 and not u_members[step, c, n] < cum_weights[s, a, m]:
                    m += 1
                buf_members[c, n] = m

        # regression targets from the target table
        _soft_values(q_target, policy_ref, alpha, v_target)
        _member_values(members, v_target, G)
        W[:] = 0.0
        Y[:] = 0.0
        for c in range(C):
            s, a = game_states[c], buf_a[c]
            for n in range(N):
                g[n] = G[s, a, buf_members[c, n]]
            y = reward[s, a] + gamma * _kth_value(g, k, scratch)
            W[s * A + a] += w_amg
            Y[s * A + a] += w_amg * y
        for j in range(B):
            i = batch[step, j]
            s, a = ds_s[i], ds_a[i]
            y = reward[s, a] + (0.0 if ds_done[i] else gamma * v_target[ds_sn[i]])
            W[s * A + a] += w_mdp
            Y[s * A + a] += w_mdp * y
        for cell in range(S * A):
            if W[cell] > 0:
                eta = min(1.0, q_lr * W[cell])
                q_flat[cell] += eta * (Y[cell] / W[cell] - q_flat[cell])

        # policy rows visited by either source
        visited[:] = False
        for c in range(C):
            visited[game_states[c]] = True
        for j in range(B):
            visited[ds_s[batch[step, j]]] = True
        for s in range(S):
            if visited[s]:
                _tilt_row(q, policy_ref, alpha, s, row)
                total = 0.0
                for b in range(A):
                    mixed = (1.0 - policy_lr) * policy[s, b] + policy_lr * row[b]
                    row[b] = (1.0 - A * floor) * mixed + floor
                    total += row[b]
                for b in range(A):
                    policy[s, b] = max(row[b] / total, floor)

        # secondary choice, transition and restarts
        _soft_values(q_target if secondary_uses_target else q, policy_ref, alpha, v_choice)
        _member_values(members, v_choice, G)
        for c in range(C):
            s, a = game_states[c], buf_a[c]
            if u_explore[step, c] < epsilon:
                chosen = explore_pick[step, c]
            else:
                for n in range(N):
                    g[n] = G[s, a, buf_members[c, n]]
                chosen = _kth_position(g, k)
            s_next = _first_above(u_next[step, c], members[s, a, buf_members[c, chosen]])
            game_steps[c] += 1
            if terminal[s_next] or game_steps[c] >= horizon:
                s_next = ds_s[restart[step, c]]
                game_steps[c] = 0
            game_states[c] = s_next

        # slow-moving copies
        if omega1 == 1.0:
            policy_ref[:, :] = policy
        else:
            for s in range(S):
                total = 0.0
                for b in range(A):
                    policy_ref[s, b] = omega1 * policy[s, b] + (1.0 - omega1) * policy_ref[s, b]
                    total += policy_ref[s, b]
                for b in range(A):
                    policy_ref[s, b] /= total
        if omega2 == 1.0:
            q_target[:, :] = q
        else:
            for s in range(S):
                for b in range(A):
                    q_target[s, b] = omega2 * q[s, b] + (1.0 - omega2) * q_target[s, b]


def apply_noise(state, noise, dataset, belief, cfg, mdp):
    """Apply a stacked noise block to ``state`` in place."""
    C, N = state.num_games, cfg.N
    buf_s = state.buffer_s.astype(np.int64)
    buf_a = state.buffer_a.astype(np.int64)
    buf_members = np.zeros((C, N), dtype=np.int64)
    if state.buffer_members is not None:
        buf_members[:] = state.buffer_members
    game_states = state.game_states.astype(np.int64)
    game_steps = state.game_steps.astype(np.int64)
    q_target = state.q_target.copy()
    policy_ref = state.policy_ref.copy()
    _run(state.q, q_target, state.policy, policy_ref, game_states, game_steps, buf_s, buf_a, buf_members,
         belief.members, belief._cum_weights, mdp.reward, mdp.discount, mdp.terminal_mask,
         dataset.s, dataset.a, dataset.s_next, dataset.done,
         noise.u_action, noise.u_members, noise.batch, noise.u_explore,
         noise.explore_pick, noise.u_next, noise.restart,
         float(cfg.alpha), cfg.k, cfg.q_lr, cfg.policy_lr, cfg.epsilon,
         float(cfg.amg_loss_weight), float(cfg.mdp_loss_weight), cfg.omega1, cfg.omega2, cfg.horizon,
         POSITIVE_FLOOR, cfg.secondary_uses_target)
    state.q_target, state.policy_ref = q_target, policy_ref
    state.game_states, state.game_steps = game_states, game_steps
    state.buffer_s, state.buffer_a = buf_s, buf_a
    state.buffer_members, state.buffer_vectors = buf_members, None
    state.step_count += noise.u_action.shape[0]
