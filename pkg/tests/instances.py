"""Seeded toy instances and brute-force oracles shared by the test modules."""

from __future__ import annotations

import itertools

import numpy as np

from pmdb.belief import EnsembleBelief
from pmdb.mdp_core import TabularMDP


def random_mdp(S: int, A: int, seed: int, discount: float = 0.9) -> TabularMDP:
    rng = np.random.default_rng(seed)
    return TabularMDP(rng.random((S, A)), discount, rng.dirichlet(np.ones(S)))


def random_transition(S: int, A: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).dirichlet(np.ones(S), size=(S, A))


def random_ensemble(S: int, A: int, M: int, seed: int, concentration: float = 1.0,
                    random_weights: bool = False) -> EnsembleBelief:
    rng = np.random.default_rng(seed)
    members = rng.dirichlet(np.full(S, concentration), size=(S, A, M))
    weights = rng.dirichlet(np.ones(M), size=(S, A)) if random_weights else None
    return EnsembleBelief(members, weights)


def random_policy(S: int, A: int, seed: int) -> np.ndarray:
    pi = np.random.default_rng(seed).dirichlet(np.ones(A), size=S)
    pi = np.maximum(pi, 1e-6)
    return pi / pi.sum(-1, keepdims=True)


def brute_force_kth_min(g: np.ndarray, w: np.ndarray, N: int, k: int) -> float:
    """E[k-th smallest of N i.i.d. draws] by summing over all M^N index tuples."""
    total = 0.0
    for tup in itertools.product(range(len(g)), repeat=N):
        p = np.prod([w[m] for m in tup])
        if p:
            total += p * np.sort(g[list(tup)])[k - 1]
    return total


def brute_force_backup(q, pi, belief: EnsembleBelief, N: int, k: int, mdp: TabularMDP) -> np.ndarray:
    v = (q * pi).sum(axis=1)
    out = np.empty_like(mdp.reward)
    for s in range(mdp.num_states):
        for a in range(mdp.num_actions):
            g = belief.members[s, a] @ v
            out[s, a] = mdp.reward[s, a] + mdp.discount * brute_force_kth_min(g, belief.weights[s, a], N, k)
    return out


def tuple_enumeration_expectation(g: np.ndarray, w: np.ndarray, N: int, k: int) -> np.ndarray:
    """Vectorised M^N enumeration over the trailing member axis of ``g`` and ``w``."""
    M = g.shape[-1]
    tuples = np.array(list(itertools.product(range(M), repeat=N)))  # (M^N, N)
    probs = np.prod(w[..., tuples], axis=-1)                            # (..., M^N)
    kth = np.sort(g[..., tuples], axis=-1)[..., k - 1]                  # (..., M^N)
    return np.sum(probs * kth, axis=-1)


def brute_force_evaluation(pi, belief: EnsembleBelief, N: int, k: int, mdp: TabularMDP,
                           tol: float = 1e-13) -> np.ndarray:
    """Value iteration whose backup enumerates every candidate tuple."""
    q = np.zeros_like(mdp.reward)
    while True:
        v = (q * pi).sum(axis=1)
        new = mdp.reward + mdp.discount * tuple_enumeration_expectation(belief.members @ v, belief.weights, N, k)
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new
