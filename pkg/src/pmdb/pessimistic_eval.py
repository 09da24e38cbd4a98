"""(N, k)-pessimistic policy evaluation on the alternating Markov game.

The backup replaces the usual expected continuation with the expected k-th
smallest continuation over ``N`` transition candidates drawn from the belief::

    (B Q)(s, a) = r(s, a) + gamma * E[ kth_min_{tau in T} tau @ V ],
    V(s') = sum_a' pi(a'|s') Q(s', a')

Ensembles are handled exactly through discrete order statistics. Dirichlet
beliefs go through a :class:`FrozenSampleBank` so the sampled operator is a
fixed map and Banach iteration converges.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .belief import (EnsembleBelief, OrderWeightCache, UnsupportedBeliefError, _check_order,
                     order_statistic_weights)
from .mdp_core import (FIXED_POINT_TOL, MAX_SWEEPS, TabularMDP, check_policy,
                       expected_start_value, iterate_to_fixed_point, state_values)

MONOTONE_SLACK = 1e-9
EQUIVALENCE_RESIDUAL = 1e-8


@dataclass(frozen=True)
class PessimismConfig:
    N: int = 10
    k: int = 2
    mc_sets: int = 1000

    def __post_init__(self):
        _check_order(self.N, self.k)
        if self.mc_sets < 1:
            raise ValueError("mc_sets must be >= 1")


@dataclass
class FrozenSampleBank:
    """``mc_sets`` pre-drawn candidate sets per ``(s, a)``: ``vectors[s, a, j, n, s']``."""

    vectors: np.ndarray
    seed: int
    N: int

    @classmethod
    def build(cls, belief, N: int, mc_sets: int, seed: int) -> "FrozenSampleBank":
        S, A = belief.num_states, belief.num_actions
        rng = np.random.default_rng(seed)
        s_idx, a_idx = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
        s_idx = np.repeat(s_idx[..., None], mc_sets, axis=-1)
        a_idx = np.repeat(a_idx[..., None], mc_sets, axis=-1)
        vecs, _ = belief.draw(s_idx, a_idx, N, rng)
        return cls(vecs, seed, N)

    @property
    def mc_sets(self) -> int:
        return self.vectors.shape[2]

    def regenerate(self, belief) -> "FrozenSampleBank":
        return FrozenSampleBank.build(belief, self.N, self.mc_sets, self.seed)


def pessimistic_expectation(belief, values: np.ndarray, cfg: PessimismConfig,
                            bank: FrozenSampleBank | None = None,
                            rng: np.random.Generator | None = None,
                            cache: OrderWeightCache | None = None) -> np.ndarray:
    """``E[kth_min_{tau} tau @ values]`` for every ``(s, a)``, shape ``(S, A)``.

    Exact for ensembles without a bank; otherwise the average over the bank's
    frozen sets. Passing ``rng`` instead of a bank redraws the sets on every
    call, which is only useful for diagnostics.
    """
    if bank is not None:
        if bank.N != cfg.N:
            raise ValueError(f"sample bank was drawn with N={bank.N}, config has N={cfg.N}")
        g = bank.vectors @ values
        return np.partition(g, cfg.k - 1, axis=-1)[..., cfg.k - 1].mean(axis=-1)
    if isinstance(belief, EnsembleBelief):
        g = belief.members @ values
        lam = cache(g) if cache is not None else order_statistic_weights(g, belief.weights, cfg.N, cfg.k)
        return np.sum(lam * g, axis=-1)
    if rng is not None:
        S, A = belief.num_states, belief.num_actions
        s_idx, a_idx = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
        s_idx = np.repeat(s_idx[..., None], cfg.mc_sets, axis=-1)
        a_idx = np.repeat(a_idx[..., None], cfg.mc_sets, axis=-1)
        vecs, _ = belief.draw(s_idx, a_idx, cfg.N, rng)
        g = vecs @ values
        return np.partition(g, cfg.k - 1, axis=-1)[..., cfg.k - 1].mean(axis=-1)
    raise ValueError(f"{type(belief).__name__} needs a FrozenSampleBank for the pessimistic backup")


def make_cache(belief, cfg: PessimismConfig, bank=None) -> OrderWeightCache | None:
    if bank is None and isinstance(belief, EnsembleBelief):
        return OrderWeightCache(belief.weights, cfg.N, cfg.k)
    return None


def pessimistic_backup(q: np.ndarray, pi: np.ndarray, belief, cfg: PessimismConfig,
                       mdp: TabularMDP, bank: FrozenSampleBank | None = None,
                       cache: OrderWeightCache | None = None) -> np.ndarray:
    return mdp.reward + mdp.discount * pessimistic_expectation(
        belief, state_values(q, pi), cfg, bank, cache=cache)


def evaluate_policy_pessimistic(pi: np.ndarray, belief, cfg: PessimismConfig, mdp: TabularMDP,
                                bank: FrozenSampleBank | None = None,
                                tol: float = FIXED_POINT_TOL,
                                max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, float]:
    """Fixed point ``Q^pi_{N,k}`` (iterated from zero) and ``J(pi)``."""
    pi = check_policy(pi, mdp.num_states)
    cache = make_cache(belief, cfg, bank)
    op = lambda q: pessimistic_backup(q, pi, belief, cfg, mdp, bank, cache)
    q, _, _ = iterate_to_fixed_point(op, np.zeros_like(mdp.reward), tol, max_sweeps)
    return q, expected_start_value(q, pi, mdp.initial_dist)


def equivalent_transition(belief, q_fixedpoint: np.ndarray, pi: np.ndarray, cfg: PessimismConfig,
                          mdp: TabularMDP, values: np.ndarray | None = None,
                          backup=None) -> np.ndarray:
    """Transition table of the MDP equivalent to the game for this policy.

    Row ``(s, a)`` is ``sum_m lam_m tau_m`` with ``lam`` the reweighted belief at
    the converged Q. ``values`` overrides the continuation vector and
    ``backup`` the operator used for the convergence check (both are set by
    the KL-regularised variant).
    """
    if not isinstance(belief, EnsembleBelief):
        raise UnsupportedBeliefError("the equivalent transition needs an EnsembleBelief")
    if backup is None:
        backup = lambda q: pessimistic_backup(q, pi, belief, cfg, mdp)
    residual = float(np.max(np.abs(backup(q_fixedpoint) - q_fixedpoint)))
    if residual > EQUIVALENCE_RESIDUAL:
        raise ValueError(f"Q is not a converged fixed point (backup residual {residual:.3e})")
    v = state_values(q_fixedpoint, pi) if values is None else values
    g = belief.members @ v
    lam = order_statistic_weights(g, belief.weights, cfg.N, cfg.k)
    T = np.einsum("sam,samt->sat", lam, belief.members)
    return T / T.sum(-1, keepdims=True)


# --- monotonicity sweeps ----------------------------------------------------

@dataclass
class SweepPoint:
    grid: str
    N: int
    k: int
    q: np.ndarray
    J: float
    residual: float


@dataclass
class SweepResult:
    points: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def grid(self, name: str) -> list:
        return [p for p in self.points if p.grid == name]

    def to_csv(self, path: str | Path):
        flag_str = ";".join(f"{name}={'pass' if ok else 'FAIL'}" for name, ok in self.flags.items())
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["N", "k", "J", "sup_norm_residual", "monotone_flags"])
            for p in self.points:
                w.writerow([p.N, p.k, repr(p.J), repr(p.residual), flag_str])


def _is_chain(qs: list, direction: int, slack: float) -> bool:
    """Element-wise non-decreasing (``direction=+1``) or non-increasing chain."""
    return all(np.all(direction * (b - a) >= -slack) for a, b in zip(qs, qs[1:]))


def sweep_monotonicity(pi: np.ndarray, belief, mdp: TabularMDP, n_max: int = 8, k_fixed: int = 2,
                       n_fixed: int | None = None, evaluator=None,
                       slack: float = MONOTONE_SLACK) -> SweepResult:
    """Fixed points over three lattices and the three monotonicity flags.

    Grids: ``k=k_fixed`` with ``N in {k_fixed..n_max}``; ``N=n_fixed`` with
    ``k in {1..n_fixed}``; and the diagonal ``N=k in {1..n_max}``.
    ``evaluator(cfg) -> (q, J, residual)`` defaults to the unregularised solve.
    """
    n_fixed = n_max if n_fixed is None else n_fixed
    if evaluator is None:
        def evaluator(cfg):
            q, J = evaluate_policy_pessimistic(pi, belief, cfg, mdp)
            res = float(np.max(np.abs(pessimistic_backup(q, pi, belief, cfg, mdp) - q)))
            return q, J, res

    result = SweepResult()
    cache = {}
    grids = {
        "N_at_fixed_k": [(N, k_fixed) for N in range(k_fixed, n_max + 1)],
        "k_at_fixed_N": [(n_fixed, k) for k in range(1, n_fixed + 1)],
        "diagonal": [(N, N) for N in range(1, n_max + 1)],
    }
    for name, pairs in grids.items():
        for N, k in pairs:
            if (N, k) not in cache:
                cache[N, k] = evaluator(PessimismConfig(N, k))
            q, J, res = cache[N, k]
            result.points.append(SweepPoint(name, N, k, q, J, res))
    result.flags = {
        "decreasing_in_N": _is_chain([p.q for p in result.grid("N_at_fixed_k")], -1, slack),
        "increasing_in_k": _is_chain([p.q for p in result.grid("k_at_fixed_N")], +1, slack),
        "diagonal_increasing": _is_chain([p.q for p in result.grid("diagonal")], +1, slack),
    }
    return result
