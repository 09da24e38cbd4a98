"""Executable alternating Markov game.

Each round the primary player acts from ``pi``, the game emits ``N``
candidate transitions for the visited ``(s, a)``, and the secondary player
keeps the candidate whose continuation value is the k-th smallest (or a
uniformly random one with probability ``epsilon``). The next state is then
drawn from the chosen candidate.

Episodes run as a vectorised batch; a single episode is a batch of one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .belief import EnsembleBelief
from .mdp_core import TabularMDP, check_policy, state_values
from .pessimistic_eval import PessimismConfig
from .regularized_opt import soft_values

DEFAULT_HORIZON = 1000
DEFAULT_EPSILON = 0.1
BATCH_SIZE = 2048


@dataclass
class GameState:
    current_state: int
    step: int = 0
    discount_accum: float = 1.0
    stream: int = 0


@dataclass
class SecondaryPolicy:
    """How the secondary player picks among candidates.

    ``mode="exact"`` always takes the k-th smallest continuation;
    ``mode="epsilon"`` explores uniformly with probability ``epsilon``.
    The continuation is ``E_pi[Q]``, or the soft value ``alpha log E_mu exp(Q/alpha)``
    when ``alpha`` and ``mu`` are given.
    """

    q: np.ndarray
    pi: np.ndarray | None = None
    mode: str = "exact"
    epsilon: float = 0.0
    alpha: float | None = None
    mu: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("exact", "epsilon"):
            raise ValueError(f"unknown secondary mode {self.mode!r}")
        if self.mode == "exact" and self.epsilon != 0.0:
            raise ValueError("exact mode requires epsilon = 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if (self.alpha is None) != (self.mu is None):
            raise ValueError("the soft continuation needs both alpha and mu")

    @classmethod
    def explore(cls, q, pi=None, epsilon: float = DEFAULT_EPSILON, **kwargs) -> "SecondaryPolicy":
        return cls(q, pi, mode="epsilon", epsilon=epsilon, **kwargs)

    def continuation(self, pi: np.ndarray) -> np.ndarray:
        if self.alpha is not None:
            return soft_values(self.q, self.mu, self.alpha)
        return state_values(self.q, pi if self.pi is None else self.pi)


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    discounted_return: float = 0.0

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "s", "a", "r", "chosen_candidate_index", "s_next"])
            w.writerows(self.steps)


@dataclass
class ReturnEstimate:
    mean: float
    stderr: float
    episodes: int
    truncation_bound: float


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` (shape ``(B, K)``)."""
    cum = np.cumsum(probs, axis=-1)
    cum[:, -1] = np.inf
    u = rng.random(len(probs))
    return np.argmax(u[:, None] < cum, axis=-1)


def select_candidates(g: np.ndarray, k: int, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Index of the k-th smallest entry per row (lowest index on ties), with exploration."""
    chosen = np.argsort(g, axis=-1, kind="stable")[:, k - 1]
    if epsilon > 0:
        explore = rng.random(len(g)) < epsilon
        random_pick = rng.integers(0, g.shape[1], size=len(g))
        chosen = np.where(explore, random_pick, chosen)
    return chosen


def _simulate(mdp, belief, pi, secondary, cfg, horizon, starts, rng, record=False):
    """Run a batch of episodes from ``starts``; returns discounted returns (and steps)."""
    E = len(starts)
    s = np.array(starts, dtype=np.int64)
    v = secondary.continuation(pi)
    ensemble_g = belief.members @ v if isinstance(belief, EnsembleBelief) else None
    returns = np.zeros(E)
    alive = ~mdp.terminal_mask[s]
    disc = 1.0
    steps = []
    for t in range(horizon):
        if not alive.any():
            break
        a = sample_rows(pi[s], rng)
        r = mdp.reward[s, a]
        returns += np.where(alive, disc * r, 0.0)
        vecs_or_idx = belief.draw(s, a, cfg.N, rng)
        if ensemble_g is not None:
            idx = vecs_or_idx[1]
            g = np.take_along_axis(ensemble_g[s, a], idx, axis=-1)
            chosen = select_candidates(g, cfg.k, secondary.epsilon, rng)
            tau = belief.members[s, a, idx[np.arange(E), chosen]]
        else:
            vecs = vecs_or_idx[0]
            g = vecs @ v
            chosen = select_candidates(g, cfg.k, secondary.epsilon, rng)
            tau = vecs[np.arange(E), chosen]
        s_next = sample_rows(tau, rng)
        if record:
            steps.append((t, int(s[0]), int(a[0]), float(r[0]), int(chosen[0]), int(s_next[0])))
        s = np.where(alive, s_next, s)
        alive &= ~mdp.terminal_mask[s]
        disc *= mdp.discount
    return returns, steps


def truncation_bound(mdp: TabularMDP, horizon: int) -> float:
    """Worst-case contribution of the rounds cut off by the horizon."""
    r_abs = float(np.abs(mdp.reward).max())
    return mdp.discount ** horizon * r_abs / (1.0 - mdp.discount)


def play_episode(mdp: TabularMDP, belief, pi: np.ndarray, secondary: SecondaryPolicy,
                 cfg: PessimismConfig, horizon: int = DEFAULT_HORIZON,
                 rng: np.random.Generator | None = None, start: int | None = None) -> Trajectory:
    """One game from ``rho0`` (or ``start``) up to a terminal state or the horizon."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    pi = check_policy(pi, mdp.num_states)
    rng = np.random.default_rng() if rng is None else rng
    if start is None:
        start = int(sample_rows(mdp.initial_dist[None], rng)[0])
    if not 0 <= start < mdp.num_states:
        raise IndexError(f"start state {start} out of range")
    returns, steps = _simulate(mdp, belief, pi, secondary, cfg, horizon, [start], rng, record=True)
    return Trajectory(steps, float(returns[0]))


def estimate_return(mdp: TabularMDP, belief, pi: np.ndarray, secondary: SecondaryPolicy,
                    cfg: PessimismConfig, horizon: int = DEFAULT_HORIZON, episodes: int = 10_000,
                    seed: int = 0) -> ReturnEstimate:
    """Monte-Carlo mean and standard error of the discounted game return.

    Episodes are simulated in fixed-size batches, each batch on its own
    stream spawned from ``seed``.
    """
    if episodes < 2:
        raise ValueError("need at least two episodes for a standard error")
    pi = check_policy(pi, mdp.num_states)
    sizes = [BATCH_SIZE] * (episodes // BATCH_SIZE)
    if episodes % BATCH_SIZE:
        sizes.append(episodes % BATCH_SIZE)
    streams = np.random.SeedSequence(seed).spawn(len(sizes))
    chunks = []
    for size, ss in zip(sizes, streams):
        rng = np.random.default_rng(ss)
        starts = rng.choice(mdp.num_states, size=size, p=mdp.initial_dist)
        chunks.append(_simulate(mdp, belief, pi, secondary, cfg, horizon, starts, rng)[0])
    returns = np.concatenate(chunks)
    return ReturnEstimate(float(np.sum(returns) / episodes),
                          float(returns.std(ddof=1) / np.sqrt(episodes)),
                          episodes, truncation_bound(mdp, horizon))
