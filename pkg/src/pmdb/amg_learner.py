"""Tabular learner that plays the game and regresses on its residuals.

One learner step:

1. primary players act from ``pi_ref * exp(Q / alpha)`` (the non-parametric tilt);
2. fresh candidate sets are drawn and overwrite the one-record-per-game buffer;
3. Q moves toward the soft targets of both the game buffer and a dataset
   minibatch, with targets built from ``Q_target`` and ``pi_ref``;
4. the policy moves toward the Boltzmann tilt of ``pi_ref`` by the live Q;
5. secondary players pick the k-th smallest soft continuation (or explore);
6. games advance; terminal or timed-out games restart at dataset states;
7. ``pi_ref`` and ``Q_target`` track the live tables by moving averages.

The "gradient step" on a table is a convex move of each touched cell toward
the weighted mean of its targets, ``eta = min(1, lr * total_weight)``.

Each step reads a fixed block of random numbers (:class:`StepNoise`), drawn
whatever happens in the games. The numpy step here and the compiled kernel in
:mod:`pmdb._learner_kernel` consume the same blocks, so the two backends follow
the same trajectory up to rounding.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .belief import EnsembleBelief
from .data import Dataset
from .mdp_core import POSITIVE_FLOOR, TabularMDP, evaluate_policy_exact, floor_policy, uniform_policy
from .pessimistic_eval import PessimismConfig, evaluate_policy_pessimistic
from .regularized_opt import RegularizationConfig, auto_alpha_states, boltzmann_policy, soft_values

log = logging.getLogger(__name__)


@dataclass
class LearnerConfig:
    q_lr: float = 0.01
    policy_lr: float = 0.1
    batch_size_mdp: int = 128
    parallel_games: int = 128
    epsilon: float = 0.1
    omega1: float = 1e-5
    omega2: float = 5e-3
    alpha: float = 0.1
    amg_loss_weight: float = 1.0
    mdp_loss_weight: float = 1.0
    N: int = 10
    k: int = 2
    max_steps: int = 100_000
    horizon: int = 1000
    eval_every: int = 10_000
    secondary_uses_target: bool = False
    auto_alpha: bool = False
    alpha_floor: float = 0.1
    kl_budget: float = 0.1

    def __post_init__(self):
        if self.q_lr <= 0 or not 0 < self.policy_lr <= 1:
            raise ValueError("q_lr must be positive and policy_lr must lie in (0, 1]")
        if not (0 < self.omega1 <= 1 and 0 < self.omega2 <= 1):
            raise ValueError("omega1 and omega2 must lie in (0, 1]")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.amg_loss_weight < 0 or self.mdp_loss_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.amg_loss_weight + self.mdp_loss_weight <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.batch_size_mdp < 1 or self.parallel_games < 1 or self.horizon < 1:
            raise ValueError("batch size, game count and horizon must be positive")
        if self.max_steps < 0 or self.eval_every < 0:
            raise ValueError("max_steps and eval_every must be nonnegative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        self.pessimism  # validates N and k
        self.regularization  # validates the auto-alpha settings

    @property
    def pessimism(self) -> PessimismConfig:
        return PessimismConfig(self.N, self.k)

    @property
    def regularization(self) -> RegularizationConfig:
        return RegularizationConfig(self.alpha, self.alpha_floor, self.kl_budget, self.auto_alpha)


@dataclass
class LearnerState:
    q: np.ndarray
    q_target: np.ndarray
    policy: np.ndarray
    policy_ref: np.ndarray
    game_states: np.ndarray
    game_steps: np.ndarray
    buffer_s: np.ndarray
    buffer_a: np.ndarray
    buffer_members: np.ndarray | None = None
    buffer_vectors: np.ndarray | None = None
    step_count: int = 0

    @property
    def num_games(self) -> int:
        return len(self.game_states)

    def candidate_vectors(self, belief) -> np.ndarray | None:
        """Buffered candidate sets as probability vectors, shape ``(C, N, S)``."""
        if self.buffer_members is not None:
            return belief.members[self.buffer_s[:, None], self.buffer_a[:, None], self.buffer_members]
        return self.buffer_vectors


@dataclass
class StepNoise:
    """Random numbers for one learner step, or ``K`` steps stacked on a leading axis."""

    u_action: np.ndarray      # (C,) primary action draws
    u_members: np.ndarray     # (C, N) member draws, used by ensembles
    batch: np.ndarray         # (B,) dataset minibatch rows
    u_explore: np.ndarray     # (C,) explore coin of the secondary player
    explore_pick: np.ndarray  # (C,) candidate taken when exploring
    u_next: np.ndarray        # (C,) next-state draws
    restart: np.ndarray       # (C,) dataset rows for games that restart

    @classmethod
    def draw(cls, rng: np.random.Generator, steps: int, cfg: "LearnerConfig", num_records: int) -> "StepNoise":
        K, C, N = steps, cfg.parallel_games, cfg.N
        return cls(
            u_action=rng.random((K, C)), u_members=rng.random((K, C, N)),
            batch=rng.integers(0, num_records, size=(K, cfg.batch_size_mdp)),
            u_explore=rng.random((K, C)), explore_pick=rng.integers(0, N, size=(K, C)),
            u_next=rng.random((K, C)), restart=rng.integers(0, num_records, size=(K, C)),
        )

    def at(self, i: int) -> "StepNoise":
        return StepNoise(**{f.name: getattr(self, f.name)[i] for f in fields(self)})


def init_learner(mdp: TabularMDP, dataset: Dataset, belief, cfg: LearnerConfig,
                 rng: np.random.Generator) -> LearnerState:
    """Zero Q, uniform policy, copied targets and ``C`` games started at dataset states."""
    if len(dataset) == 0:
        raise ValueError("the learner needs a non-empty dataset")
    dataset.check_indices(mdp.num_states, mdp.num_actions)
    if (belief.num_states, belief.num_actions) != (mdp.num_states, mdp.num_actions):
        raise ValueError("belief and MDP sizes differ")
    S, A = mdp.num_states, mdp.num_actions
    q = np.zeros((S, A))
    policy = uniform_policy(S, A)
    starts = dataset.s[rng.integers(0, len(dataset), size=cfg.parallel_games)]
    C = cfg.parallel_games
    return LearnerState(
        q=q, q_target=q.copy(), policy=policy, policy_ref=policy.copy(),
        game_states=starts.copy(), game_steps=np.zeros(C, dtype=np.int64),
        buffer_s=starts.copy(), buffer_a=np.zeros(C, dtype=np.int64),
    )


def _alpha_for(state: LearnerState, cfg: LearnerConfig):
    """Scalar alpha, or one auto-tuned coefficient per state."""
    if not cfg.auto_alpha:
        return cfg.alpha
    return auto_alpha_states(state.q, state.policy_ref, cfg.regularization)


def first_above(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Categorical draw per row: first index whose running sum exceeds ``u``."""
    cum = np.cumsum(probs, axis=-1)
    cum[..., -1] = np.inf
    return np.argmax(u[..., None] < cum, axis=-1)


def kth_position(g: np.ndarray, k: int) -> np.ndarray:
    """Index of the k-th smallest entry per row, lowest index first among ties."""
    return np.argsort(g, axis=-1, kind="stable")[:, k - 1]


def _regress(q: np.ndarray, cells: np.ndarray, targets: np.ndarray, weights: np.ndarray, lr: float):
    """One step on ``0.5 * sum_i w_i (Q[cell_i] - y_i)^2``, clipped to a convex move."""
    size = q.size
    W = np.bincount(cells, weights=weights, minlength=size)
    Y = np.bincount(cells, weights=weights * targets, minlength=size)
    touched = W > 0
    flat = q.reshape(-1)
    eta = np.minimum(1.0, lr * W[touched])
    flat[touched] += eta * (Y[touched] / W[touched] - flat[touched])


def numpy_step(state: LearnerState, noise: StepNoise, dataset: Dataset, belief, cfg: LearnerConfig,
               mdp: TabularMDP, rng: np.random.Generator) -> dict:
    """One loop iteration driven by ``noise``; ``rng`` only serves Dirichlet candidate draws."""
    S, A = mdp.num_states, mdp.num_actions
    gamma = mdp.discount
    C = state.num_games
    s = state.game_states

    # primary players act from the tilt of the reference policy by the live Q
    alpha = _alpha_for(state, cfg)
    a = first_above(noise.u_action, boltzmann_policy(state.q, state.policy_ref, alpha, floor=0.0)[s])

    # candidate sets for the new game transitions replace the buffer; ensembles
    # keep member indices and look continuations up in members @ v
    ensemble = isinstance(belief, EnsembleBelief)
    if ensemble:
        idx = belief.indices_from_uniforms(s, a, noise.u_members)
        state.buffer_members, state.buffer_vectors = idx, None
    else:
        candidates, _ = belief.draw(s, a, cfg.N, rng)
        state.buffer_members, state.buffer_vectors = None, candidates
    state.buffer_s, state.buffer_a = s.copy(), a

    def continuations(v):
        if ensemble:
            return (belief.members @ v)[s[:, None], a[:, None], idx]
        return candidates @ v

    # Q regression on the game buffer and a dataset minibatch
    v_target = soft_values(state.q_target, state.policy_ref, alpha)
    g_amg = continuations(v_target)
    y_amg = mdp.reward[s, a] + gamma * np.partition(g_amg, cfg.k - 1, axis=-1)[:, cfg.k - 1]
    batch = noise.batch
    bs, ba = dataset.s[batch], dataset.a[batch]
    y_mdp = mdp.reward[bs, ba] + gamma * np.where(dataset.done[batch], 0.0, v_target[dataset.s_next[batch]])
    cells = np.concatenate([s * A + a, bs * A + ba])
    targets = np.concatenate([y_amg, y_mdp])
    weights = np.concatenate([np.full(C, cfg.amg_loss_weight), np.full(len(batch), cfg.mdp_loss_weight)])
    amg_residual = float(np.abs(state.q[s, a] - y_amg).mean())
    mdp_residual = float(np.abs(state.q[bs, ba] - y_mdp).mean())
    _regress(state.q, cells, targets, weights, cfg.q_lr)

    # policy rows visited in either source move toward the Boltzmann target
    visited = np.flatnonzero(np.bincount(np.concatenate([s, bs]), minlength=S))
    target = boltzmann_policy(state.q, state.policy_ref, alpha, floor=0.0)
    mixed = (1.0 - cfg.policy_lr) * state.policy[visited] + cfg.policy_lr * target[visited]
    state.policy[visited] = floor_policy(mixed, POSITIVE_FLOOR)

    # secondary players: k-th smallest soft continuation, or explore
    q_choice = state.q_target if cfg.secondary_uses_target else state.q
    v_choice = soft_values(q_choice, state.policy_ref, alpha)
    chosen = kth_position(continuations(v_choice), cfg.k)
    chosen = np.where(noise.u_explore < cfg.epsilon, noise.explore_pick, chosen)
    if ensemble:
        tau = belief.members[s, a, idx[np.arange(C), chosen]]
    else:
        tau = candidates[np.arange(C), chosen]
    s_next = first_above(noise.u_next, tau)

    # advance; restart finished games at dataset states
    state.game_steps += 1
    done = mdp.terminal_mask[s_next] | (state.game_steps >= cfg.horizon)
    s_next = np.where(done, dataset.s[noise.restart], s_next)
    state.game_steps[done] = 0
    state.game_states = s_next

    # slow-moving copies
    if cfg.omega1 == 1.0:
        state.policy_ref = state.policy.copy()
    else:
        ref = cfg.omega1 * state.policy + (1.0 - cfg.omega1) * state.policy_ref
        state.policy_ref = ref / ref.sum(axis=-1, keepdims=True)
    if cfg.omega2 == 1.0:
        state.q_target = state.q.copy()
    else:
        state.q_target = cfg.omega2 * state.q + (1.0 - cfg.omega2) * state.q_target
    state.step_count += 1
    return {"amg_residual": amg_residual, "mdp_residual": mdp_residual, "mean_q": float(state.q.mean())}


def learner_step(state: LearnerState, dataset: Dataset, belief, cfg: LearnerConfig,
                 mdp: TabularMDP, rng: np.random.Generator) -> tuple[LearnerState, dict]:
    """Advance the learner by one loop iteration, updating ``state`` in place."""
    noise = StepNoise.draw(rng, 1, cfg, len(dataset)).at(0)
    return state, numpy_step(state, noise, dataset, belief, cfg, mdp, rng)


def candidate_uncertainty(candidates: np.ndarray) -> float:
    """Mean over games of ``log std`` of the candidates' expected next-state index."""
    S = candidates.shape[-1]
    means = candidates @ np.arange(S, dtype=float)
    return float(np.mean(np.log(np.maximum(means.std(axis=-1), 1e-12))))


@dataclass
class TrainResult:
    policy_ref: np.ndarray
    curve: list = field(default_factory=list)
    state: LearnerState | None = None

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "J_amg", "J_true", "mean_q", "mean_uncertainty"])
            for row in self.curve:
                w.writerow([row["step"], repr(row["J_amg"]),
                            "" if row["J_true"] is None else repr(row["J_true"]),
                            repr(row["mean_q"]), repr(row["mean_uncertainty"])])


def compiled_backend_available(belief, cfg: LearnerConfig) -> bool:
    """The compiled kernel covers ensemble beliefs with a fixed alpha."""
    return isinstance(belief, EnsembleBelief) and not cfg.auto_alpha


def run_steps(state: LearnerState, steps: int, dataset: Dataset, belief, cfg: LearnerConfig,
              mdp: TabularMDP, rng: np.random.Generator, backend: str = "numpy"):
    """Draw one noise block for ``steps`` steps and apply it with ``backend``."""
    noise = StepNoise.draw(rng, steps, cfg, len(dataset))
    if backend == "compiled":
        from ._learner_kernel import apply_noise
        apply_noise(state, noise, dataset, belief, cfg, mdp)
    else:
        for i in range(steps):
            numpy_step(state, noise.at(i), dataset, belief, cfg, mdp, rng)


def train(state: LearnerState, dataset: Dataset, belief, cfg: LearnerConfig, mdp: TabularMDP,
          rng: np.random.Generator, true_transition: np.ndarray | None = None,
          eval_belief=None, backend: str = "auto", chunk: int = 1000) -> TrainResult:
    """Run ``cfg.max_steps`` learner steps and return the reference policy.

    Every ``eval_every`` steps (and at the end) ``pi_ref`` is evaluated on the
    game (exact pessimistic evaluation) and, when ``true_transition`` is given,
    on the ground-truth MDP. ``backend`` is ``"numpy"``, ``"compiled"`` or
    ``"auto"`` (compiled whenever it applies). Noise is drawn ``chunk`` steps
    at a time, so a seed reproduces a run for a fixed ``chunk``.
    """
    if backend == "auto":
        backend = "compiled" if compiled_backend_available(belief, cfg) else "numpy"
    if backend not in ("numpy", "compiled"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "compiled" and not compiled_backend_available(belief, cfg):
        raise ValueError("the compiled backend needs an ensemble belief and a fixed alpha")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    eval_belief = belief if eval_belief is None else eval_belief
    result = TrainResult(state.policy_ref)

    def checkpoint():
        pi = state.policy_ref
        _, J_amg = evaluate_policy_pessimistic(pi, eval_belief, cfg.pessimism, mdp)
        J_true = None if true_transition is None else evaluate_policy_exact(mdp, true_transition, pi)[1]
        vecs = state.candidate_vectors(belief)
        unc = float("nan") if vecs is None else candidate_uncertainty(vecs)
        row = {"step": state.step_count, "J_amg": J_amg, "J_true": J_true,
               "mean_q": float(state.q.mean()), "mean_uncertainty": unc}
        result.curve.append(row)
        log.debug("step %d J_amg %.6f J_true %s", state.step_count, J_amg, J_true)

    remaining = cfg.max_steps
    while remaining > 0:
        steps = min(chunk, remaining)
        if cfg.eval_every:
            steps = min(steps, cfg.eval_every - state.step_count % cfg.eval_every)
        run_steps(state, steps, dataset, belief, cfg, mdp, rng, backend)
        remaining -= steps
        if cfg.eval_every and state.step_count % cfg.eval_every == 0:
            checkpoint()
    if not result.curve or result.curve[-1]["step"] != state.step_count:
        checkpoint()
    result.policy_ref = state.policy_ref
    result.state = state
    return result


def config_dict(cfg: LearnerConfig) -> dict:
    return asdict(cfg)
