"""Finite MDPs, exact policy evaluation and the standard Bellman backup.

Tables are plain numpy arrays:

* transition model ``T``: shape ``(S, A, S)``, ``T[s, a, s']``
* policy ``pi``: shape ``(S, A)``, rows on the simplex
* Q table: shape ``(S, A)``
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STOCHASTIC_TOL = 1e-12
FIXED_POINT_TOL = 1e-12
MAX_SWEEPS = 1_000_000
POSITIVE_FLOOR = 1e-12


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point iteration hits its sweep cap."""


@dataclass
class TabularMDP:
    """Known parts of a finite MDP: rewards, discount, start law, terminals."""

    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    terminal_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.reward = np.asarray(self.reward, dtype=float)
        if self.reward.ndim != 2:
            raise ValueError(f"reward must be (S, A), got shape {self.reward.shape}")
        S = self.reward.shape[0]
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        if self.terminal_mask is None:
            self.terminal_mask = np.zeros(S, dtype=bool)
        self.terminal_mask = np.asarray(self.terminal_mask, dtype=bool)
        self.validate()

    @property
    def num_states(self) -> int:
        return self.reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward.shape[1]

    def validate(self):
        S = self.num_states
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if self.initial_dist.shape != (S,):
            raise ValueError(f"initial_dist must have shape ({S},)")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError("initial_dist is not a probability vector")
        if self.terminal_mask.shape != (S,):
            raise ValueError(f"terminal_mask must have shape ({S},)")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("reward table must be finite")
        if np.any(self.reward[self.terminal_mask] != 0.0):
            bad = int(np.flatnonzero(self.terminal_mask & np.any(self.reward != 0, axis=1))[0])
            raise ValueError(f"terminal state {bad} has nonzero reward")

    def reward_bounds(self) -> tuple[float, float]:
        """Bounds on any Q fixed point: ``[r_min, r_max] / (1 - gamma)``."""
        scale = 1.0 / (1.0 - self.discount)
        return float(self.reward.min()) * scale, float(self.reward.max()) * scale

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "reward": self.reward.ravel().tolist(),
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
            "terminal_mask": self.terminal_mask.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMDP":
        S, A = int(d["num_states"]), int(d["num_actions"])
        reward = np.asarray(d["reward"], dtype=float).reshape(S, A)
        return cls(
            reward=reward,
            discount=float(d["discount"]),
            initial_dist=np.asarray(d["initial_dist"], dtype=float),
            terminal_mask=np.asarray(d.get("terminal_mask", [False] * S), dtype=bool),
        )


def check_transition(T: np.ndarray, mdp: TabularMDP | None = None) -> np.ndarray:
    """Validate a transition table, naming the first offending ``(s, a)``."""
    T = np.asarray(T, dtype=float)
    if T.ndim != 3 or T.shape[0] != T.shape[2]:
        raise ValueError(f"transition model must be (S, A, S), got shape {T.shape}")
    if mdp is not None and T.shape[:2] != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"transition shape {T.shape} does not match MDP "
            f"({mdp.num_states}, {mdp.num_actions})"
        )
    bad = np.any(T < 0, axis=-1) | (np.abs(T.sum(axis=-1) - 1.0) > STOCHASTIC_TOL)
    if bad.any():
        s, a = np.argwhere(bad)[0]
        raise ValueError(f"transition row (s={s}, a={a}) is not a probability vector")
    if mdp is not None and mdp.terminal_mask.any():
        for s in np.flatnonzero(mdp.terminal_mask):
            if np.any(T[s, :, s] != 1.0):
                raise ValueError(f"terminal state {s} is not absorbing")
    return T


def check_policy(pi: np.ndarray, num_states: int | None = None,
                 strictly_positive: bool = False) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2:
        raise ValueError(f"policy must be (S, A), got shape {pi.shape}")
    if num_states is not None and pi.shape[0] != num_states:
        raise ValueError(f"policy has {pi.shape[0]} rows, expected {num_states}")
    bad = np.any(pi < 0, axis=-1) | (np.abs(pi.sum(axis=-1) - 1.0) > STOCHASTIC_TOL)
    if bad.any():
        raise ValueError(f"policy row s={int(np.flatnonzero(bad)[0])} is not a probability vector")
    if strictly_positive and np.any(pi < POSITIVE_FLOOR):
        s, a = np.argwhere(pi < POSITIVE_FLOOR)[0]
        raise ValueError(f"policy entry (s={s}, a={a}) is below {POSITIVE_FLOOR}")
    return pi


def uniform_policy(num_states: int, num_actions: int) -> np.ndarray:
    return np.full((num_states, num_actions), 1.0 / num_actions)


def floor_policy(pi: np.ndarray, floor: float = POSITIVE_FLOOR) -> np.ndarray:
    """Mix each row with the uniform floor so every entry is at least ``floor``."""
    A = pi.shape[-1]
    out = (1.0 - A * floor) * pi + floor
    # renormalising can push a floored entry one ulp below the floor
    return np.maximum(out / out.sum(axis=-1, keepdims=True), floor)


def state_values(q: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) Q(s, a)``."""
    return np.einsum("sa,sa->s", pi, q)


def bellman_backup(q: np.ndarray, mdp: TabularMDP, T: np.ndarray, pi: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.discount * (T @ state_values(q, pi))


def policy_transition(T: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """State-action chain ``P[(s,a), (s',a')] = T(s'|s,a) pi(a'|s')``."""
    S, A, _ = T.shape
    return (T[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)


def expected_start_value(q: np.ndarray, pi: np.ndarray, initial_dist: np.ndarray) -> float:
    return float(initial_dist @ state_values(q, pi))


def evaluate_policy_exact(mdp: TabularMDP, T: np.ndarray, pi: np.ndarray,
                          method: str = "solve") -> tuple[np.ndarray, float]:
    """Q^pi under a fixed transition model and the return ``J(pi, T)``.

    ``method="solve"`` solves ``(I - gamma P^pi) q = r`` directly and polishes
    with backups; ``method="iterate"`` runs synchronous sweeps to 1e-12.
    """
    T = check_transition(T, mdp)
    pi = check_policy(pi, mdp.num_states)
    if method == "solve":
        S, A = mdp.reward.shape
        P = policy_transition(T, pi)
        q = np.linalg.solve(np.eye(S * A) - mdp.discount * P, mdp.reward.ravel()).reshape(S, A)
        # a couple of backups remove the solver's residual roundoff
        for _ in range(2):
            q = bellman_backup(q, mdp, T, pi)
    elif method == "iterate":
        q = iterate_to_fixed_point(lambda x: bellman_backup(x, mdp, T, pi),
                                   np.zeros_like(mdp.reward))[0]
    else:
        raise ValueError(f"unknown method {method!r}")
    return q, expected_start_value(q, pi, mdp.initial_dist)


def iterate_to_fixed_point(operator, q0: np.ndarray, tol: float = FIXED_POINT_TOL,
                           max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, float, int]:
    """Jacobi iteration of ``operator`` until the sup-norm residual drops below ``tol``.

    Returns the last iterate, its residual and the number of sweeps.
    """
    q = q0
    for sweep in range(1, max_sweeps + 1):
        q_next = operator(q)
        residual = float(np.max(np.abs(q_next - q)))
        q = q_next
        if residual < tol:
            return q, residual, sweep
    raise ConvergenceError(f"no fixed point after {max_sweeps} sweeps (residual {residual:.3e})")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic argmax policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


def value_iteration(mdp: TabularMDP, T: np.ndarray, tol: float = FIXED_POINT_TOL,
                    max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Optimal Q for a known transition model."""
    T = check_transition(T, mdp)
    op = lambda q: mdp.reward + mdp.discount * (T @ q.max(axis=1))
    return iterate_to_fixed_point(op, np.zeros_like(mdp.reward), tol, max_sweeps)[0]


def save_mdp(path: str | Path, mdp: TabularMDP, T: np.ndarray | None = None):
    doc = mdp.to_dict()
    if T is not None:
        doc["transition"] = np.asarray(T).tolist()
    Path(path).write_text(json.dumps(doc, indent=1))


def load_mdp(path: str | Path) -> tuple[TabularMDP, np.ndarray | None]:
    doc = json.loads(Path(path).read_text())
    mdp = TabularMDP.from_dict(doc)
    T = doc.get("transition")
    if T is not None:
        T = check_transition(np.asarray(T, dtype=float), mdp)
    return mdp, T
