"""KL-regularised optimisation on the alternating Markov game.

Soft backup (continuation is a log-mean-exp under the reference ``mu``)::

    (B* Q)(s, a) = r(s, a) + gamma * E[ kth_min_tau tau @ (alpha log E_mu exp(Q / alpha)) ]

Its fixed point ``Q*`` yields the regularised optimum ``pi* ∝ mu exp(Q* / alpha)``.
Iterating that solve with ``mu`` set to the previous optimum improves the
unregularised game return at every step.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp_core import (FIXED_POINT_TOL, MAX_SWEEPS, POSITIVE_FLOOR, TabularMDP, check_policy,
                       floor_policy, iterate_to_fixed_point, state_values)
from .pessimistic_eval import (FrozenSampleBank, PessimismConfig, equivalent_transition,
                               evaluate_policy_pessimistic, make_cache, pessimistic_expectation,
                               sweep_monotonicity)

MONOTONE_TOL = 1e-9
STALL_TOL = 1e-10
STALL_PATIENCE = 3


class MonotonicityError(AssertionError):
    """Raised when an RPO iterate lowers the game return beyond tolerance."""

    def __init__(self, message: str, trace: "RpoTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class RegularizationConfig:
    alpha: float = 0.1
    alpha_floor: float = 0.1
    kl_budget: float = 0.1
    auto_alpha: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.alpha_floor <= 0 or self.kl_budget <= 0:
            raise ValueError("alpha_floor and kl_budget must be positive")
        if self.auto_alpha and self.alpha < self.alpha_floor:
            raise ValueError("alpha must be >= alpha_floor when auto_alpha is enabled")


def _alpha_column(alpha):
    if isinstance(alpha, (float, int)):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        return float(alpha)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    return alpha[..., None] if alpha.ndim == 1 else alpha


def soft_values(q: np.ndarray, mu: np.ndarray, alpha) -> np.ndarray:
    """``alpha * log sum_a mu(a|s) exp(Q(s, a) / alpha)`` per state, max-shifted.

    ``alpha`` may be a scalar or one value per state.
    """
    top = q.max(axis=-1, keepdims=True)
    z = np.sum(mu * np.exp((q - top) / _alpha_column(alpha)), axis=-1)
    return top[..., 0] + np.asarray(alpha, dtype=float) * np.log(z)


def boltzmann_policy(q: np.ndarray, mu: np.ndarray, alpha, floor: float = POSITIVE_FLOOR) -> np.ndarray:
    """Rows of ``mu * exp(Q / alpha)``, normalised in the log domain and floored."""
    a = _alpha_column(alpha)
    with np.errstate(divide="ignore"):
        logits = np.log(mu) + q / a
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return floor_policy(p, floor) if floor else p


def kl_rows(pi: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """``KL(pi(.|s) || mu(.|s))`` per state, with ``0 log 0 = 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pi > 0, pi * (np.log(pi) - np.log(mu)), 0.0)
    return terms.sum(axis=-1)


def regularized_values(q: np.ndarray, pi: np.ndarray, mu: np.ndarray, alpha) -> np.ndarray:
    """``E_pi[Q(s, .)] - alpha KL(pi || mu)`` per state."""
    return state_values(q, pi) - np.asarray(alpha) * kl_rows(pi, mu)


def _check_reference(mu, num_states):
    return check_policy(mu, num_states, strictly_positive=True)


def soft_pessimistic_backup(q: np.ndarray, mu: np.ndarray, belief, cfg: PessimismConfig,
                            reg: RegularizationConfig, mdp: TabularMDP,
                            bank: FrozenSampleBank | None = None, cache=None,
                            alpha=None) -> np.ndarray:
    alpha = reg.alpha if alpha is None else alpha
    v = soft_values(q, mu, alpha)
    return mdp.reward + mdp.discount * pessimistic_expectation(belief, v, cfg, bank, cache=cache)


def regularized_backup(q: np.ndarray, pi: np.ndarray, mu: np.ndarray, belief, cfg: PessimismConfig,
                       reg: RegularizationConfig, mdp: TabularMDP,
                       bank: FrozenSampleBank | None = None, cache=None) -> np.ndarray:
    """Regularised evaluation backup: the KL penalty sits inside the k-th minimum."""
    v = regularized_values(q, pi, mu, reg.alpha)
    return mdp.reward + mdp.discount * pessimistic_expectation(belief, v, cfg, bank, cache=cache)


def solve_regularized(mu: np.ndarray, belief, cfg: PessimismConfig, reg: RegularizationConfig,
                      mdp: TabularMDP, bank: FrozenSampleBank | None = None,
                      tol: float = FIXED_POINT_TOL,
                      max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Soft fixed point ``Q*`` and the regularised optimal policy."""
    mu = _check_reference(mu, mdp.num_states)
    cache = make_cache(belief, cfg, bank)
    op = lambda q: soft_pessimistic_backup(q, mu, belief, cfg, reg, mdp, bank, cache)
    q, _, _ = iterate_to_fixed_point(op, np.zeros_like(mdp.reward), tol, max_sweeps)
    return q, boltzmann_policy(q, mu, reg.alpha)


def evaluate_regularized(pi: np.ndarray, mu: np.ndarray, belief, cfg: PessimismConfig,
                         reg: RegularizationConfig, mdp: TabularMDP,
                         bank: FrozenSampleBank | None = None, tol: float = FIXED_POINT_TOL,
                         max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, float]:
    """Regularised Q of ``pi`` and ``J(pi; mu) = E_rho0[V_pi - alpha KL(pi || mu)]``."""
    pi = check_policy(pi, mdp.num_states)
    mu = _check_reference(mu, mdp.num_states)
    cache = make_cache(belief, cfg, bank)
    op = lambda q: regularized_backup(q, pi, mu, belief, cfg, reg, mdp, bank, cache)
    q, _, _ = iterate_to_fixed_point(op, np.zeros_like(mdp.reward), tol, max_sweeps)
    return q, float(mdp.initial_dist @ regularized_values(q, pi, mu, reg.alpha))


def regularized_equivalent_transition(belief, q_fixedpoint, pi, mu, cfg, reg, mdp):
    """Equivalent transition for the KL-regularised game at ``Q^pi``."""
    return equivalent_transition(
        belief, q_fixedpoint, pi, cfg, mdp,
        values=regularized_values(q_fixedpoint, pi, mu, reg.alpha),
        backup=lambda q: regularized_backup(q, pi, mu, belief, cfg, reg, mdp))


def regularized_sweep(pi, mu, belief, mdp, reg: RegularizationConfig, **kwargs):
    """Monotonicity lattice for the regularised fixed points of a fixed ``pi``."""
    def evaluator(cfg):
        q, J = evaluate_regularized(pi, mu, belief, cfg, reg, mdp)
        res = float(np.max(np.abs(regularized_backup(q, pi, mu, belief, cfg, reg, mdp) - q)))
        return q, J, res
    return sweep_monotonicity(pi, belief, mdp, evaluator=evaluator, **kwargs)


# --- iterative regularised policy optimisation --------------------------------

@dataclass
class RpoTrace:
    policies: list = field(default_factory=list)
    q_stars: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    @property
    def final_policy(self) -> np.ndarray:
        return self.policies[-1]

    @property
    def final_return(self) -> float:
        return self.returns[-1]

    def is_monotone(self, tol: float = MONOTONE_TOL) -> bool:
        return all(b >= a - tol for a, b in zip(self.returns, self.returns[1:]))

    def records(self) -> list:
        return [{"iter": i, "J": J, "residual": res, "policy": pi.tolist()}
                for i, (J, res, pi) in enumerate(zip(self.returns, self.residuals, self.policies))]

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.records())
        if path is not None:
            Path(path).write_text(text)
        return text


def iterate_rpo(pi0: np.ndarray, belief, cfg: PessimismConfig, reg: RegularizationConfig,
                mdp: TabularMDP, num_iters: int, bank: FrozenSampleBank | None = None,
                tol: float = FIXED_POINT_TOL) -> RpoTrace:
    """Repeatedly solve the regularised sub-problem anchored at the last policy.

    Entry 0 of the trace is ``pi0`` itself. Stops after ``num_iters`` solves or
    once ``J`` improves by less than 1e-10 three times in a row.
    """
    pi = _check_reference(pi0, mdp.num_states)
    _, J = evaluate_policy_pessimistic(pi, belief, cfg, mdp, bank, tol)
    trace = RpoTrace([pi], [None], [J], [0.0])
    stalled = 0
    for i in range(1, num_iters + 1):
        q_star, pi_next = solve_regularized(pi, belief, cfg, reg, mdp, bank, tol)
        residual = float(np.max(np.abs(
            soft_pessimistic_backup(q_star, pi, belief, cfg, reg, mdp, bank) - q_star)))
        _, J_next = evaluate_policy_pessimistic(pi_next, belief, cfg, mdp, bank, tol)
        trace.policies.append(pi_next)
        trace.q_stars.append(q_star)
        trace.returns.append(J_next)
        trace.residuals.append(residual)
        if J_next < J - MONOTONE_TOL:
            raise MonotonicityError(
                f"J decreased at iteration {i}: {J!r} -> {J_next!r}\ntrace: {trace.to_json()}", trace)
        stalled = stalled + 1 if J_next - J < STALL_TOL else 0
        pi, J = pi_next, J_next
        if stalled >= STALL_PATIENCE:
            break
    return trace


@dataclass
class DeterministicGap:
    best_return: float
    best_policy: np.ndarray
    rpo_return: float

    @property
    def gap(self) -> float:
        """Best deterministic return minus the RPO return; may be negative."""
        return self.best_return - self.rpo_return


def best_deterministic_gap(trace: RpoTrace, belief, cfg: PessimismConfig, mdp: TabularMDP,
                           bank: FrozenSampleBank | None = None,
                           max_policies: int = 4096) -> DeterministicGap:
    """Exhaustive search over deterministic policies, compared with ``trace``.

    Limit-of-iteration optimality is not guaranteed, so this only measures the
    gap. Refuses instances with more than ``max_policies`` policies.
    """
    S, A = mdp.num_states, mdp.num_actions
    if A ** S > max_policies:
        raise ValueError(f"{A}^{S} deterministic policies exceed max_policies={max_policies}")
    eye = np.eye(A)
    best_J, best_pi = -np.inf, None
    for actions in itertools.product(range(A), repeat=S):
        pi = eye[list(actions)]
        _, J = evaluate_policy_pessimistic(pi, belief, cfg, mdp, bank)
        if J > best_J:
            best_J, best_pi = J, pi
    return DeterministicGap(float(best_J), best_pi, float(trace.final_return))


# --- automatic KL coefficient ---------------------------------------------

def auto_alpha(q: np.ndarray, mu: np.ndarray, s: int, reg: RegularizationConfig) -> float:
    """KL coefficient for state ``s`` keeping the tilted policy within ``kl_budget``.

    ``alpha = max((E_tilt[Q] - E_mu[Q]) / d, alpha_floor)`` where the tilt is
    ``mu exp(Q / alpha_floor)``.
    """
    row, m = np.asarray(q[s], dtype=float), np.asarray(mu[s], dtype=float)
    tilt = boltzmann_policy(row[None], m[None], reg.alpha_floor, floor=0.0)[0]
    gap = float(tilt @ row - m @ row)
    return max(gap / reg.kl_budget, reg.alpha_floor)


def auto_alpha_states(q: np.ndarray, mu: np.ndarray, reg: RegularizationConfig,
                      states=None) -> np.ndarray:
    """Per-state coefficients for ``states`` (all states by default)."""
    states = range(q.shape[0]) if states is None else states
    return np.array([auto_alpha(q, mu, s, reg) for s in states])


def auto_alpha_global(q: np.ndarray, mu: np.ndarray, reg: RegularizationConfig, states=None) -> float:
    return float(auto_alpha_states(q, mu, reg, states).max())
