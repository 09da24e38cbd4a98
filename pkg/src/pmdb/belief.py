"""Beliefs over transition models and the order-statistic reweighting.

A belief assigns, independently for every ``(s, a)``, a distribution over
next-state probability vectors. Two kinds are supported:

* :class:`EnsembleBelief` -- a weighted finite set of members. Every exact
  path (order-statistic expectations, reweighted beliefs, equivalent
  transitions) needs this kind.
* :class:`DirichletBelief` -- a Dirichlet posterior per row; only sampling.

For a continuation value ``v`` over next states each member ``m`` has the
pessimism indicator ``g_m = tau_m @ v``. Drawing ``N`` members i.i.d. and
keeping the ``k``-th smallest indicator is the same as drawing a single member
from the reweighted belief returned by :func:`pmdb_weights`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .data import Dataset
from .mdp_core import STOCHASTIC_TOL


class UnsupportedBeliefError(TypeError):
    """An exact computation was requested on a belief without finite support."""


def _check_order(N: int, k: int):
    if N < 1:
        raise ValueError(f"candidate-set size N must be >= 1, got {N}")
    if not 1 <= k <= N:
        raise ValueError(f"order k must satisfy 1 <= k <= N={N}, got {k}")


@dataclass
class CandidateSet:
    """``N`` candidate next-state vectors drawn for one ``(s, a)``."""

    vectors: np.ndarray
    members: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class EnsembleBelief:
    """Weighted finite ensemble: ``members[s, a, m, s']`` and ``weights[s, a, m]``."""

    members: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim != 4 or self.members.shape[0] != self.members.shape[3]:
            raise ValueError(f"members must be (S, A, M, S), got {self.members.shape}")
        S, A, M, _ = self.members.shape
        if M < 1:
            raise ValueError("ensemble needs at least one member")
        if self.weights is None:
            self.weights = np.full((S, A, M), 1.0 / M)
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (S, A, M)).copy()
        rows = self.members
        bad = np.any(rows < 0, axis=-1) | (np.abs(rows.sum(-1) - 1.0) > STOCHASTIC_TOL)
        if bad.any():
            s, a, m = np.argwhere(bad)[0]
            raise ValueError(f"member {m} row (s={s}, a={a}) is not a probability vector")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(-1) - 1.0) > STOCHASTIC_TOL):
            raise ValueError("member weights must be probability vectors per (s, a)")
        self._cum_weights = np.cumsum(self.weights, axis=-1)
        self._cum_weights[..., -1] = np.inf
        # rows laid end to end, row r shifted by 2r, so one searchsorted serves all rows
        shifted = np.minimum(self._cum_weights, 1.0) + 2.0 * np.arange(S * A).reshape(S, A, 1)
        self._flat_cum = shifted.ravel()

    kind = "ensemble"

    @property
    def num_states(self) -> int:
        return self.members.shape[0]

    @property
    def num_actions(self) -> int:
        return self.members.shape[1]

    @property
    def num_members(self) -> int:
        return self.members.shape[2]

    def mean_transition(self) -> np.ndarray:
        return np.einsum("sam,samt->sat", self.weights, self.members)

    def draw(self, s, a, n: int, rng: np.random.Generator):
        """Draw ``n`` candidates for each index pair in ``(s, a)``.

        Returns vectors of shape ``(*shape, n, S)`` and member indices ``(*shape, n)``.
        """
        s, a = np.broadcast_arrays(np.asarray(s), np.asarray(a))
        idx = self.draw_indices(s, a, n, rng)
        vecs = self.members[s[..., None], a[..., None], idx]
        return vecs, idx

    def draw_indices(self, s, a, n: int, rng: np.random.Generator) -> np.ndarray:
        """Member indices only, same stream consumption as :meth:`draw`."""
        s, a = np.broadcast_arrays(np.asarray(s), np.asarray(a))
        return self.indices_from_uniforms(s, a, rng.random(s.shape + (n,)))

    def indices_from_uniforms(self, s, a, u: np.ndarray) -> np.ndarray:
        """Member per uniform in ``u`` (shape ``(*shape, n)``): first cumulative weight above it."""
        row = (np.asarray(s) * self.num_actions + np.asarray(a))[..., None]
        M = self.num_members
        pos = np.searchsorted(self._flat_cum, 2.0 * row + u, side="right") - row * M
        return np.minimum(pos, M - 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "members": self.members.tolist(), "weights": self.weights.tolist()}


@dataclass
class DirichletBelief:
    """Independent Dirichlet law per row, ``concentration[s, a, s']``.

    States flagged in ``absorbing`` always draw their self-loop.
    """

    concentration: np.ndarray
    absorbing: np.ndarray = field(default=None)

    kind = "dirichlet"

    def __post_init__(self):
        self.concentration = np.asarray(self.concentration, dtype=float)
        if self.concentration.ndim != 3 or self.concentration.shape[0] != self.concentration.shape[2]:
            raise ValueError(f"concentration must be (S, A, S), got {self.concentration.shape}")
        if np.any(~(self.concentration > 0)):
            raise ValueError("all Dirichlet concentrations must be > 0")
        if self.absorbing is None:
            self.absorbing = np.zeros(self.num_states, dtype=bool)
        self.absorbing = np.asarray(self.absorbing, dtype=bool)

    @property
    def num_states(self) -> int:
        return self.concentration.shape[0]

    @property
    def num_actions(self) -> int:
        return self.concentration.shape[1]

    def mean_transition(self) -> np.ndarray:
        mean = self.concentration / self.concentration.sum(-1, keepdims=True)
        for s in np.flatnonzero(self.absorbing):
            mean[s] = 0.0
            mean[s, :, s] = 1.0
        return mean

    def draw(self, s, a, n: int, rng: np.random.Generator):
        s, a = np.broadcast_arrays(np.asarray(s), np.asarray(a))
        alpha = self.concentration[s, a][..., None, :]
        g = rng.standard_gamma(np.broadcast_to(alpha, s.shape + (n, self.num_states)))
        total = g.sum(-1, keepdims=True)
        degenerate = total[..., 0] == 0
        if degenerate.any():
            # every gamma variate underflowed; fall back to the exact sampler
            for pos in np.argwhere(degenerate):
                g[tuple(pos)] = rng.dirichlet(self.concentration[s[tuple(pos[:-1])], a[tuple(pos[:-1])]])
            total = g.sum(-1, keepdims=True)
        vecs = g / total
        if self.absorbing.any():
            absorb = self.absorbing[s]
            if absorb.any():
                loops = np.eye(self.num_states)[s][..., None, :]
                vecs = np.where(absorb[..., None, None], loops, vecs)
        return vecs, None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "concentration": self.concentration.tolist(),
                "absorbing": self.absorbing.tolist()}


def _check_cell(belief, s: int, a: int):
    if not (0 <= s < belief.num_states and 0 <= a < belief.num_actions):
        raise IndexError(f"(s={s}, a={a}) is outside the belief's "
                         f"{belief.num_states}x{belief.num_actions} table")


def sample_candidate_set(belief, s: int, a: int, N: int, rng: np.random.Generator) -> CandidateSet:
    """``N`` i.i.d. draws from the belief at ``(s, a)``."""
    _check_cell(belief, s, a)
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    vecs, idx = belief.draw(s, a, N, rng)
    return CandidateSet(vecs, idx)


def kth_min(values, k: int) -> float:
    """k-th smallest entry (1-based), duplicates counted with multiplicity."""
    values = np.asarray(values, dtype=float).ravel()
    if not 1 <= k <= len(values):
        raise ValueError(f"k={k} outside [1, {len(values)}]")
    return float(np.partition(values, k - 1)[k - 1])


# --- order statistics of discrete laws ------------------------------------

def binomial_tail(F, N: int, k: int) -> np.ndarray:
    """``P(Binomial(N, F) >= k)``, i.e. ``P(X_(k) <= x)`` when ``F = F(x)``.

    Summed in the log domain; exact at ``F = 0`` and ``F = 1``.
    """
    _check_order(N, k)
    F = np.asarray(F, dtype=float)
    if np.any((F < 0) | (F > 1)):
        raise ValueError("CDF values must lie in [0, 1]")
    j = np.arange(k, N + 1)
    log_binom = gammaln(N + 1) - gammaln(j + 1) - gammaln(N - j + 1)
    interior = (F > 0) & (F < 1)
    Fi = np.where(interior, F, 0.5)[..., None]
    terms = log_binom + j * np.log(Fi) + (N - j) * np.log1p(-Fi)
    top = terms.max(axis=-1, keepdims=True)
    tail = np.exp(top[..., 0]) * np.exp(terms - top).sum(axis=-1)
    out = np.where(F >= 1, 1.0, np.where(F <= 0, 0.0, tail))
    return np.minimum(out, 1.0)


def order_statistic_weights(g: np.ndarray, w: np.ndarray, N: int, k: int) -> np.ndarray:
    """Reweighted member probabilities for the k-th smallest of ``N`` draws.

    ``g`` and ``w`` have shape ``(..., M)``: indicator value and prior mass per
    member. Members with equal ``g`` form one atom; the atom's order-statistic
    mass ``G(F_hi) - G(F_lo)`` is split in proportion to prior weights.
    Returns ``lam`` with ``sum(lam * g) == E[k-th min]``.
    """
    _check_order(N, k)
    g = np.asarray(g, dtype=float)
    w = np.broadcast_to(np.asarray(w, dtype=float), g.shape)
    M = g.shape[-1]
    order = np.argsort(g, axis=-1, kind="stable")
    gs = np.take_along_axis(g, order, axis=-1)
    ws = np.take_along_axis(w, order, axis=-1)
    total = ws.sum(-1, keepdims=True)
    ws = ws / total
    cw = np.cumsum(ws, axis=-1)

    pos = np.broadcast_to(np.arange(M), g.shape)
    change = gs[..., 1:] != gs[..., :-1]
    first = np.concatenate([np.ones(g.shape[:-1] + (1,), bool), change], axis=-1)
    last = np.concatenate([change, np.ones(g.shape[:-1] + (1,), bool)], axis=-1)
    start = np.maximum.accumulate(np.where(first, pos, 0), axis=-1)
    end = np.flip(np.minimum.accumulate(np.flip(np.where(last, pos, M - 1), -1), axis=-1), -1)

    F_hi = np.take_along_axis(cw, end, axis=-1)
    F_lo = np.take_along_axis(cw - ws, start, axis=-1)
    F_hi = np.where(end == M - 1, 1.0, np.clip(F_hi, 0.0, 1.0))
    F_lo = np.where(start == 0, 0.0, np.clip(F_lo, 0.0, 1.0))
    group_w = F_hi - F_lo
    mass = binomial_tail(F_hi, N, k) - binomial_tail(F_lo, N, k)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam_sorted = np.where(group_w > 0, mass * ws / group_w, 0.0)
    lam = np.empty_like(lam_sorted)
    np.put_along_axis(lam, order, lam_sorted, axis=-1)
    return lam


class OrderWeightCache:
    """Reuses reweighting factors while the member ordering is unchanged.

    The factors depend only on the sorted order of ``g`` (and its ties), so
    during fixed-point iteration they are recomputed only when some cell's
    order or tie pattern changes.
    """

    def __init__(self, weights: np.ndarray, N: int, k: int):
        _check_order(N, k)
        self.weights, self.N, self.k = weights, N, k
        self._order = None
        self._lam = None

    def __call__(self, g: np.ndarray) -> np.ndarray:
        if self._order is not None:
            gs = np.take_along_axis(g, self._order, axis=-1)
            step = gs[..., 1:] - gs[..., :-1]
            if np.all(step >= 0) and np.array_equal(step == 0, self._ties):
                return self._lam
        self._lam = order_statistic_weights(g, self.weights, self.N, self.k)
        self._order = np.argsort(g, axis=-1, kind="stable")
        gs = np.take_along_axis(g, self._order, axis=-1)
        self._ties = gs[..., 1:] == gs[..., :-1]
        return self._lam


def kth_order_expectation_values(g: np.ndarray, w: np.ndarray, N: int, k: int) -> np.ndarray:
    """Vectorised ``E[k-th min of N draws]`` over the leading axes of ``g``."""
    lam = order_statistic_weights(g, w, N, k)
    return np.sum(lam * g, axis=-1)


@dataclass
class DiscreteIndicatorDistribution:
    """Law of the pessimism indicator ``g = tau @ v`` under an ensemble row.

    ``member_map[j]`` lists the members whose indicator equals ``support[j]``;
    ``member_weights`` holds the prior weight of every member.
    """

    support: np.ndarray
    probs: np.ndarray
    member_map: list
    member_weights: np.ndarray
    member_values: np.ndarray

    @property
    def num_members(self) -> int:
        return len(self.member_weights)

    def cdf(self) -> np.ndarray:
        F = np.cumsum(self.probs)
        F[-1] = 1.0
        return F

    def mean(self) -> float:
        return float(self.probs @ self.support)


def indicator_from_values(values: np.ndarray, weights: np.ndarray) -> DiscreteIndicatorDistribution:
    """Group members with exactly equal indicator values into atoms."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    live = weights > 0
    support = np.unique(values[live])
    member_map = [np.flatnonzero(live & (values == g)) for g in support]
    probs = np.array([weights[idx].sum() for idx in member_map])
    probs = probs / probs.sum()
    return DiscreteIndicatorDistribution(support, probs, member_map, weights, values)


def indicator_distribution(belief, s: int, a: int, q: np.ndarray, pi: np.ndarray,
                           values: np.ndarray | None = None) -> DiscreteIndicatorDistribution:
    """Distribution of ``E_{tau, pi}[Q(s', a')]`` over the members at ``(s, a)``.

    ``values`` overrides the continuation ``V(s') = sum_a' pi Q`` (used for the
    soft and KL-regularised variants).
    """
    if not isinstance(belief, EnsembleBelief):
        raise UnsupportedBeliefError(
            f"indicator_distribution needs finite support; a {type(belief).__name__} "
            "only supports sampling (use the frozen-sample-bank Monte-Carlo path)")
    _check_cell(belief, s, a)
    v = np.einsum("sa,sa->s", pi, q) if values is None else np.asarray(values, dtype=float)
    g = belief.members[s, a] @ v
    return indicator_from_values(g, belief.weights[s, a])


def kth_order_statistic_expectation(dist: DiscreteIndicatorDistribution, N: int, k: int) -> float:
    """Exact ``E[k-th smallest of N i.i.d. draws]`` from a discrete law."""
    _check_order(N, k)
    F = dist.cdf()
    F_prev = np.concatenate([[0.0], F[:-1]])
    mass = binomial_tail(F, N, k) - binomial_tail(F_prev, N, k)
    return float(mass @ dist.support)


def pmdb_weights(dist: DiscreteIndicatorDistribution, N: int, k: int) -> np.ndarray:
    """Reweighted member probabilities (the pessimism-modulated belief)."""
    _check_order(N, k)
    F = dist.cdf()
    F_prev = np.concatenate([[0.0], F[:-1]])
    mass = binomial_tail(F, N, k) - binomial_tail(F_prev, N, k)
    lam = np.zeros(dist.num_members)
    for j, idx in enumerate(dist.member_map):
        w = dist.member_weights[idx]
        lam[idx] = mass[j] * w / w.sum()
    return lam


def w_kernel(F, k: int, N: int):
    """Unnormalised reweighting factor ``F^(k-1) (1-F)^(N-k)``."""
    _check_order(N, k)
    F = np.asarray(F, dtype=float)
    if np.any((F < 0) | (F > 1)):
        raise ValueError("F must lie in [0, 1]")
    logw = np.zeros_like(F)
    with np.errstate(divide="ignore"):
        if k > 1:
            logw = logw + (k - 1) * np.log(F)
        if N > k:
            logw = logw + (N - k) * np.log1p(-F)
    out = np.exp(logw)
    return float(out) if out.ndim == 0 else out


def order_statistic_constant(N: int, k: int) -> float:
    """``N! / ((k-1)! (N-k)!)``."""
    _check_order(N, k)
    return float(np.exp(gammaln(N + 1) - gammaln(k) - gammaln(N - k + 1)))


def reweighted_estimate(samples: np.ndarray, N: int, k: int) -> tuple[float, float]:
    """Continuous-limit estimate of ``E[k-th min]`` from i.i.d. indicator samples.

    Uses ``C * mean(w(F_hat(g)) * g)`` with the mid-rank empirical CDF.
    Returns the estimate and its standard error.
    """
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    ranks = np.empty(n)
    ranks[np.argsort(samples, kind="stable")] = np.arange(1, n + 1)
    F_hat = (ranks - 0.5) / n
    terms = order_statistic_constant(N, k) * w_kernel(F_hat, k, N) * samples
    return float(terms.mean()), float(terms.std(ddof=1) / np.sqrt(n))


def sampled_kth_min_mean(belief, s: int, a: int, values: np.ndarray, N: int, k: int,
                         num_sets: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the k-th min over sampled N-sets."""
    _check_order(N, k)
    vecs, _ = belief.draw(np.full(num_sets, s), np.full(num_sets, a), N, rng)
    g = vecs @ values
    picks = np.partition(g, k - 1, axis=-1)[:, k - 1]
    return float(picks.mean()), float(picks.std(ddof=1) / np.sqrt(num_sets))


# --- construction from data ----------------------------------------------

def fit_dirichlet(dataset: Dataset, num_states: int, num_actions: int,
                  prior_pseudocount: float = 1.0, terminal_mask=None) -> DirichletBelief:
    """Dirichlet posterior: prior pseudo-count plus observed transition counts."""
    if prior_pseudocount <= 0:
        raise ValueError("prior_pseudocount must be positive")
    conc = prior_pseudocount + dataset.counts(num_states, num_actions)
    return DirichletBelief(conc, terminal_mask)


def bootstrap_ensemble(dataset: Dataset, num_states: int, num_actions: int, M: int,
                       smoothing: float, rng: np.random.Generator,
                       terminal_mask=None) -> EnsembleBelief:
    """``M`` smoothed maximum-likelihood models, each fit to a bootstrap resample."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    dataset.check_indices(num_states, num_actions)
    S, A = num_states, num_actions
    members = np.empty((S, A, M, S))
    n = len(dataset)
    flat = (dataset.s * A + dataset.a) * S + dataset.s_next
    for m in range(M):
        idx = rng.integers(0, n, size=n) if n else np.empty(0, dtype=np.int64)
        counts = np.bincount(flat[idx], minlength=S * A * S).reshape(S, A, S) + smoothing
        members[:, :, m, :] = counts / counts.sum(-1, keepdims=True)
    if terminal_mask is not None:
        for s in np.flatnonzero(terminal_mask):
            members[s] = 0.0
            members[s, :, :, s] = 1.0
    return EnsembleBelief(members)


def belief_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "ensemble":
        return EnsembleBelief(np.asarray(d["members"], dtype=float), np.asarray(d["weights"], dtype=float))
    if kind == "dirichlet":
        return DirichletBelief(np.asarray(d["concentration"], dtype=float),
                               np.asarray(d.get("absorbing"), dtype=bool) if d.get("absorbing") is not None else None)
    raise ValueError(f"unknown belief kind {kind!r}")


def save_belief(path: str | Path, belief):
    Path(path).write_text(json.dumps(belief.to_dict()))


def load_belief(path: str | Path):
    return belief_from_dict(json.loads(Path(path).read_text()))
