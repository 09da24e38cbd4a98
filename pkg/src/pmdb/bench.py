"""Instance generators, offline data collection, robust baselines and experiment runs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .amg_learner import LearnerConfig, init_learner, train
from .amg_sim import SecondaryPolicy, estimate_return
from .belief import EnsembleBelief, UnsupportedBeliefError, bootstrap_ensemble, fit_dirichlet, save_belief
from .data import Dataset
from .mdp_core import (FIXED_POINT_TOL, MAX_SWEEPS, TabularMDP, check_policy, check_transition,
                       evaluate_policy_exact, expected_start_value, greedy_policy,
                       iterate_to_fixed_point, load_mdp, save_mdp, state_values, uniform_policy,
                       value_iteration)
from .pessimistic_eval import (FrozenSampleBank, PessimismConfig, evaluate_policy_pessimistic,
                               sweep_monotonicity)
from .regularized_opt import RegularizationConfig, iterate_rpo, regularized_sweep

log = logging.getLogger(__name__)

CHAIN_SLACK = 1e-9
CHAIN_LARGE_N = 32


# --- instances and data ----------------------------------------------------

def gen_random_mdp(num_states: int, num_actions: int, branching: int, seed: int,
                   discount: float = 0.99) -> tuple[TabularMDP, np.ndarray]:
    """Random MDP with U[0,1] rewards and Dirichlet(1) rows on ``branching`` states."""
    if num_states < 1 or num_actions < 1:
        raise ValueError("need at least one state and one action")
    if not 1 <= branching <= num_states:
        raise ValueError(f"branching must lie in [1, {num_states}], got {branching}")
    rng = np.random.default_rng(seed)
    S, A = num_states, num_actions
    reward = rng.random((S, A))
    T = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            support = rng.choice(S, size=branching, replace=False)
            T[s, a, support] = rng.dirichlet(np.ones(branching))
    mdp = TabularMDP(reward, discount, np.full(S, 1.0 / S))
    return mdp, T


def random_policy(num_states: int, num_actions: int, seed: int) -> np.ndarray:
    """Dirichlet(1) rows; strictly positive almost surely."""
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(num_actions), size=num_states)
    return np.maximum(pi, 1e-12) / np.maximum(pi, 1e-12).sum(-1, keepdims=True)


def behavior_policy(kind: str, mdp: TabularMDP, T: np.ndarray, epsilon: float = 0.3,
                    seed: int = 0) -> np.ndarray:
    """``uniform``, ``random`` (Dirichlet rows) or ``epsilon_optimal`` (mix with the true optimum)."""
    S, A = mdp.num_states, mdp.num_actions
    if kind == "uniform":
        return uniform_policy(S, A)
    if kind == "random":
        return random_policy(S, A, seed)
    if kind == "epsilon_optimal":
        greedy = greedy_policy(value_iteration(mdp, T))
        return (1.0 - epsilon) * greedy + epsilon * uniform_policy(S, A)
    raise ValueError(f"unknown behavior policy {kind!r}")


def collect_dataset(mdp: TabularMDP, T: np.ndarray, behavior: np.ndarray, episodes: int,
                    horizon: int, seed: int) -> Dataset:
    """Roll out ``behavior`` in the true model; records are kept in visit order."""
    T = check_transition(T, mdp)
    behavior = check_policy(behavior, mdp.num_states)
    if episodes < 0 or horizon < 1:
        raise ValueError("episodes must be >= 0 and horizon >= 1")
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    rows = []
    for _ in range(episodes):
        s = rng.choice(S, p=mdp.initial_dist)
        for _ in range(horizon):
            a = rng.choice(A, p=behavior[s])
            s_next = rng.choice(S, p=T[s, a])
            done = bool(mdp.terminal_mask[s_next])
            rows.append((s, a, mdp.reward[s, a], s_next, done))
            if done:
                break
            s = s_next
    return Dataset.from_records(rows)


# --- robust and optimistic baselines ----------------------------------------

def _member_extreme(belief, v: np.ndarray, worst: bool) -> np.ndarray:
    if not isinstance(belief, EnsembleBelief):
        raise UnsupportedBeliefError("robust baselines need an EnsembleBelief")
    g = belief.members @ v
    return g.min(axis=-1) if worst else g.max(axis=-1)


def robust_value_iteration(belief, mdp: TabularMDP, mode: str = "evaluate", pi: np.ndarray | None = None,
                           worst: bool = True, tol: float = FIXED_POINT_TOL,
                           max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """(s, a)-rectangular robust Q over all ensemble members, weights ignored.

    ``mode="evaluate"`` needs ``pi``; ``mode="optimize"`` maximises over actions
    and returns the greedy policy. ``worst=False`` gives the optimistic
    (best-member) counterpart. Returns ``(q, policy)``.
    """
    if mode == "evaluate":
        if pi is None:
            raise ValueError("evaluate mode needs a policy")
        pi = check_policy(pi, mdp.num_states)
        inner = lambda q: state_values(q, pi)
    elif mode == "optimize":
        inner = lambda q: q.max(axis=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    op = lambda q: mdp.reward + mdp.discount * _member_extreme(belief, inner(q), worst)
    q, _, _ = iterate_to_fixed_point(op, np.zeros_like(mdp.reward), tol, max_sweeps)
    return q, (pi if mode == "evaluate" else greedy_policy(q))


@dataclass
class ChainResult:
    labels: list
    returns: list
    configs: list
    passed: bool
    robust_q: np.ndarray
    pessimistic_q: np.ndarray
    sandwich: bool

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label", "N", "k", "J"])
            for label, cfg, J in zip(self.labels, self.configs, self.returns):
                w.writerow([label, "" if cfg is None else cfg[0], "" if cfg is None else cfg[1], repr(J)])


def ordering_chain(pi: np.ndarray, belief, mdp: TabularMDP, N: int = 10, k: int = 2,
                   large_N: int = CHAIN_LARGE_N, slack: float = CHAIN_SLACK) -> ChainResult:
    """``robust <= (large N, 1) <= (N, k) <= (N, N) <= optimistic`` for a fixed policy.

    Also checks the robust sandwich ``Q_robust <= Q_{large N, 1}`` element-wise.
    """
    q_rob, _ = robust_value_iteration(belief, mdp, "evaluate", pi)
    q_opt, _ = robust_value_iteration(belief, mdp, "evaluate", pi, worst=False)
    configs = [None, (large_N, 1), (N, k), (N, N), None]
    labels = ["robust", f"pmdb_N{large_N}_k1", f"pmdb_N{N}_k{k}", f"pmdb_N{N}_k{N}", "optimistic"]
    qs = {}
    returns = [expected_start_value(q_rob, pi, mdp.initial_dist)]
    for cfg in configs[1:-1]:
        qs[cfg], J = evaluate_policy_pessimistic(pi, belief, PessimismConfig(*cfg), mdp)
        returns.append(J)
    returns.append(expected_start_value(q_opt, pi, mdp.initial_dist))
    passed = all(b >= a - slack for a, b in zip(returns, returns[1:]))
    q_pess = qs[(large_N, 1)]
    sandwich = bool(np.all(q_rob <= q_pess + slack))
    return ChainResult(labels, returns, configs, passed, q_rob, q_pess, sandwich)


# --- experiment orchestration -----------------------------------------------

STAGE_OFFSETS = {"mdp": 0, "policy": 1, "dataset": 2, "belief": 3, "bank": 4, "learner": 5, "simulate": 6}
ALL_SOLVERS = ("eval", "chain", "sweep", "rpo", "learner", "simulate")


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int, cause: Exception):
        super().__init__(f"stage {stage!r} (seed {seed}) failed: {cause}")
        self.stage, self.seed, self.cause = stage, seed, cause


@dataclass
class ExperimentSpec:
    """Everything one run needs; unspecified stage seeds derive from ``seed``."""

    seed: int = 0
    mdp: dict = field(default_factory=lambda: {"states": 10, "actions": 3, "branching": 3, "discount": 0.99})
    behavior: dict = field(default_factory=lambda: {"kind": "uniform"})
    dataset: dict = field(default_factory=lambda: {"episodes": 50, "horizon": 100})
    belief: dict = field(default_factory=lambda: {"kind": "ensemble", "members": 8, "smoothing": 0.1})
    pessimism: dict = field(default_factory=lambda: {"N": 10, "k": 2, "n_max": 8, "k_fixed": 2, "mc_sets": 200})
    regularization: dict = field(default_factory=lambda: {"alpha": 0.1})
    rpo_iters: int = 20
    learner: dict = field(default_factory=lambda: {"max_steps": 20_000, "eval_every": 5_000})
    simulate: dict = field(default_factory=lambda: {"episodes": 10_000, "horizon": 1000})
    solvers: list = field(default_factory=lambda: list(ALL_SOLVERS))
    seeds: dict = field(default_factory=dict)
    output_dir: str = "results"

    def __post_init__(self):
        unknown = set(self.solvers) - set(ALL_SOLVERS)
        if unknown:
            raise ValueError(f"unknown solvers {sorted(unknown)}; choose from {ALL_SOLVERS}")
        bad = set(self.seeds) - set(STAGE_OFFSETS)
        if bad:
            raise ValueError(f"unknown seed stages {sorted(bad)}")

    def stage_seed(self, stage: str) -> int:
        return int(self.seeds.get(stage, self.seed * 1000 + STAGE_OFFSETS[stage]))

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def _stage(name: str, spec: ExperimentSpec, stage_seed_name: str | None = None):
    """Runner that tags any failure of ``fn`` with the stage name and its seed."""
    seed = spec.stage_seed(stage_seed_name or "mdp")

    def run(fn, *args, **kwargs):
        log.info("stage %s", name)
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, seed, exc) from exc
    return run


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def build_belief(spec_belief: dict, dataset: Dataset, mdp: TabularMDP, seed: int):
    kind = spec_belief.get("kind", "ensemble")
    S, A = mdp.num_states, mdp.num_actions
    if kind == "ensemble":
        return bootstrap_ensemble(dataset, S, A, int(spec_belief.get("members", 8)),
                                  float(spec_belief.get("smoothing", 0.1)),
                                  np.random.default_rng(seed), mdp.terminal_mask)
    if kind == "dirichlet":
        return fit_dirichlet(dataset, S, A, float(spec_belief.get("prior", 1.0)), mdp.terminal_mask)
    raise ValueError(f"unknown belief kind {kind!r}")


def load_or_generate_mdp(spec_mdp: dict, seed: int) -> tuple[TabularMDP, np.ndarray]:
    if "file" in spec_mdp:
        mdp, T = load_mdp(spec_mdp["file"])
        if T is None:
            raise ValueError(f"{spec_mdp['file']} has no transition table")
        return mdp, T
    return gen_random_mdp(int(spec_mdp.get("states", 10)), int(spec_mdp.get("actions", 3)),
                          int(spec_mdp.get("branching", 3)), seed,
                          float(spec_mdp.get("discount", 0.99)))


def run_experiment(spec: ExperimentSpec, output_dir: str | Path | None = None) -> dict:
    """Generate, collect, fit, solve and report; returns the manifest dict.

    Every CSV is written deterministically from the spec, so identical specs
    give byte-identical reports. ``manifest.json`` lists each file with its
    SHA-256, a combined content hash and the invariant summary.
    """
    out = Path(output_dir or spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    invariants = {}
    metrics = {}

    mdp, T = _stage("generate_mdp", spec, "mdp")(load_or_generate_mdp, spec.mdp, spec.stage_seed("mdp"))
    save_mdp(out / "mdp.json", mdp, T)
    files.append("mdp.json")

    beh = spec.behavior
    behavior = _stage("behavior", spec, "policy")(
        behavior_policy, beh.get("kind", "uniform"), mdp, T, float(beh.get("epsilon", 0.3)),
        spec.stage_seed("policy"))
    dataset = _stage("collect", spec, "dataset")(
        collect_dataset, mdp, T, behavior, int(spec.dataset.get("episodes", 50)),
        int(spec.dataset.get("horizon", 100)), spec.stage_seed("dataset"))
    dataset.to_csv(out / "dataset.csv")
    files.append("dataset.csv")

    if spec.solvers:
        belief = _stage("fit_belief", spec, "belief")(
            build_belief, spec.belief, dataset, mdp, spec.stage_seed("belief"))
        save_belief(out / "belief.json", belief)
        files.append("belief.json")

        p = spec.pessimism
        cfg = PessimismConfig(int(p.get("N", 10)), int(p.get("k", 2)), int(p.get("mc_sets", 200)))
        reg = RegularizationConfig(**spec.regularization)
        bank = None
        if not isinstance(belief, EnsembleBelief):
            bank = _stage("sample_bank", spec, "bank")(
                FrozenSampleBank.build, belief, cfg.N, cfg.mc_sets, spec.stage_seed("bank"))
        pi_eval = random_policy(mdp.num_states, mdp.num_actions, spec.stage_seed("policy"))

        if "eval" in spec.solvers:
            q, J = _stage("eval", spec)(evaluate_policy_pessimistic, pi_eval, belief, cfg, mdp, bank)
            _, J_true = evaluate_policy_exact(mdp, T, pi_eval)
            _write_rows(out / "eval.csv", ["N", "k", "J_pmdb", "J_true"], [[cfg.N, cfg.k, repr(J), repr(J_true)]])
            files.append("eval.csv")
            metrics["J_eval"] = J

        if "chain" in spec.solvers and isinstance(belief, EnsembleBelief):
            chain = _stage("chain", spec)(ordering_chain, pi_eval, belief, mdp, cfg.N, cfg.k)
            chain.to_csv(out / "chain.csv")
            files.append("chain.csv")
            invariants["ordering_chain"] = chain.passed
            invariants["robust_sandwich"] = chain.sandwich

        if "sweep" in spec.solvers and isinstance(belief, EnsembleBelief):
            kw = {"n_max": int(p.get("n_max", 8)), "k_fixed": int(p.get("k_fixed", 2))}
            sweep = _stage("sweep", spec)(sweep_monotonicity, pi_eval, belief, mdp, **kw)
            sweep.to_csv(out / "sweep.csv")
            rsweep = _stage("regularized_sweep", spec)(regularized_sweep, pi_eval, uniform_policy(
                mdp.num_states, mdp.num_actions), belief, mdp, reg, **kw)
            rsweep.to_csv(out / "regularized_sweep.csv")
            files += ["sweep.csv", "regularized_sweep.csv"]
            invariants["monotonicity"] = sweep.passed
            invariants["regularized_monotonicity"] = rsweep.passed

        rpo = None
        if "rpo" in spec.solvers:
            rpo = _stage("rpo", spec)(iterate_rpo, uniform_policy(mdp.num_states, mdp.num_actions),
                                      belief, cfg, reg, mdp, spec.rpo_iters, bank)
            _write_rows(out / "rpo.csv", ["iter", "J", "residual"],
                        [[i, repr(J), repr(r)] for i, (J, r) in enumerate(zip(rpo.returns, rpo.residuals))])
            files.append("rpo.csv")
            invariants["rpo_monotone"] = rpo.is_monotone()
            metrics["J_rpo"] = rpo.final_return
            if isinstance(belief, EnsembleBelief):
                q_rob, pi_rob = robust_value_iteration(belief, mdp, "optimize")
                metrics["J_robust_opt"] = expected_start_value(q_rob, pi_rob, mdp.initial_dist)
                metrics["J_true_rpo"] = evaluate_policy_exact(mdp, T, rpo.final_policy)[1]
                metrics["J_true_robust"] = evaluate_policy_exact(mdp, T, pi_rob)[1]

        if "learner" in spec.solvers:
            lcfg = LearnerConfig(**{"N": cfg.N, "k": cfg.k, "alpha": reg.alpha, **spec.learner})
            rng = np.random.default_rng(spec.stage_seed("learner"))

            def learn():
                state = init_learner(mdp, dataset, belief, lcfg, rng)
                return train(state, dataset, belief, lcfg, mdp, rng, true_transition=T)
            if bank is not None:
                raise StageError("learner", spec.stage_seed("learner"),
                                 UnsupportedBeliefError("learner curves need an ensemble belief"))
            result = _stage("learner", spec, "learner")(learn)
            result.to_csv(out / "learner.csv")
            files.append("learner.csv")
            curve = result.curve
            invariants["learner_policy_positive"] = bool(np.all(result.policy_ref > 0))
            invariants["learner_curve_finite"] = all(np.isfinite(r["J_amg"]) for r in curve)
            metrics["J_learner"] = curve[-1]["J_amg"]

        if "simulate" in spec.solvers and rpo is not None:
            episodes = int(spec.simulate.get("episodes", 10_000))
            horizon = int(spec.simulate.get("horizon", 1000))
            seed = spec.stage_seed("simulate")
            pi = rpo.final_policy
            q_pi, J_pi = evaluate_policy_pessimistic(pi, belief, cfg, mdp, bank)
            sim = _stage("simulate", spec, "simulate")
            exact = sim(estimate_return, mdp, belief, pi, SecondaryPolicy(q_pi, pi), cfg, horizon, episodes, seed)
            mean_T = belief.mean_transition()
            _, J_mean = evaluate_policy_exact(mdp, mean_T, pi)
            explore = sim(estimate_return, mdp, belief, pi, SecondaryPolicy.explore(q_pi, pi, 1.0),
                          cfg, horizon, episodes, seed + 1)
            rows = []
            for mode, est, target in (("exact", exact, J_pi), ("epsilon_1", explore, J_mean)):
                z = abs(est.mean - target) / max(est.stderr, 1e-300)
                rows.append([mode, repr(est.mean), repr(est.stderr), repr(target), repr(z)])
                bias = est.truncation_bound
                invariants[f"simulator_{mode}"] = abs(est.mean - target) <= 3 * est.stderr + bias
            _write_rows(out / "simulate.csv", ["mode", "mean", "stderr", "target_J", "z"], rows)
            files.append("simulate.csv")

    hashes = {name: _sha256(out / name) for name in files}
    combined = hashlib.sha256("".join(f"{n}:{h}\n" for n, h in sorted(hashes.items())).encode()).hexdigest()
    manifest = {
        "spec": spec.to_dict(),
        "files": hashes,
        "content_hash": combined,
        "metrics": metrics,
        "invariants": invariants,
        "passed": all(invariants.values()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
