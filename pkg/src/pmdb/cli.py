"""Command-line entry point: ``pmdb <command> [options]``.

Every command takes ``--seed`` and ``--out``. The exit status is 0 only when
all invariant checks the command performs pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .amg_learner import LearnerConfig, init_learner, train
from .amg_sim import SecondaryPolicy, estimate_return
from .bench import (ExperimentSpec, StageError, behavior_policy, build_belief, collect_dataset,
                    gen_random_mdp, random_policy, run_experiment)
from .belief import EnsembleBelief, load_belief, save_belief
from .data import Dataset
from .mdp_core import check_policy, load_mdp, save_mdp, uniform_policy
from .pessimistic_eval import FrozenSampleBank, PessimismConfig, evaluate_policy_pessimistic, sweep_monotonicity
from .regularized_opt import RegularizationConfig, iterate_rpo, regularized_sweep

log = logging.getLogger("pmdb")


def _load_policy(spec: str, num_states: int, num_actions: int, seed: int) -> np.ndarray:
    if spec == "uniform":
        return uniform_policy(num_states, num_actions)
    if spec == "random":
        return random_policy(num_states, num_actions, seed)
    doc = json.loads(Path(spec).read_text())
    pi = np.asarray(doc["policy"] if isinstance(doc, dict) else doc, dtype=float)
    return check_policy(pi, num_states)


def _bank_for(belief, cfg: PessimismConfig, seed: int):
    if isinstance(belief, EnsembleBelief):
        return None
    return FrozenSampleBank.build(belief, cfg.N, cfg.mc_sets, seed)


def _pessimism(args) -> PessimismConfig:
    return PessimismConfig(args.N, args.k, args.mc_sets)


def cmd_gen_mdp(args) -> int:
    mdp, T = gen_random_mdp(args.states, args.actions, args.branching, args.seed, args.discount)
    save_mdp(args.out, mdp, T)
    print(f"wrote {args.out}")
    return 0


def cmd_collect(args) -> int:
    mdp, T = load_mdp(args.mdp)
    if T is None:
        raise SystemExit(f"{args.mdp} has no transition table to roll out")
    behavior = behavior_policy(args.behavior, mdp, T, args.epsilon, args.seed)
    ds = collect_dataset(mdp, T, behavior, args.episodes, args.horizon, args.seed)
    ds.to_csv(args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    return 0


def cmd_fit_belief(args) -> int:
    mdp, _ = load_mdp(args.mdp)
    ds = Dataset.from_csv(args.dataset)
    spec = {"kind": args.kind, "members": args.members, "smoothing": args.smoothing, "prior": args.prior}
    save_belief(args.out, build_belief(spec, ds, mdp, args.seed))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    mdp, T = load_mdp(args.mdp)
    belief = load_belief(args.belief)
    cfg = _pessimism(args)
    pi = _load_policy(args.policy, mdp.num_states, mdp.num_actions, args.seed)
    q, J = evaluate_policy_pessimistic(pi, belief, cfg, mdp, _bank_for(belief, cfg, args.seed))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["s", "a", "q"])
        for (s, a), v in np.ndenumerate(q):
            w.writerow([s, a, repr(v)])
    print(f"J = {J!r}")
    return 0


def cmd_optimize(args) -> int:
    mdp, _ = load_mdp(args.mdp)
    belief = load_belief(args.belief)
    cfg = _pessimism(args)
    reg = RegularizationConfig(args.alpha)
    trace = iterate_rpo(uniform_policy(mdp.num_states, mdp.num_actions), belief, cfg, reg, mdp,
                        args.iters, _bank_for(belief, cfg, args.seed))
    trace.to_json(args.out)
    for i, J in enumerate(trace.returns):
        print(f"iter {i:3d}  J = {J:.10f}")
    return 0 if trace.is_monotone() else 1


def cmd_learn(args) -> int:
    mdp, T = load_mdp(args.mdp)
    ds = Dataset.from_csv(args.dataset)
    belief = load_belief(args.belief)
    cfg = LearnerConfig(max_steps=args.max_steps, eval_every=args.eval_every, N=args.N, k=args.k,
                        alpha=args.alpha, epsilon=args.epsilon, omega1=args.omega1, omega2=args.omega2,
                        amg_loss_weight=args.amg_weight, mdp_loss_weight=args.mdp_weight,
                        secondary_uses_target=args.secondary_uses_target)
    rng = np.random.default_rng(args.seed)
    state = init_learner(mdp, ds, belief, cfg, rng)
    result = train(state, ds, belief, cfg, mdp, rng, true_transition=T)
    result.to_csv(args.out)
    print(f"final J_amg = {result.curve[-1]['J_amg']!r}")
    return 0 if np.all(result.policy_ref > 0) else 1


def cmd_simulate(args) -> int:
    mdp, _ = load_mdp(args.mdp)
    belief = load_belief(args.belief)
    cfg = _pessimism(args)
    pi = _load_policy(args.policy, mdp.num_states, mdp.num_actions, args.seed)
    bank = _bank_for(belief, cfg, args.seed)
    q, J = evaluate_policy_pessimistic(pi, belief, cfg, mdp, bank)
    secondary = SecondaryPolicy(q, pi) if args.epsilon == 0 else SecondaryPolicy.explore(q, pi, args.epsilon)
    est = estimate_return(mdp, belief, pi, secondary, cfg, args.horizon, args.episodes, args.seed)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epsilon", "mean", "stderr", "episodes", "fixed_point_J"])
        w.writerow([args.epsilon, repr(est.mean), repr(est.stderr), est.episodes, repr(J)])
    print(f"MC J = {est.mean:.6f} +- {est.stderr:.6f}  (fixed point {J:.6f})")
    if args.epsilon == 0:
        return 0 if abs(est.mean - J) <= 3 * est.stderr + est.truncation_bound else 1
    return 0


def cmd_sweep(args) -> int:
    mdp, _ = load_mdp(args.mdp)
    belief = load_belief(args.belief)
    pi = _load_policy(args.policy, mdp.num_states, mdp.num_actions, args.seed)
    kw = {"n_max": args.n_max, "k_fixed": args.k_fixed}
    if args.regularized:
        mu = uniform_policy(mdp.num_states, mdp.num_actions)
        result = regularized_sweep(pi, mu, belief, mdp, RegularizationConfig(args.alpha), **kw)
    else:
        result = sweep_monotonicity(pi, belief, mdp, **kw)
    result.to_csv(args.out)
    for name, ok in result.flags.items():
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    return 0 if result.passed else 1


def cmd_run(args) -> int:
    spec = ExperimentSpec.from_json(args.spec) if args.spec else ExperimentSpec()
    if args.seed is not None:
        spec.seed = args.seed
    try:
        manifest = run_experiment(spec, args.out)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    for name, ok in manifest["invariants"].items():
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    return 0 if manifest["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmdb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, seed_default=0):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", required=True)
        p.set_defaults(func=fn)
        return p

    def add_pessimism(p):
        p.add_argument("--N", type=int, default=10)
        p.add_argument("--k", type=int, default=2)
        p.add_argument("--mc-sets", type=int, default=1000, help="frozen sets per (s,a) for Dirichlet beliefs")

    p = add("gen-mdp", cmd_gen_mdp, "generate a random tabular MDP")
    p.add_argument("--states", type=int, default=10)
    p.add_argument("--actions", type=int, default=3)
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--discount", type=float, default=0.99)

    p = add("collect", cmd_collect, "roll out a behavior policy into a dataset CSV")
    p.add_argument("--mdp", required=True)
    p.add_argument("--behavior", choices=["uniform", "random", "epsilon_optimal"], default="uniform")
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--horizon", type=int, default=100)

    p = add("fit-belief", cmd_fit_belief, "fit an ensemble or Dirichlet belief")
    p.add_argument("--mdp", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=["ensemble", "dirichlet"], default="ensemble")
    p.add_argument("--members", type=int, default=8)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--prior", type=float, default=1.0)

    for name, fn, text in (("eval", cmd_eval, "pessimistic evaluation of a policy"),
                           ("simulate", cmd_simulate, "Monte-Carlo play of the game")):
        p = add(name, fn, text)
        p.add_argument("--mdp", required=True)
        p.add_argument("--belief", required=True)
        p.add_argument("--policy", default="uniform", help="uniform, random or a JSON file")
        add_pessimism(p)
    p.add_argument("--episodes", type=int, default=10_000)
    p.add_argument("--horizon", type=int, default=1000)
    p.add_argument("--epsilon", type=float, default=0.0)

    p = add("optimize", cmd_optimize, "iterated regularised policy optimisation")
    p.add_argument("--mdp", required=True)
    p.add_argument("--belief", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=20)
    add_pessimism(p)

    p = add("learn", cmd_learn, "train the tabular game learner")
    p.add_argument("--mdp", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--belief", required=True)
    p.add_argument("--N", type=int, default=10)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--omega1", type=float, default=1e-5)
    p.add_argument("--omega2", type=float, default=5e-3)
    p.add_argument("--amg-weight", type=float, default=1.0)
    p.add_argument("--mdp-weight", type=float, default=1.0)
    p.add_argument("--max-steps", type=int, default=100_000)
    p.add_argument("--eval-every", type=int, default=10_000)
    p.add_argument("--secondary-uses-target", action="store_true")

    p = add("sweep", cmd_sweep, "monotonicity lattice over (N, k)")
    p.add_argument("--mdp", required=True)
    p.add_argument("--belief", required=True)
    p.add_argument("--policy", default="random")
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--k-fixed", type=int, default=2)
    p.add_argument("--regularized", action="store_true")
    p.add_argument("--alpha", type=float, default=0.1)

    p = add("run", cmd_run, "full experiment from a JSON spec", seed_default=None)
    p.add_argument("--spec", help="ExperimentSpec JSON (defaults when omitted)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
