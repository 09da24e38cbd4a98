import csv
import json

import numpy as np
import pytest

from instances import random_ensemble, random_mdp, random_policy
from pmdb.belief import EnsembleBelief, load_belief
from pmdb.bench import (ExperimentSpec, StageError, behavior_policy, collect_dataset, gen_random_mdp,
                        ordering_chain, robust_value_iteration, run_experiment)
from pmdb.cli import main
from pmdb.data import Dataset
from pmdb.mdp_core import evaluate_policy_exact, load_mdp, policy_transition, save_mdp, uniform_policy, value_iteration
from pmdb.pessimistic_eval import PessimismConfig, evaluate_policy_pessimistic, sweep_monotonicity


def small_spec(**kw):
    base = dict(
        seed=3,
        mdp={"states": 5, "actions": 2, "branching": 3, "discount": 0.9},
        dataset={"episodes": 10, "horizon": 30},
        belief={"kind": "ensemble", "members": 4, "smoothing": 0.1},
        pessimism={"N": 4, "k": 2, "n_max": 4, "k_fixed": 2},
        rpo_iters=5,
        learner={"max_steps": 300, "eval_every": 100, "parallel_games": 8, "batch_size_mdp": 16},
        simulate={"episodes": 2000, "horizon": 200},
    )
    base.update(kw)
    return ExperimentSpec(**base)


class TestGenerator:
    def test_support_size(self):
        _, T = gen_random_mdp(6, 2, 3, seed=5)
        assert np.all((T > 0).sum(-1) == 3)
        np.testing.assert_allclose(T.sum(-1), 1.0, atol=1e-14)

    def test_branching_one_is_deterministic(self):
        _, T = gen_random_mdp(5, 2, 1, seed=0)
        assert np.all(T.max(-1) == 1.0)

    def test_same_seed_same_instance(self):
        (m1, T1), (m2, T2) = gen_random_mdp(4, 3, 2, seed=9), gen_random_mdp(4, 3, 2, seed=9)
        np.testing.assert_array_equal(T1, T2)
        np.testing.assert_array_equal(m1.reward, m2.reward)
        assert m1.discount == 0.99
        assert m1.reward.min() >= 0 and m1.reward.max() <= 1

    @pytest.mark.parametrize("args", [(0, 2, 1), (3, 0, 1), (3, 2, 0), (3, 2, 4)])
    def test_invalid_sizes(self, args):
        with pytest.raises(ValueError):
            gen_random_mdp(*args, seed=0)

    def test_behavior_kinds(self):
        mdp, T = gen_random_mdp(4, 3, 2, seed=1)
        greedy = np.argmax(value_iteration(mdp, T), axis=1)
        pi = behavior_policy("epsilon_optimal", mdp, T, 0.3)
        np.testing.assert_allclose(pi[np.arange(4), greedy], 0.7 + 0.1)
        np.testing.assert_allclose(behavior_policy("uniform", mdp, T), 1 / 3)
        with pytest.raises(ValueError):
            behavior_policy("expert", mdp, T)


class TestCollect:
    def test_zero_episodes(self):
        mdp, T = gen_random_mdp(3, 2, 2, seed=0)
        assert len(collect_dataset(mdp, T, uniform_policy(3, 2), 0, 10, seed=0)) == 0

    def test_reproducible_and_reward_consistent(self):
        mdp, T = gen_random_mdp(4, 2, 2, seed=1)
        a = collect_dataset(mdp, T, uniform_policy(4, 2), 5, 20, seed=2)
        b = collect_dataset(mdp, T, uniform_policy(4, 2), 5, 20, seed=2)
        np.testing.assert_array_equal(a.s_next, b.s_next)
        np.testing.assert_array_equal(a.r, mdp.reward[a.s, a.a])
        assert len(a) == 100

    def test_long_run_matches_stationary_occupancy(self):
        mdp, T = gen_random_mdp(4, 2, 4, seed=3)
        pi = uniform_policy(4, 2)
        ds = collect_dataset(mdp, T, pi, 1, 40_000, seed=3)
        P = policy_transition(T, pi)  # (S*A, S*A) over state-action pairs
        occ = np.full(8, 1 / 8)
        for _ in range(2000):
            occ = occ @ P
        cells = ds.s * 2 + ds.a
        # batch means absorb the chain's autocorrelation
        batches = np.array([np.bincount(b, minlength=8) / len(b) for b in np.array_split(cells, 40)])
        stderr = batches.std(axis=0, ddof=1) / np.sqrt(len(batches))
        assert np.all(np.abs(batches.mean(axis=0) - occ) <= 3 * stderr)


class TestRobust:
    def test_single_member_is_standard(self):
        mdp = random_mdp(4, 2, seed=0)
        belief = random_ensemble(4, 2, 1, seed=0)
        pi = random_policy(4, 2, seed=0)
        q, _ = robust_value_iteration(belief, mdp, "evaluate", pi)
        np.testing.assert_allclose(q, evaluate_policy_exact(mdp, belief.members[:, :, 0], pi)[0], atol=1e-10)
        q_opt, _ = robust_value_iteration(belief, mdp, "optimize")
        np.testing.assert_allclose(q_opt, value_iteration(mdp, belief.members[:, :, 0]), atol=1e-10)

    @pytest.mark.parametrize("N", [1, 3, 8])
    def test_robust_below_pessimistic_k1(self, N):
        mdp = random_mdp(5, 2, seed=N)
        belief = random_ensemble(5, 2, 4, seed=N, random_weights=True)
        pi = random_policy(5, 2, seed=N)
        q_rob, _ = robust_value_iteration(belief, mdp, "evaluate", pi)
        q_pess, _ = evaluate_policy_pessimistic(pi, belief, PessimismConfig(N, 1), mdp)
        assert np.all(q_rob <= q_pess + 1e-9)

    def test_dominated_member_lowers_robust_q(self):
        mdp = random_mdp(4, 2, seed=4)
        belief = random_ensemble(4, 2, 3, seed=4)
        pi = random_policy(4, 2, seed=4)
        q_rob, _ = robust_value_iteration(belief, mdp, "evaluate", pi)
        worst_state = np.argmin((q_rob * pi).sum(1))
        extra = np.zeros((4, 2, 1, 4))
        extra[..., worst_state] = 1.0  # always jump to the lowest-value state
        augmented = EnsembleBelief(np.concatenate([belief.members, extra], axis=2))
        q_aug, _ = robust_value_iteration(augmented, mdp, "evaluate", pi)
        assert np.all(q_aug <= q_rob + 1e-12)

    def test_bad_mode(self):
        mdp = random_mdp(2, 1, seed=0)
        with pytest.raises(ValueError):
            robust_value_iteration(random_ensemble(2, 1, 1, seed=0), mdp, "evaluate")
        with pytest.raises(ValueError):
            robust_value_iteration(random_ensemble(2, 1, 1, seed=0), mdp, "solve")

    @pytest.mark.parametrize("seed", range(3))
    def test_ordering_chain(self, seed, tmp_path):
        mdp, _ = gen_random_mdp(6, 2, 3, seed=seed)
        belief = random_ensemble(6, 2, 5, seed=seed, random_weights=True)
        chain = ordering_chain(random_policy(6, 2, seed=seed), belief, mdp, N=6, k=2)
        assert chain.passed and chain.sandwich
        chain.to_csv(tmp_path / "chain.csv")
        assert (tmp_path / "chain.csv").read_text().splitlines()[0] == "label,N,k,J"


class TestRunExperiment:
    def test_default_invariants_and_determinism(self, tmp_path):
        spec = small_spec()
        m1 = run_experiment(spec, tmp_path / "a")
        m2 = run_experiment(spec, tmp_path / "b")
        assert m1["passed"], m1["invariants"]
        assert m1["content_hash"] == m2["content_hash"]
        for name in m1["files"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert {"mdp.json", "dataset.csv", "belief.json", "eval.csv", "chain.csv", "sweep.csv",
                "regularized_sweep.csv", "rpo.csv", "learner.csv", "simulate.csv"} <= set(m1["files"])

    def test_gen_and_collect_only(self, tmp_path):
        manifest = run_experiment(small_spec(solvers=[]), tmp_path)
        assert set(manifest["files"]) == {"mdp.json", "dataset.csv"}
        assert not (tmp_path / "belief.json").exists()

    def test_sweep_csv_is_delegated(self, tmp_path):
        spec = small_spec(solvers=["sweep"])
        run_experiment(spec, tmp_path)
        mdp, _ = load_mdp(tmp_path / "mdp.json")
        belief = load_belief(tmp_path / "belief.json")
        from pmdb.bench import random_policy as bench_policy
        pi = bench_policy(mdp.num_states, mdp.num_actions, spec.stage_seed("policy"))
        sweep_monotonicity(pi, belief, mdp, n_max=4, k_fixed=2).to_csv(tmp_path / "direct.csv")
        assert (tmp_path / "direct.csv").read_text() == (tmp_path / "sweep.csv").read_text()

    def test_stage_failure_names_stage_and_seed(self, tmp_path):
        mdp, _ = gen_random_mdp(3, 2, 2, seed=0)
        save_mdp(tmp_path / "no_T.json", mdp)
        spec = small_spec(mdp={"file": str(tmp_path / "no_T.json")})
        with pytest.raises(StageError) as err:
            run_experiment(spec, tmp_path / "out")
        assert err.value.stage == "generate_mdp" and err.value.seed == spec.stage_seed("mdp")

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ExperimentSpec(solvers=["magic"])
        with pytest.raises(ValueError):
            ExperimentSpec(seeds={"nope": 1})
        assert ExperimentSpec(seed=2, seeds={"dataset": 7}).stage_seed("dataset") == 7
        assert ExperimentSpec(seed=2).stage_seed("belief") == 2003

    def test_dirichlet_spec(self, tmp_path):
        spec = small_spec(belief={"kind": "dirichlet", "prior": 1.0}, solvers=["eval", "rpo"],
                          pessimism={"N": 3, "k": 2, "mc_sets": 20}, rpo_iters=3)
        manifest = run_experiment(spec, tmp_path)
        assert manifest["passed"] and "J_rpo" in manifest["metrics"]


class TestCli:
    def test_pipeline(self, tmp_path, capsys):
        p = lambda name: str(tmp_path / name)
        assert main(["gen-mdp", "--states", "4", "--actions", "2", "--discount", "0.9", "--seed", "1",
                     "--out", p("mdp.json")]) == 0
        assert main(["collect", "--mdp", p("mdp.json"), "--episodes", "10", "--horizon", "20",
                     "--seed", "2", "--out", p("data.csv")]) == 0
        assert len(Dataset.from_csv(p("data.csv"))) == 200
        assert main(["fit-belief", "--mdp", p("mdp.json"), "--dataset", p("data.csv"), "--members", "4",
                     "--seed", "3", "--out", p("belief.json")]) == 0
        common = ["--mdp", p("mdp.json"), "--belief", p("belief.json"), "--N", "4", "--k", "2"]
        assert main(["eval", *common, "--out", p("q.csv")]) == 0
        assert "J = " in capsys.readouterr().out
        assert main(["optimize", *common, "--iters", "3", "--out", p("rpo.json")]) == 0
        assert main(["simulate", *common, "--episodes", "2000", "--horizon", "200", "--out", p("sim.csv")]) == 0
        assert main(["sweep", "--mdp", p("mdp.json"), "--belief", p("belief.json"), "--n-max", "4",
                     "--out", p("sweep.csv")]) == 0
        assert main(["sweep", "--mdp", p("mdp.json"), "--belief", p("belief.json"), "--n-max", "4",
                     "--regularized", "--out", p("rsweep.csv")]) == 0
        assert main(["learn", "--mdp", p("mdp.json"), "--dataset", p("data.csv"), "--belief", p("belief.json"),
                     "--N", "4", "--max-steps", "200", "--eval-every", "100", "--out", p("curve.csv")]) == 0
        rows = list(csv.DictReader(open(p("curve.csv"))))
        assert [r["step"] for r in rows] == ["100", "200"]

    def test_run_with_spec_file(self, tmp_path):
        spec = small_spec(solvers=["eval", "chain"]).to_dict()
        (tmp_path / "spec.json").write_text(json.dumps(spec))
        assert main(["run", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "out")]) == 0
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["invariants"] == {"ordering_chain": True, "robust_sandwich": True}

    def test_run_stage_failure_exit_code(self, tmp_path, capsys):
        mdp, _ = gen_random_mdp(3, 2, 2, seed=0)
        save_mdp(tmp_path / "no_T.json", mdp)
        spec = small_spec(mdp={"file": str(tmp_path / "no_T.json")}).to_dict()
        (tmp_path / "spec.json").write_text(json.dumps(spec))
        assert main(["run", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "out")]) == 2
        assert "generate_mdp" in capsys.readouterr().err

    def test_policy_file(self, tmp_path):
        main(["gen-mdp", "--states", "3", "--actions", "2", "--discount", "0.9", "--out", str(tmp_path / "m.json")])
        main(["collect", "--mdp", str(tmp_path / "m.json"), "--episodes", "5", "--horizon", "10",
              "--out", str(tmp_path / "d.csv")])
        main(["fit-belief", "--mdp", str(tmp_path / "m.json"), "--dataset", str(tmp_path / "d.csv"),
              "--members", "2", "--out", str(tmp_path / "b.json")])
        (tmp_path / "pi.json").write_text(json.dumps({"policy": [[0.5, 0.5], [0.9, 0.1], [0.2, 0.8]]}))
        assert main(["eval", "--mdp", str(tmp_path / "m.json"), "--belief", str(tmp_path / "b.json"),
                     "--policy", str(tmp_path / "pi.json"), "--N", "2", "--k", "1",
                     "--out", str(tmp_path / "q.csv")]) == 0
