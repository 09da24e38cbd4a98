import json

import numpy as np
import pytest

from instances import random_mdp, random_policy, random_transition
from pmdb.mdp_core import (ConvergenceError, TabularMDP, bellman_backup, check_policy, check_transition,
                           evaluate_policy_exact, floor_policy, greedy_policy, iterate_to_fixed_point,
                           load_mdp, save_mdp, uniform_policy, value_iteration)


class TestTabularMDP:
    def test_rejects_discount_one(self):
        with pytest.raises(ValueError):
            TabularMDP(np.zeros((2, 1)), 1.0, np.array([0.5, 0.5]))

    def test_rejects_bad_initial_distribution(self):
        with pytest.raises(ValueError):
            TabularMDP(np.zeros((2, 1)), 0.9, np.array([0.6, 0.6]))

    def test_terminal_reward_must_vanish(self):
        with pytest.raises(ValueError):
            TabularMDP(np.ones((2, 1)), 0.9, np.array([1.0, 0.0]), terminal_mask=np.array([False, True]))

    def test_dict_round_trip(self):
        mdp = random_mdp(3, 2, seed=0)
        back = TabularMDP.from_dict(json.loads(json.dumps(mdp.to_dict())))
        np.testing.assert_array_equal(back.reward, mdp.reward)
        assert back.discount == mdp.discount

    def test_save_and_load_with_transition(self, tmp_path):
        mdp, T = random_mdp(3, 2, seed=1), random_transition(3, 2, seed=1)
        save_mdp(tmp_path / "m.json", mdp, T)
        mdp2, T2 = load_mdp(tmp_path / "m.json")
        np.testing.assert_array_equal(T2, T)
        np.testing.assert_array_equal(mdp2.initial_dist, mdp.initial_dist)


class TestValidation:
    def test_transition_row_names_offending_pair(self):
        T = random_transition(3, 2, seed=0)
        T[1, 0, 0] += 0.1
        with pytest.raises(ValueError, match=r"\(s=1, a=0\)"):
            check_transition(T)

    def test_terminal_must_be_absorbing(self):
        mdp = TabularMDP(np.array([[1.0], [0.0]]), 0.9, np.array([1.0, 0.0]),
                         terminal_mask=np.array([False, True]))
        T = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
        with pytest.raises(ValueError):
            check_transition(T, mdp)

    def test_policy_strict_positivity(self):
        pi = np.array([[1.0, 0.0]])
        check_policy(pi)
        with pytest.raises(ValueError):
            check_policy(pi, strictly_positive=True)

    def test_floor_policy_is_positive_and_normalised(self):
        pi = floor_policy(np.array([[1.0, 0.0, 0.0]]), 1e-12)
        assert pi.min() >= 1e-12
        np.testing.assert_allclose(pi.sum(-1), 1.0, atol=1e-15)


class TestEvaluatePolicyExact:
    def test_zero_reward(self):
        mdp = TabularMDP(np.zeros((3, 2)), 0.9, np.full(3, 1 / 3))
        q, J = evaluate_policy_exact(mdp, random_transition(3, 2, 0), uniform_policy(3, 2))
        assert J == 0.0 and np.all(q == 0.0)

    def test_single_state_geometric_series(self):
        mdp = TabularMDP(np.ones((1, 1)), 0.99, np.ones(1))
        q, J = evaluate_policy_exact(mdp, np.ones((1, 1, 1)), np.ones((1, 1)))
        assert q[0, 0] == pytest.approx(100.0, abs=1e-10)
        assert J == pytest.approx(100.0, abs=1e-10)

    def test_seed7_matches_sweep_oracle(self):
        mdp, T = random_mdp(4, 2, seed=7), random_transition(4, 2, seed=7)
        pi = random_policy(4, 2, seed=7)
        # independent oracle: plain Python sweeps to machine precision
        q_ref = np.zeros((4, 2))
        for _ in range(2000):
            v = [sum(pi[s, a] * q_ref[s, a] for a in range(2)) for s in range(4)]
            q_ref = np.array([[mdp.reward[s, a] + mdp.discount * sum(T[s, a, t] * v[t] for t in range(4))
                               for a in range(2)] for s in range(4)])
        q, _ = evaluate_policy_exact(mdp, T, pi)
        np.testing.assert_allclose(q, q_ref, atol=1e-14, rtol=0)

    def test_solve_and_iterate_agree(self):
        mdp, T, pi = random_mdp(5, 3, 2), random_transition(5, 3, 2), random_policy(5, 3, 2)
        q1, J1 = evaluate_policy_exact(mdp, T, pi, method="solve")
        q2, J2 = evaluate_policy_exact(mdp, T, pi, method="iterate")
        np.testing.assert_allclose(q1, q2, atol=1e-10)

    def test_values_within_reward_bounds(self):
        mdp, T, pi = random_mdp(5, 3, 3), random_transition(5, 3, 3), random_policy(5, 3, 3)
        q, _ = evaluate_policy_exact(mdp, T, pi)
        lo, hi = mdp.reward_bounds()
        assert np.all(q >= lo - 1e-12) and np.all(q <= hi + 1e-12)

    def test_monte_carlo_agreement(self):
        mdp, T, pi = random_mdp(5, 2, 4, discount=0.8), random_transition(5, 2, 4), random_policy(5, 2, 4)
        _, J = evaluate_policy_exact(mdp, T, pi)
        rng = np.random.default_rng(0)
        E, H = 10_000, 120
        s = rng.choice(5, size=E, p=mdp.initial_dist)
        ret = np.zeros(E)
        for t in range(H):
            a = (rng.random(E)[:, None] < np.cumsum(pi[s], axis=1)).argmax(axis=1)
            ret += mdp.discount ** t * mdp.reward[s, a]
            s = (rng.random(E)[:, None] < np.cumsum(T[s, a], axis=1)).argmax(axis=1)
        assert abs(ret.mean() - J) <= 3 * ret.std(ddof=1) / np.sqrt(E) + mdp.discount ** H / (1 - mdp.discount)


class TestContraction:
    def test_standard_backup_is_gamma_contraction(self):
        mdp, T, pi = random_mdp(6, 3, 5, discount=0.95), random_transition(6, 3, 5), random_policy(6, 3, 5)
        rng = np.random.default_rng(5)
        for _ in range(200):
            q1, q2 = rng.normal(size=(2, 6, 3)) * 10
            lhs = np.abs(bellman_backup(q1, mdp, T, pi) - bellman_backup(q2, mdp, T, pi)).max()
            assert lhs <= mdp.discount * np.abs(q1 - q2).max() + 1e-12

    def test_iteration_cap_raises(self):
        with pytest.raises(ConvergenceError):
            iterate_to_fixed_point(lambda q: q + 1.0, np.zeros(2), tol=1e-12, max_sweeps=5)


class TestGreedyPolicy:
    @pytest.mark.parametrize("row, action", [([1, 3, 2], 1), ([2, 2, 1], 0), ([4, 4, 4], 0)])
    def test_argmax_with_lowest_index_ties(self, row, action):
        pi = greedy_policy(np.array([row], dtype=float))
        assert pi[0, action] == 1.0 and pi.sum() == 1.0

    def test_value_iteration_is_greedy_fixed_point(self):
        mdp, T = random_mdp(4, 3, 9), random_transition(4, 3, 9)
        q = value_iteration(mdp, T)
        q_pi, _ = evaluate_policy_exact(mdp, T, greedy_policy(q))
        np.testing.assert_allclose(q_pi, q, atol=1e-9)
