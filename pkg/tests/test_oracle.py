import numpy as np
import pytest
from conftest import random_mdp

from macpg.envs import chain_mdp, reference_chain
from macpg.estimators import Batch, EstimatorKind, grad_ac, grad_mac
from macpg.mdp import TabularMdp
from macpg.oracle import (Moments, QTable, TabularPolicy, batch_estimates,
                          exact_policy_gradient, jensen_check, jensen_margin, measure_estimator,
                          objective, solve, solve_occupancy, solve_q, stats_to_csv)


def value_iteration(mdp, probs, tol=1e-14, max_iter=100_000):
    """Independent oracle: iterate the policy Bellman operator to a fixed point."""
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = mdp.reward + mdp.discount * np.einsum("sat,t->sa", mdp.transition, v)
        v_new = (probs * q).sum(axis=1)
        if np.max(np.abs(v_new - v)) < tol:
            return v_new, q
        v = v_new
    raise AssertionError("value iteration did not converge")


def occupancy_by_power_series(mdp, probs, horizon=5000):
    P = np.einsum("sa,sat->st", probs, mdp.transition)
    dist = np.zeros(mdp.n_states)
    dist[mdp.start_state] = 1.0
    d = np.zeros(mdp.n_states)
    w = 1.0
    for _ in range(horizon):
        d += w * dist
        dist = dist @ P
        w *= mdp.discount
        if w < 1e-18:
            break
    return d


def random_policy(rng, n_s, n_a, scale=1.5):
    return TabularPolicy.from_logits(rng.normal(scale=scale, size=(n_s, n_a)))


def bandit(rewards, gamma=0.0):
    n_a = len(rewards)
    return TabularMdp(np.ones((1, n_a, 1)), [rewards], gamma, 0)


class TestOccupancy:
    def test_single_absorbing_state(self):
        mdp = TabularMdp(np.ones((1, 1, 1)), [[0.0]], 0.9, 0)
        np.testing.assert_allclose(solve_occupancy(mdp, TabularPolicy([[1.0]])), [10.0], rtol=1e-14)

    def test_two_state_cycle(self):
        T = np.zeros((2, 1, 2))
        T[0, 0, 1] = T[1, 0, 0] = 1.0
        mdp = TabularMdp(T, np.zeros((2, 1)), 0.5, 0)
        # 1 + g^2 + g^4 ... and g + g^3 + ...
        np.testing.assert_allclose(solve_occupancy(mdp, TabularPolicy([[1.0], [1.0]])),
                                   [4 / 3, 2 / 3], rtol=1e-14)

    def test_zero_discount_is_start_indicator(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(rng, max_gamma=0.0)
        mdp = TabularMdp(mdp.transition, mdp.reward, 0.0, mdp.start_state, mdp.terminal)
        d = solve_occupancy(mdp, random_policy(rng, mdp.n_states, mdp.n_actions))
        expected = np.zeros(mdp.n_states)
        expected[mdp.start_state] = 1.0
        np.testing.assert_array_equal(d, expected)

    def test_matches_power_series(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            mdp = random_mdp(rng, max_gamma=0.9)
            pol = random_policy(rng, mdp.n_states, mdp.n_actions)
            np.testing.assert_allclose(solve_occupancy(mdp, pol),
                                       occupancy_by_power_series(mdp, pol.action_probs),
                                       rtol=1e-10, atol=1e-12)


class TestSolveQ:
    def test_terminal_only(self):
        mdp = TabularMdp(np.ones((1, 3, 1)), np.zeros((1, 3)), 0.9, 0, [True])
        v, q = solve_q(mdp, TabularPolicy.uniform(1, 3))
        assert np.all(q == 0) and np.all(v == 0)

    def test_self_loop_geometric(self):
        mdp = TabularMdp(np.ones((1, 2, 1)), np.ones((1, 2)), 0.9, 0)
        v, q = solve_q(mdp, TabularPolicy.uniform(1, 2))
        np.testing.assert_allclose(v, [10.0], rtol=1e-13)
        np.testing.assert_allclose(q, [[10.0, 10.0]], rtol=1e-13)

    def test_chain_matches_value_iteration(self):
        mdp = chain_mdp(3, slip=0.2, discount=0.9)
        pol = TabularPolicy.uniform(3, 2)
        v, q = solve_q(mdp, pol)
        v_vi, q_vi = value_iteration(mdp, pol.action_probs)
        np.testing.assert_allclose(v, v_vi, rtol=0, atol=1e-12)
        np.testing.assert_allclose(q, q_vi, rtol=0, atol=1e-12)

    def test_random_mdps_match_value_iteration(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            mdp = random_mdp(rng, max_gamma=0.9)
            pol = random_policy(rng, mdp.n_states, mdp.n_actions)
            v, q = solve_q(mdp, pol)
            v_vi, q_vi = value_iteration(mdp, pol.action_probs)
            np.testing.assert_allclose(q, q_vi, rtol=0, atol=1e-10)

    def test_self_consistency_fuzz(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            mdp = random_mdp(rng)
            pol = random_policy(rng, mdp.n_states, mdp.n_actions)
            sol = solve(mdp, pol)
            assert abs(sol.d_pi.sum() - 1 / (1 - mdp.discount)) < 1e-8
            bellman = mdp.reward + mdp.discount * mdp.transition @ sol.v_pi
            assert np.max(np.abs(sol.q_pi - bellman)) < 1e-8
            assert np.max(np.abs(sol.v_pi - (pol.action_probs * sol.q_pi).sum(1))) < 1e-10

    def test_invalid_mdp_rejected(self):
        T = np.full((1, 1, 1), 0.5)
        with pytest.raises(ValueError):
            solve_q(TabularMdp(T, [[0.0]], 0.5), TabularPolicy([[1.0]]))


class TestExactGradient:
    def test_bandit_hand_value(self):
        g = exact_policy_gradient(bandit([1.0, 0.0]), TabularPolicy.uniform(1, 2))
        np.testing.assert_allclose(g, [0.25, -0.25], rtol=0, atol=1e-15)

    def test_symmetric_bandit_zero(self):
        g = exact_policy_gradient(bandit([0.7, 0.7]), TabularPolicy.uniform(1, 2))
        np.testing.assert_allclose(g, 0.0, atol=1e-16)

    def test_near_greedy_optimal_is_stationary(self):
        mdp = chain_mdp(5)
        logits = np.zeros((5, 2))
        logits[:, 1] = 20.0
        g = exact_policy_gradient(mdp, TabularPolicy.from_logits(logits))
        assert np.linalg.norm(g) < 1e-3

    def test_unparameterized_rejected(self):
        with pytest.raises(ValueError):
            exact_policy_gradient(bandit([1.0, 0.0]), TabularPolicy([[0.5, 0.5]]))

    @staticmethod
    def fd_gradient(mdp, logits, h=1e-6):
        g = np.zeros(logits.size)
        for i in range(logits.size):
            lp, lm = logits.copy().ravel(), logits.copy().ravel()
            lp[i] += h
            lm[i] -= h
            jp = objective(mdp, TabularPolicy.from_logits(lp.reshape(logits.shape)))
            jm = objective(mdp, TabularPolicy.from_logits(lm.reshape(logits.shape)))
            g[i] = (jp - jm) / (2 * h)
        return g

    def test_bandit_finite_differences(self):
        g_fd = self.fd_gradient(bandit([1.0, 0.0]), np.zeros((1, 2)))
        np.testing.assert_allclose(g_fd, [0.25, -0.25], atol=1e-9)

    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(21)
        worst = 0.0
        for _ in range(30):
            mdp = random_mdp(rng, max_states=6, max_actions=3)
            logits = rng.normal(size=(mdp.n_states, mdp.n_actions))
            g = exact_policy_gradient(mdp, TabularPolicy.from_logits(logits))
            g_fd = self.fd_gradient(mdp, logits)
            scale = max(np.max(np.abs(g)), 1e-3)
            worst = max(worst, np.max(np.abs(g - g_fd)) / scale)
        assert worst < 1e-6


class TestJensen:
    def test_deterministic_row_zero_margin(self):
        second, y2, margin = jensen_margin([0.0, 1.0, 0.0], [3.0, -2.0, 7.0])
        assert margin == 0.0 and second == y2 == 4.0

    def test_uniform_plus_minus_one(self):
        second, y2, margin = jensen_margin([0.5, 0.5], [1.0, -1.0])
        assert (second, y2, margin) == (1.0, 0.0, 1.0)

    def test_fuzz_nonnegative(self):
        rng = np.random.default_rng(8)
        mdp = chain_mdp(5)
        for _ in range(1000):
            pol = random_policy(rng, 5, 2, scale=rng.uniform(0, 10))
            q_hat = rng.normal(scale=rng.uniform(0.1, 100), size=(5, 2))
            rep = jensen_check(mdp, pol, q_hat, int(rng.integers(10)))
            assert np.all(rep.margin >= -1e-12)
            np.testing.assert_allclose(rep.y, (pol.action_probs * rep.x).sum(1), atol=1e-12)

    def test_strict_flag(self):
        mdp = chain_mdp(5)
        _, q = solve_q(mdp, TabularPolicy.uniform(5, 2))
        rep = jensen_check(mdp, TabularPolicy.uniform(5, 2), q, 0)
        assert rep.strict[0] and not rep.strict[1:].any()
        assert rep.margin[0] > 0


class TestMoments:
    def test_merge_matches_two_pass(self):
        rng = np.random.default_rng(0)
        x = rng.normal(loc=1e6, size=(1000, 3))
        m = Moments()
        for part in np.array_split(x, 7):
            m = m.merge(Moments.of(part))
        np.testing.assert_allclose(m.mean, x.mean(0), rtol=1e-15)
        np.testing.assert_allclose(m.variance, x.var(0, ddof=1), rtol=1e-9)


class TestMeasureEstimator:
    mdp = reference_chain()

    def test_needs_two_batches(self):
        pol = TabularPolicy.uniform(5, 2)
        with pytest.raises(ValueError):
            measure_estimator(self.mdp, pol, np.zeros((5, 2)), "MAC", 4, 1, seed=0)

    def test_batch_estimates_match_estimator_functions(self):
        rng = np.random.default_rng(1)
        pol = random_policy(rng, 5, 2)
        q = rng.normal(size=(5, 2))
        s = rng.integers(0, 5, size=(3, 7))
        a = rng.integers(0, 2, size=(3, 7))
        for kind, fn in (("AC", lambda b: grad_ac(b, pol, QTable(q))),
                         ("MAC", lambda b: grad_mac(b.states, pol, QTable(q)))):
            est = batch_estimates(kind, self.mdp, pol, q, s, a)
            for i in range(3):
                b = Batch(s[i], a[i], np.zeros(7))
                np.testing.assert_allclose(est[i], fn(b), rtol=0, atol=1e-15)

    def test_deterministic_policy_equal_variance(self):
        logits = np.zeros((5, 2))
        logits[:, 1] = 8.0
        pol = TabularPolicy.from_logits(logits)
        _, q = solve_q(self.mdp, pol)
        ac = measure_estimator(self.mdp, pol, q, "AC", 8, 4000, seed=3)
        mac = measure_estimator(self.mdp, pol, q, "MAC", 8, 4000, seed=3)
        se = np.hypot(ac.total_variance_se, mac.total_variance_se)
        assert abs(ac.total_variance - mac.total_variance) <= 3 * se

    def test_uniform_policy_variance_and_bias(self):
        pol = TabularPolicy.uniform(5, 2)
        _, q = solve_q(self.mdp, pol)
        ac = measure_estimator(self.mdp, pol, q, "AC", 16, 20_000, seed=7)
        mac = measure_estimator(self.mdp, pol, q, "MAC", 16, 20_000, seed=7)
        assert np.all(mac.variance <= ac.variance + 3 * ac.variance_se)
        assert mac.total_variance < 0.9 * ac.total_variance
        se = np.hypot(ac.mean_se, mac.mean_se)
        assert np.all(np.abs(ac.mean - mac.mean) <= 4 * se + 1e-15)
        for st in (ac, mac):
            assert np.all(np.abs(st.bias) <= 4 * st.mean_se + 1e-15)

    def test_fixed_wrong_q_same_bias(self):
        rng = np.random.default_rng(2)
        pol = random_policy(rng, 5, 2)
        _, q = solve_q(self.mdp, pol)
        q_hat = q + rng.normal(scale=0.5, size=q.shape)
        ac = measure_estimator(self.mdp, pol, q_hat, "AC", 16, 20_000, seed=9)
        mac = measure_estimator(self.mdp, pol, q_hat, "MAC", 16, 20_000, seed=9)
        se = np.hypot(ac.mean_se, mac.mean_se)
        assert np.all(np.abs(ac.mean - mac.mean) <= 4 * se + 1e-15)
        assert np.linalg.norm(mac.bias) > 10 * np.linalg.norm(mac.mean_se)

    def test_worker_count_does_not_change_result(self):
        pol = TabularPolicy.uniform(5, 2)
        q = solve_q(self.mdp, pol)[1]
        a = measure_estimator(self.mdp, pol, q, "AC", 16, 2000, seed=4, workers=1)
        b = measure_estimator(self.mdp, pol, q, "AC", 16, 2000, seed=4, workers=4)
        assert stats_to_csv([a]) == stats_to_csv([b])

    def test_trajectory_mode_runs(self):
        pol = TabularPolicy.uniform(5, 2)
        q = solve_q(self.mdp, pol)[1]
        for kind in EstimatorKind:
            st = measure_estimator(self.mdp, pol, q, kind, 8, 200, seed=0, sampling="trajectory")
            assert st.sampling == "trajectory" and np.all(st.variance >= 0)

    def test_reinforce_exact_mode_unbiased(self):
        pol = TabularPolicy.uniform(5, 2)
        q = solve_q(self.mdp, pol)[1]
        st = measure_estimator(self.mdp, pol, q, "REINFORCE", 4, 4000, seed=1)
        assert np.all(np.abs(st.bias) <= 4 * st.mean_se + 1e-15)

    def test_csv_schema(self):
        pol = TabularPolicy.uniform(5, 2)
        st = measure_estimator(self.mdp, pol, np.zeros((5, 2)), "MAC", 2, 10, seed=12)
        lines = stats_to_csv([st]).splitlines()
        assert lines[0] == "estimator,component,mean,variance,reference,n_batches,batch_size,seed"
        assert len(lines) == 11
        assert lines[1].split(",")[-3:] == ["10", "2", "12"]
