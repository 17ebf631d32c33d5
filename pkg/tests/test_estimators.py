import numpy as np
import pytest

from macpg.envs import reference_chain
from macpg.estimators import (Batch, EstimatorKind, RunningBaseline, estimate, grad_ac,
                              grad_adv_ac, grad_adv_reinforce, grad_mac, grad_reinforce)
from macpg.mdp import TabularMdp, Trajectory, compute_returns
from macpg.nets import MlpSpec, PolicyNet, forward, init_params
from macpg.oracle import (QTable, TabularPolicy, exact_policy_gradient, measure_estimator,
                          solve_occupancy, solve_q)


def mlp_policy(rng, obs_dim=3, n_actions=3, hidden=(6,), scale=1.0):
    spec = MlpSpec(obs_dim, n_actions, hidden, "tanh")
    params = init_params(spec, rng)
    params.values *= scale
    return PolicyNet(spec, params)


class LinearCritic:
    def __init__(self, W, c=0.0):
        self.W, self.c = W, c

    def q_values(self, states):
        return np.asarray(states) @ self.W + self.c


def random_batch(rng, n, obs_dim=3, n_actions=3):
    return Batch(rng.normal(size=(n, obs_dim)), rng.integers(0, n_actions, size=n),
                 rng.normal(size=n))


class TestBatch:
    def test_returns_match_source(self):
        trajs = [Trajectory([0, 1, 2], [1, 1, 0], [0.0, 1.0, 2.0]),
                 Trajectory([0, 1], [0, 1], [3.0, -1.0], terminated=False)]
        b = Batch.from_trajectories(trajs, 0.9)
        np.testing.assert_allclose(b.returns, np.concatenate([compute_returns(t, 0.9) for t in trajs]),
                                   atol=1e-10)
        assert len(b) == 5

    def test_running_baseline_window(self):
        b = RunningBaseline(window=3)
        assert b.value == 0.0
        for r in (1, 2, 3, 10):
            b.update(r)
        assert b.value == pytest.approx(5.0)


class TestReinforce:
    def test_zero_returns(self):
        rng = np.random.default_rng(0)
        b = random_batch(rng, 10)
        b = Batch(b.states, b.actions, np.zeros(10))
        assert np.all(grad_reinforce(b, mlp_policy(rng)) == 0)

    def test_single_entry_tabular(self):
        pol = TabularPolicy.from_logits([[0.3, -0.2, 1.0], [0.0, 0.0, 0.0]])
        g = grad_reinforce(Batch(np.array([0]), np.array([2]), np.array([1.7])), pol)
        expected = np.zeros((2, 3))
        expected[0] = 1.7 * (np.eye(3)[2] - pol.action_probs[0])
        np.testing.assert_allclose(g, expected.ravel(), rtol=0, atol=1e-15)

    def test_symmetric_bandit_vanishes(self):
        rng = np.random.default_rng(1)
        n = 10_000
        pol = TabularPolicy.uniform(1, 2)
        acts = rng.integers(0, 2, size=n)
        g = grad_reinforce(Batch(np.zeros(n, dtype=int), acts, np.full(n, 3.0)), pol)
        se = 3.0 * 0.5 / np.sqrt(n)
        assert np.all(np.abs(g) < 5 * se)

    def test_adv_zero_baseline_equals_plain(self):
        rng = np.random.default_rng(2)
        b, pol = random_batch(rng, 12), mlp_policy(rng)
        np.testing.assert_array_equal(grad_adv_reinforce(b, pol, 0.0), grad_reinforce(b, pol))

    def test_adv_constant_returns(self):
        rng = np.random.default_rng(3)
        b = random_batch(rng, 12)
        b = Batch(b.states, b.actions, np.full(12, 4.25))
        assert np.all(grad_adv_reinforce(b, mlp_policy(rng), 4.25) == 0)

    def test_adv_baseline_must_be_finite(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            grad_adv_reinforce(random_batch(rng, 2), mlp_policy(rng), np.nan)

    def test_baseline_keeps_mean(self):
        mdp = TabularMdp(np.ones((1, 2, 1)), [[1.0, 0.2]], 0.0, 0)
        pol = TabularPolicy.from_logits([[0.4, -0.1]])
        q = solve_q(mdp, pol)[1]
        plain = measure_estimator(mdp, pol, q, "REINFORCE", 4, 50_000, seed=5)
        adv = measure_estimator(mdp, pol, q, "ADV_REINFORCE", 4, 50_000, seed=6, baseline=0.7)
        se = np.hypot(plain.mean_se, adv.mean_se)
        assert np.all(np.abs(plain.mean - adv.mean) <= 4 * se)
        assert adv.total_variance < plain.total_variance


class TestActorCritic:
    def test_zero_critic(self):
        rng = np.random.default_rng(4)
        g = grad_ac(random_batch(rng, 9), mlp_policy(rng), LinearCritic(np.zeros((3, 3))))
        assert np.all(g == 0)

    def test_deterministic_policy_matches_mac(self):
        rng = np.random.default_rng(5)
        spec = MlpSpec(3, 2)
        params = init_params(spec, rng)
        W, b = params.layers()[0]
        W[:] = 0.0
        b[:] = [0.0, 60.0]
        pol = PolicyNet(spec, params)
        critic = LinearCritic(rng.normal(size=(3, 2)), 5.0)
        states = rng.normal(size=(20, 3))
        batch = Batch(states, np.ones(20, dtype=int), np.zeros(20))
        np.testing.assert_allclose(grad_ac(batch, pol, critic), grad_mac(states, pol, critic),
                                   rtol=0, atol=1e-12)

    def test_adv_constant_q(self):
        rng = np.random.default_rng(6)
        b = random_batch(rng, 15)
        critic = LinearCritic(np.repeat(rng.normal(size=(3, 1)), 3, axis=1))
        np.testing.assert_allclose(grad_adv_ac(b, mlp_policy(rng), critic), 0.0, atol=1e-15)

    def test_adv_ac_mean_matches_ac(self):
        mdp = reference_chain()
        pol = TabularPolicy.from_logits(np.random.default_rng(7).normal(size=(5, 2)))
        q = solve_q(mdp, pol)[1]
        ac = measure_estimator(mdp, pol, q, "AC", 16, 50_000, seed=11)
        adv = measure_estimator(mdp, pol, q, "ADV_AC", 16, 50_000, seed=12)
        se = np.hypot(ac.mean_se, adv.mean_se)
        assert np.all(np.abs(ac.mean - adv.mean) <= 4 * se)

    def test_adv_ac_variance_on_chain(self):
        mdp = reference_chain()
        pol = TabularPolicy.uniform(5, 2)
        q = solve_q(mdp, pol)[1]
        ac = measure_estimator(mdp, pol, q, "AC", 16, 20_000, seed=13)
        adv = measure_estimator(mdp, pol, q, "ADV_AC", 16, 20_000, seed=13)
        assert np.all(adv.variance <= ac.variance + 3 * ac.variance_se)


class TestMac:
    def test_constant_q_zero(self):
        rng = np.random.default_rng(8)
        g = grad_mac(rng.normal(size=(7, 3)), mlp_policy(rng), LinearCritic(np.zeros((3, 3)), 2.5))
        assert np.max(np.abs(g)) < 1e-14

    def test_baseline_invariance_fuzz(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            pol = mlp_policy(rng, scale=rng.uniform(0.1, 5))
            critic = LinearCritic(rng.normal(scale=3, size=(3, 3)))
            shifted = LinearCritic(critic.W, rng.normal(scale=100))
            states = rng.normal(size=(int(rng.integers(1, 8)), 3))
            np.testing.assert_allclose(grad_mac(states, pol, shifted), grad_mac(states, pol, critic),
                                       rtol=0, atol=1e-10)

    def test_exact_gradient_with_occupancy_weights(self):
        mdp = reference_chain()
        pol = TabularPolicy.from_logits(np.random.default_rng(10).normal(size=(5, 2)))
        d = solve_occupancy(mdp, pol)
        q = solve_q(mdp, pol)[1]
        g = grad_mac(np.arange(5), pol, QTable(q), weights=d)
        np.testing.assert_allclose(g, exact_policy_gradient(mdp, pol), rtol=0, atol=1e-10)

    def test_ignores_actions(self):
        rng = np.random.default_rng(11)
        b = random_batch(rng, 10)
        pol, critic = mlp_policy(rng), LinearCritic(rng.normal(size=(3, 3)))
        g1 = estimate("MAC", b, pol, critic)
        g2 = estimate("MAC", Batch(b.states, rng.permutation(b.actions)[::-1], -b.returns), pol, critic)
        assert g1.tobytes() == g2.tobytes()

    def test_matches_finite_differences(self):
        """MAC equals the gradient of sum_s w_s sum_a pi(a|s) Qhat(s,a) with Qhat frozen."""
        rng = np.random.default_rng(12)
        pol = mlp_policy(rng)
        critic = LinearCritic(rng.normal(size=(3, 3)))
        states = rng.normal(size=(4, 3))
        q = critic.q_values(states)
        g = grad_mac(states, pol, critic)

        def surrogate(v):
            p, _ = forward(pol.spec, pol.params.like(v), states)
            return (p * q).sum() / len(states)

        h = 1e-6
        fd = np.array([(surrogate(pol.params.values + h * e) - surrogate(pol.params.values - h * e))
                       / (2 * h) for e in np.eye(len(pol.params))])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)

    def test_saturated_policy_finite(self):
        pol = TabularPolicy.from_logits([[0.0, 800.0]])
        g = grad_mac(np.array([0]), pol, QTable([[1.0, 2.0]]))
        assert np.all(np.isfinite(g))


def test_estimator_dispatch_needs_critic():
    rng = np.random.default_rng(13)
    with pytest.raises(ValueError):
        estimate(EstimatorKind.AC, random_batch(rng, 3), mlp_policy(rng))


@pytest.mark.parametrize("name,kind", [("mac", "MAC"), ("adv-ac", "ADV_AC"),
                                       ("advantage_reinforce", "ADV_REINFORCE"), ("A2C", "ADV_AC")])
def test_kind_parsing(name, kind):
    assert EstimatorKind.parse(name).value == kind
