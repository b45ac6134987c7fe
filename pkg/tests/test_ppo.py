"""Advantage estimation and clipped-surrogate update behavior."""

import numpy as np
import pytest

from simadapt.envs import DEFAULT_TASK_REWARDS, make_env, make_spec
from simadapt.nn import finite_difference_gradients, max_relative_error
from simadapt.policy import GaussianPolicy, batch_gaussian_log_prob
from simadapt.ppo import (
    EpisodeData,
    PpoConfig,
    PpoTrainer,
    RolloutBatch,
    ValueFunction,
    collect_policy_batch,
    compute_gae,
    gae_from_values,
    normalize_advantages,
    surrogate_loss_and_grads,
    train_policy,
)


def single_step_episode(reward, obs_dim=1, terminated=True):
    return EpisodeData(
        inputs=np.zeros((1, obs_dim)),
        outputs=np.zeros((1, 1)),
        log_probs=np.zeros(1),
        rewards=np.array([reward], dtype=float),
        last_input=np.zeros(obs_dim),
        terminated=terminated,
    )


class TestGae:
    def test_single_step_unit_reward_zero_values(self):
        adv, ret = gae_from_values(np.array([1.0]), np.zeros(2), gamma=1.0, lam=1.0)
        assert adv[0] == pytest.approx(1.0, abs=1e-12)
        assert ret[0] == pytest.approx(1.0, abs=1e-12)

    def test_three_step_matches_brute_force_double_sum(self):
        rewards = np.array([1.0, -0.5, 2.0])
        values = np.array([0.3, -0.2, 0.4, 0.1])
        gamma, lam = 0.99, 0.95
        adv, ret = gae_from_values(rewards, values, gamma, lam)

        deltas = rewards + gamma * values[1:] - values[:-1]
        for t in range(3):
            brute = sum((gamma * lam) ** k * deltas[t + k] for k in range(3 - t))
            assert adv[t] == pytest.approx(brute, abs=1e-12)
            assert ret[t] == pytest.approx(brute + values[t], abs=1e-12)

    def test_zero_rewards_zero_values_give_zero_advantage(self):
        adv, ret = gae_from_values(np.zeros(7), np.zeros(8), 0.99, 0.95)
        assert np.all(adv == 0.0)
        assert np.all(ret == 0.0)

    def test_value_length_mismatch_rejected(self):
        with pytest.raises(Exception):
            gae_from_values(np.zeros(3), np.zeros(3), 0.99, 0.95)

    def test_terminal_ignores_bootstrap_truncation_uses_it(self):
        rng = np.random.default_rng(0)
        vf = ValueFunction(2, hidden=(8,), rng=rng)
        inputs = rng.normal(size=(4, 2))
        last = rng.normal(size=2)
        base = dict(outputs=np.zeros((4, 1)), log_probs=np.zeros(4),
                    rewards=np.ones(4))
        term = EpisodeData(inputs=inputs, last_input=last, terminated=True, **base)
        trunc = EpisodeData(inputs=inputs, last_input=last, terminated=False, **base)

        adv_t, _ = compute_gae(RolloutBatch([term]), vf, 0.99, 0.95)
        adv_u, _ = compute_gae(RolloutBatch([trunc]), vf, 0.99, 0.95)
        v_last = vf.predict(last)
        assert abs(v_last) > 1e-6
        assert adv_u[-1] - adv_t[-1] == pytest.approx(0.99 * v_last, abs=1e-10)

    def test_none_last_input_bootstraps_zero(self):
        rng = np.random.default_rng(1)
        vf = ValueFunction(2, hidden=(8,), rng=rng)
        ep = single_step_episode(1.0, obs_dim=2, terminated=False)
        ep.last_input = None
        adv, _ = compute_gae(RolloutBatch([ep]), vf, 0.99, 0.95)
        expected = 1.0 - vf.predict(ep.inputs)[0]
        assert adv[0] == pytest.approx(expected, abs=1e-10)

    def test_no_value_function_gives_discounted_reward_to_go(self):
        rewards = np.array([1.0, 1.0, 1.0])
        ep = EpisodeData(inputs=np.zeros((3, 1)), outputs=np.zeros((3, 1)),
                         log_probs=np.zeros(3), rewards=rewards,
                         last_input=None, terminated=True)
        adv, ret = compute_gae(RolloutBatch([ep]), None, 0.9, 1.0)
        assert ret[0] == pytest.approx(1 + 0.9 + 0.81, abs=1e-12)
        assert np.allclose(adv, ret)


class TestAdvantageNormalization:
    def test_mean_zero_std_one(self):
        rng = np.random.default_rng(3)
        a = normalize_advantages(rng.normal(2.0, 5.0, size=400))
        assert abs(a.mean()) < 1e-9
        assert abs(a.std() - 1.0) < 1e-6

    def test_constant_advantages_collapse_to_near_zero(self):
        a = normalize_advantages(np.full(10, 3.7))
        assert np.max(np.abs(a)) < 1e-7


class TestSurrogate:
    def make_agent(self, seed=0):
        return GaussianPolicy(2, 1, hidden=(4,), rng=np.random.default_rng(seed))

    def test_unit_ratio_zero_mean_advantage_gives_zero_loss(self):
        agent = self.make_agent()
        rng = np.random.default_rng(5)
        X = rng.normal(size=(6, 2))
        out = np.array([agent.act(x, rng)[0] for x in X])
        mu, ls = agent.dist_batch(X)
        old_lp = batch_gaussian_log_prob(mu, ls, out)
        advs = normalize_advantages(rng.normal(size=6))
        loss, _, stats = surrogate_loss_and_grads(agent, X, out, old_lp, advs, 0.2)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert stats["mean_ratio"] == pytest.approx(1.0, abs=1e-12)
        assert stats["clip_fraction"] == 0.0

    @pytest.mark.parametrize("ratio,adv", [(2.0, 1.0), (0.5, -1.0)])
    def test_saturated_clip_branch_contributes_zero_gradient(self, ratio, adv):
        agent = self.make_agent(1)
        rng = np.random.default_rng(7)
        X = rng.normal(size=(1, 2))
        out = rng.normal(size=(1, 1))
        mu, ls = agent.dist_batch(X)
        lp = batch_gaussian_log_prob(mu, ls, out)
        old_lp = lp - np.log(ratio)
        _, grads, stats = surrogate_loss_and_grads(
            agent, X, out, old_lp, np.array([adv]), 0.2)
        assert stats["clip_fraction"] == 1.0
        assert all(np.all(g == 0.0) for g in grads)

    def test_out_of_band_ratio_with_favorable_sign_keeps_gradient(self):
        agent = self.make_agent(2)
        rng = np.random.default_rng(9)
        X = rng.normal(size=(1, 2))
        out = rng.normal(size=(1, 1))
        mu, ls = agent.dist_batch(X)
        old_lp = batch_gaussian_log_prob(mu, ls, out) - np.log(2.0)
        _, grads, stats = surrogate_loss_and_grads(
            agent, X, out, old_lp, np.array([-1.0]), 0.2)
        assert stats["clip_fraction"] == 0.0
        assert any(np.any(g != 0.0) for g in grads)

    def test_gradient_matches_finite_differences(self):
        agent = self.make_agent(3)
        rng = np.random.default_rng(11)
        X = rng.normal(size=(5, 2))
        out = rng.normal(scale=0.5, size=(5, 1))
        mu, ls = agent.dist_batch(X)
        old_lp = batch_gaussian_log_prob(mu, ls, out)
        advs = rng.normal(size=5)

        _, grads, _ = surrogate_loss_and_grads(agent, X, out, old_lp, advs, 0.2,
                                               entropy_coef=0.1)

        def loss_fn():
            l, _, _ = surrogate_loss_and_grads(agent, X, out, old_lp, advs, 0.2,
                                               entropy_coef=0.1)
            return l

        num = finite_difference_gradients(loss_fn, agent.params())
        for g, n in zip(grads, num):
            assert max_relative_error(g, n) < 1e-4


class TestPpoUpdate:
    def test_zero_advantages_leave_parameters_unchanged(self):
        agent = GaussianPolicy(1, 1, hidden=(4,), rng=np.random.default_rng(0))
        before = [p.copy() for p in agent.params()]
        batch = RolloutBatch([single_step_episode(3.0) for _ in range(8)])
        trainer = PpoTrainer(agent, None, PpoConfig(epochs=3, minibatch=4))
        diag = trainer.update(batch, np.random.default_rng(1))
        assert not diag["aborted"]
        for b, a in zip(before, agent.params()):
            assert np.array_equal(b, a)

    def test_nonfinite_advantage_aborts_without_touching_weights(self):
        agent = GaussianPolicy(1, 1, hidden=(4,), rng=np.random.default_rng(2))
        before = [p.copy() for p in agent.params()]
        bad = single_step_episode(np.inf)
        batch = RolloutBatch([bad, single_step_episode(1.0)])
        trainer = PpoTrainer(agent, None, PpoConfig())
        diag = trainer.update(batch, np.random.default_rng(3))
        assert diag["aborted"]
        for b, a in zip(before, agent.params()):
            assert np.array_equal(b, a)

    def test_nonfinite_log_prob_restores_weights_mid_update(self):
        agent = GaussianPolicy(1, 1, hidden=(4,), rng=np.random.default_rng(4))
        before = [p.copy() for p in agent.params()]
        ep = single_step_episode(1.0)
        ep.log_probs = np.array([np.nan])
        other = single_step_episode(-1.0)
        trainer = PpoTrainer(agent, None, PpoConfig(epochs=1, minibatch=2))
        diag = trainer.update(RolloutBatch([ep, other]), np.random.default_rng(5))
        assert diag["aborted"]
        for b, a in zip(before, agent.params()):
            assert np.array_equal(b, a)

    def test_bandit_policy_mean_converges(self):
        rng = np.random.default_rng(17)
        agent = GaussianPolicy(1, 1, hidden=(8,), rng=rng)
        vf = ValueFunction(1, hidden=(8,), rng=rng)
        trainer = PpoTrainer(agent, vf, PpoConfig(lr=3e-3, epochs=4, minibatch=64))
        obs = np.zeros(1)
        mean = None
        for _ in range(200):
            episodes = []
            for _ in range(64):
                a, lp = agent.act(obs, rng)
                episodes.append(EpisodeData(
                    inputs=obs[None, :], outputs=a[None, :],
                    log_probs=np.array([lp]),
                    rewards=np.array([-(a[0] - 0.7) ** 2]),
                    last_input=None, terminated=True))
            trainer.update(RolloutBatch(episodes), rng)
            mean = agent.mean_action(obs)[0]
            if abs(mean - 0.7) < 0.02:
                break
        assert mean == pytest.approx(0.7, abs=0.05)


class TestValueFunction:
    def test_fit_reduces_error_on_linear_target(self):
        rng = np.random.default_rng(8)
        vf = ValueFunction(3, hidden=(16,), rng=rng)
        X = rng.normal(size=(256, 3))
        y = X @ np.array([1.0, -2.0, 0.5])
        before = float(np.mean((vf.predict(X) - y) ** 2))
        vf.fit(X, y, rng, epochs=60, minibatch=64, lr=1e-2)
        after = float(np.mean((vf.predict(X) - y) ** 2))
        assert after < 0.1 * before

    def test_single_input_predict_is_scalar(self):
        vf = ValueFunction(2, hidden=(4,), rng=np.random.default_rng(9))
        assert isinstance(vf.predict(np.zeros(2)), float)

    def test_checkpoint_round_trip(self):
        rng = np.random.default_rng(10)
        vf = ValueFunction(2, hidden=(4,), rng=rng)
        clone = ValueFunction.from_dict(vf.to_dict())
        X = rng.normal(size=(5, 2))
        assert np.allclose(vf.predict(X), clone.predict(X), atol=1e-15)


class TestCollection:
    def test_step_bookkeeping_matches_episode_lengths(self):
        handle = make_env(make_spec("slider"))
        policy = GaussianPolicy(2, 1, hidden=(8,), rng=np.random.default_rng(0))
        trajs, batch = collect_policy_batch(
            handle, policy, 5, np.random.default_rng(1), np.random.default_rng(2),
            DEFAULT_TASK_REWARDS["slider"])
        assert batch.n_steps() == sum(len(t) for t in trajs)
        assert batch.n_steps() == 5 * handle.spec.max_steps
        assert all(not ep.terminated for ep in batch.episodes)

    def test_collection_is_deterministic_under_seeds(self):
        handle = make_env(make_spec("pendulum"))
        rows = []
        for _ in range(2):
            policy = GaussianPolicy(3, 1, hidden=(8,), rng=np.random.default_rng(3))
            _, batch = collect_policy_batch(
                handle, policy, 3, np.random.default_rng(4), np.random.default_rng(5),
                DEFAULT_TASK_REWARDS["pendulum"])
            rows.append(batch.concat())
        for a, b in zip(rows[0], rows[1]):
            assert np.array_equal(a, b)

    def test_train_policy_returns_history(self):
        handle = make_env(make_spec("slider"))
        rng = np.random.default_rng(6)
        policy = GaussianPolicy(2, 1, hidden=(8,), rng=rng)
        vf = ValueFunction(2, hidden=(8,), rng=rng)
        history = train_policy(
            handle, policy, vf, DEFAULT_TASK_REWARDS["slider"],
            iterations=2, episodes_per_iter=2,
            config=PpoConfig(epochs=2, minibatch=64),
            env_rng=np.random.default_rng(7), policy_rng=np.random.default_rng(8),
            update_rng=np.random.default_rng(9))
        assert len(history) == 2
        assert {"mean_reward", "mean_length", "aborted", "iteration"} <= set(history[0])
        assert not history[-1]["aborted"]
