"""Identification loop contracts: rewards, bonus, data isolation, artifacts."""

import dataclasses
import json
import math
import os

import numpy as np
import pytest

from simadapt.config import seed_streams
from simadapt.envs import (
    DEFAULT_TASK_REWARDS,
    EnvHandle,
    default_gap,
    make_env,
    make_spec,
    make_target,
)
from simadapt.errors import ContractViolationError
from simadapt.hybrid import ParamFunction, PinnedParams
from simadapt.identify import (
    IdentifyConfig,
    RefineConfig,
    TargetDataset,
    alive_bonus,
    collect_target_data,
    gan_reward,
    identify,
    load_dataset,
    refine_policy,
    save_dataset,
    write_run_dir,
)
from simadapt.policy import GaussianPolicy, scripted_policy
from simadapt.ppo import PpoConfig, ValueFunction, train_policy


def push_policy(action_dim, value=0.6):
    return scripted_policy(lambda obs: np.full(action_dim, value), action_dim,
                           noise_std=0.25)


class TestRewardFormulas:
    def test_chance_score_gives_zero_reward(self):
        assert gan_reward(0.5) == 0.0

    def test_logit_arithmetic(self):
        assert gan_reward(0.731059) == pytest.approx(1.0, abs=1e-4)

    def test_clamp_boundary_ceiling(self):
        assert gan_reward(1.0 - 1e-6) == pytest.approx(13.8155, abs=1e-3)
        assert gan_reward(1e-6) == pytest.approx(-13.8155, abs=1e-3)

    def test_vectorized_scores(self):
        out = gan_reward(np.array([0.5, 0.731059]))
        assert out.shape == (2,)
        assert out[0] == 0.0

    def test_alive_bonus_identity(self):
        assert alive_bonus(37.0, 37.0) == 0.0

    def test_alive_bonus_double_length(self):
        assert alive_bonus(80.0, 40.0) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_alive_bonus_half_length(self):
        assert alive_bonus(20.0, 40.0) == pytest.approx(-math.log(2.0), abs=1e-12)

    def test_alive_bonus_sign_direction(self):
        assert alive_bonus(30.0, 40.0) < 0.0
        assert alive_bonus(50.0, 40.0) > 0.0

    def test_alive_bonus_rejects_empty_sim(self):
        with pytest.raises(ContractViolationError):
            alive_bonus(0.0, 40.0)


class TestTargetData:
    def test_single_short_episode_dataset(self):
        spec = dataclasses.replace(make_spec("slider"), max_steps=1)
        handle = make_env(spec)
        ds = collect_target_data(push_policy(1), handle, 1,
                                 np.random.default_rng(0), np.random.default_rng(1))
        assert ds.n_episodes == 1
        assert ds.mean_length == 1.0
        assert ds.tuples().shape == (1, 2 + 1 + 2)

    def test_zero_noise_on_deterministic_env_repeats_trajectories(self):
        spec = dataclasses.replace(make_spec("slider"), init_noise_std=(0.0, 0.0))
        handle = EnvHandle(spec, obs_noise=False, torque_noise=False)
        ds = collect_target_data(push_policy(1), handle, 3,
                                 np.random.default_rng(0), np.random.default_rng(1),
                                 noise_std=0.0)
        first = ds.trajectories[0].obs
        for traj in ds.trajectories[1:]:
            assert np.array_equal(traj.obs, first)

    def test_all_zero_length_episodes_rejected(self):
        spec = dataclasses.replace(make_spec("hopper1d"), z_healthy=(0.4, 1.0))
        handle = make_env(spec)
        with pytest.raises(ContractViolationError):
            collect_target_data(push_policy(2), handle, 3,
                                np.random.default_rng(0), np.random.default_rng(1))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractViolationError):
            TargetDataset([])

    def test_provenance_records_protocol(self):
        handle = make_target(make_spec("slider"), default_gap("slider", "power"))
        ds = collect_target_data(push_policy(1), handle, 2,
                                 np.random.default_rng(0), np.random.default_rng(1))
        assert ds.provenance["env"] == "slider"
        assert ds.provenance["gap"] == "power"
        assert ds.noise_std == 0.25

    def test_dataset_round_trip(self, tmp_path):
        handle = make_env(make_spec("slider"))
        ds = collect_target_data(push_policy(1), handle, 2,
                                 np.random.default_rng(0), np.random.default_rng(1))
        path = tmp_path / "target.jsonl"
        save_dataset(str(path), ds)
        back = load_dataset(str(path))
        assert back.n_episodes == 2
        assert back.mean_length == ds.mean_length
        assert back.provenance["env"] == "slider"
        assert np.allclose(back.tuples(), ds.tuples())


def tiny_identify_config(iterations, episodes=4):
    return IdentifyConfig(
        iterations=iterations,
        episodes_per_iter=episodes,
        disc_epochs=2,
        disc_minibatch=64,
        param_hidden=(16,),
        value_hidden=(16,),
        disc_hidden=(16,),
        early_stop_window=50,
        ppo=PpoConfig(lr=3e-4, epochs=2, minibatch=128),
    )


@pytest.fixture(scope="module")
def slider_setup():
    spec = make_spec("slider")
    handle = make_target(spec, default_gap("slider", "heavy"))
    rngs = seed_streams(7)
    policy = push_policy(1, value=1.0)
    ds = collect_target_data(policy, handle, 6, rngs["env"], rngs["policy"])
    return spec, handle, policy, ds


class TestIdentifyLoop:
    def test_zero_iterations_leave_f_unchanged(self, slider_setup):
        spec, _, policy, ds = slider_setup
        rngs = seed_streams(3)
        f = ParamFunction(spec, hidden=(16,), rng=rngs["param_fn"])
        before = [p.copy() for p in f.params()]
        run = identify(ds, policy, spec, tiny_identify_config(0), rngs, param_fn=f)
        assert run.metrics == []
        assert not run.stopped_early
        for b, a in zip(before, run.param_fn.params()):
            assert np.array_equal(b, a)

    def test_target_env_never_stepped_during_identification(self, slider_setup):
        spec, handle, policy, ds = slider_setup
        steps_after_collect = handle.steps_taken
        assert steps_after_collect > 0
        rngs = seed_streams(4)
        identify(ds, policy, spec, tiny_identify_config(2), rngs)
        assert handle.steps_taken == steps_after_collect

    def test_metrics_rows_match_completed_iterations(self, slider_setup):
        spec, _, policy, ds = slider_setup
        rngs = seed_streams(5)
        run = identify(ds, policy, spec, tiny_identify_config(3), rngs)
        assert len(run.metrics) == 3
        assert [m["iteration"] for m in run.metrics] == [0, 1, 2]

    def test_reward_composition_recomputable_from_logs(self, slider_setup):
        spec, _, policy, ds = slider_setup
        rngs = seed_streams(6)
        captured = {}

        def grab(it, info):
            captured.update(info)

        run = identify(ds, policy, spec, tiny_identify_config(1), rngs, callback=grab)
        trajs = captured["trajectories"]
        sim_tuples = np.vstack([
            np.hstack([t.obs[:-1], t.actions, t.obs[1:]]) for t in trajs if len(t) > 0])
        recomputed = gan_reward(run.discriminator.score_batch(sim_tuples))
        recomputed = recomputed + captured["bonus"]
        assert np.max(np.abs(recomputed - captured["rewards"])) < 1e-9

    def test_alive_bonus_sign_opposes_length_mismatch(self):
        spec = make_spec("hopper1d")
        handle = make_target(spec, default_gap("hopper1d", "deform"))
        rngs = seed_streams(11)
        policy = push_policy(spec.action_dim, value=0.05)
        ds = collect_target_data(policy, handle, 4, rngs["env"], rngs["policy"])
        run = identify(ds, policy, spec, tiny_identify_config(3), seed_streams(12))
        saw_mismatch = False
        for row in run.metrics:
            ratio = row["sim_mean_length"] / row["target_mean_length"]
            if ratio < 1.0:
                assert row["alive_bonus"] > 0.0
                saw_mismatch = True
            elif ratio > 1.0:
                assert row["alive_bonus"] < 0.0
                saw_mismatch = True
            else:
                assert row["alive_bonus"] == 0.0
        assert saw_mismatch

    def test_alive_bonus_disabled_writes_zero(self, slider_setup):
        spec, _, policy, ds = slider_setup
        rngs = seed_streams(9)
        cfg = tiny_identify_config(1)
        cfg.use_alive_bonus = False
        run = identify(ds, policy, spec, cfg, rngs)
        assert run.metrics[0]["alive_bonus"] == 0.0

    def test_run_directory_artifacts(self, slider_setup, tmp_path):
        spec, _, policy, ds = slider_setup
        rngs = seed_streams(10)
        out = tmp_path / "run"
        run = identify(ds, policy, spec, tiny_identify_config(2), rngs, out_dir=str(out))
        for name in ("config.json", "metrics.csv", "param_fn.json", "discriminator.json"):
            assert (out / name).exists()
        with open(out / "config.json") as fh:
            cfg = json.load(fh)
        assert cfg["iterations"] == 2
        with open(out / "metrics.csv") as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 1 + len(run.metrics)

    def test_empty_metrics_csv_is_empty_file(self, tmp_path):
        from simadapt.identify import write_metrics_csv
        path = tmp_path / "m.csv"
        write_metrics_csv(str(path), [])
        assert path.read_text() == ""


class TestRefinePolicy:
    def test_zero_iterations_returns_behavior_weights(self):
        spec = make_spec("slider")
        policy = GaussianPolicy(2, 1, hidden=(8,), rng=np.random.default_rng(0))
        rngs = seed_streams(11)
        f = PinnedParams(spec)
        cfg = RefineConfig(iterations=0, episodes_per_iter=1)
        refined, history = refine_policy(f, policy, spec,
                                         DEFAULT_TASK_REWARDS["slider"], cfg, rngs)
        assert history == []
        for a, b in zip(policy.params(), refined.params()):
            assert np.array_equal(a, b)
        assert refined is not policy

    def test_pinned_nominal_refinement_equals_plain_source_training(self):
        spec = make_spec("slider")
        base = GaussianPolicy(2, 1, hidden=(8,), rng=np.random.default_rng(1))
        reward_cfg = DEFAULT_TASK_REWARDS["slider"]
        cfg = RefineConfig(iterations=2, episodes_per_iter=3, value_hidden=(8,),
                           ppo=PpoConfig(lr=1.5e-4, epochs=2, minibatch=64))

        rngs = seed_streams(12)
        refined, _ = refine_policy(PinnedParams(spec), base, spec, reward_cfg, cfg, rngs)

        rngs2 = seed_streams(12)
        plain = base.copy()
        vf = ValueFunction(2, hidden=(8,), rng=rngs2["policy"],
                           input_scales=np.asarray(spec.obs_scales, dtype=float))
        train_policy(EnvHandle(spec), plain, vf, reward_cfg, iterations=2,
                     episodes_per_iter=3, config=cfg.ppo, env_rng=rngs2["env"],
                     policy_rng=rngs2["policy"], update_rng=rngs2["policy"])
        for a, b in zip(refined.params(), plain.params()):
            assert np.allclose(a, b, atol=0.0)

    def test_refinement_changes_weights_when_training(self):
        spec = make_spec("slider")
        policy = GaussianPolicy(2, 1, hidden=(8,), rng=np.random.default_rng(2))
        rngs = seed_streams(13)
        f = ParamFunction(spec, hidden=(8,), rng=rngs["param_fn"])
        cfg = RefineConfig(iterations=1, episodes_per_iter=3, value_hidden=(8,),
                           ppo=PpoConfig(epochs=2, minibatch=64))
        refined, history = refine_policy(f, policy, spec,
                                         DEFAULT_TASK_REWARDS["slider"], cfg, rngs)
        assert len(history) == 1
        assert any(not np.array_equal(a, b)
                   for a, b in zip(policy.params(), refined.params()))


class TestSeedStreams:
    def test_streams_are_named_and_independent(self):
        rngs = seed_streams(0)
        assert set(rngs) == {"env", "policy", "param_fn", "discriminator", "cmaes"}
        draws = {k: rngs[k].standard_normal() for k in rngs}
        assert len(set(draws.values())) == len(draws)

    def test_same_seed_same_streams(self):
        a = seed_streams(42)
        b = seed_streams(42)
        for k in a:
            assert a[k].standard_normal() == b[k].standard_normal()
