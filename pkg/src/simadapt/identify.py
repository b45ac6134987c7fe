"""Adversarial simulator identification and policy refinement.

The identification loop alternates discriminator training on (target vs
simulated) transition tuples with PPO updates of the simulation-parameter
function, whose per-step reward is the discriminator logit plus an
episode-length bonus. Refinement then retrains the control policy inside
the identified hybrid simulator using the task reward, touching no
target-domain data.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .discriminator import Discriminator, train_discriminator
from .envs import EnvHandle, EnvSpec, state_features
from .errors import ContractViolationError
from .hybrid import ParamFunction
from .policy import behavior_policy
from .ppo import (
    EpisodeData,
    PpoConfig,
    PpoTrainer,
    RolloutBatch,
    ValueFunction,
    collect_policy_batch,
    train_policy,
)
from .rollout import run_episode, run_episodes
from .trajectory import (
    Trajectory,
    mean_length,
    read_trajectories,
    tuples_matrix,
    write_trajectories,
)


@dataclass
class TargetDataset:
    """Frozen target-domain rollouts plus their provenance."""

    trajectories: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trajectories) == 0:
            raise ContractViolationError("target dataset needs at least one trajectory")

    @property
    def mean_length(self) -> float:
        return mean_length(self.trajectories)

    @property
    def n_episodes(self) -> int:
        return len(self.trajectories)

    def tuples(self) -> np.ndarray:
        return tuples_matrix(self.trajectories)

    @property
    def noise_std(self) -> float:
        return float(self.provenance.get("noise_std", 0.25))


def collect_target_data(policy, target_handle: EnvHandle, n_episodes: int,
                        env_rng, policy_rng, noise_std: float = 0.25,
                        reward_cfg=None, extra_provenance: dict | None = None
                        ) -> TargetDataset:
    """Roll the behavior policy (mean action plus Gaussian exploration
    noise) in the target environment. This is the only stage allowed to
    step the target domain."""
    explorer = behavior_policy(policy, noise_std)
    trajs = run_episodes(target_handle, explorer, n_episodes, env_rng, policy_rng,
                         reward_cfg=reward_cfg, record_states=True)
    if all(len(t) == 0 for t in trajs):
        raise ContractViolationError(
            "every target episode ended immediately; the behavior policy "
            "cannot be this poor for identification to work")
    provenance = {
        "env": target_handle.spec.name,
        "gap": target_handle.gap.kind,
        "n_episodes": n_episodes,
        "noise_std": noise_std,
    }
    provenance.update(extra_provenance or {})
    return TargetDataset(trajs, provenance)


def save_dataset(path: str, dataset: TargetDataset) -> None:
    write_trajectories(path, dataset.trajectories,
                       env_name=str(dataset.provenance.get("env", "unknown")),
                       meta=dataset.provenance)


def load_dataset(path: str) -> TargetDataset:
    trajs, header = read_trajectories(path)
    return TargetDataset(trajs, dict(header.get("meta") or {}))


def gan_reward(score):
    """Discriminator logit log(d / (1 - d)); zero at chance level."""
    score = np.asarray(score, dtype=float)
    out = np.log(score) - np.log1p(-score)
    return float(out) if out.ndim == 0 else out


def alive_bonus(l_i: float, l_R: float) -> float:
    """Episode-length bonus log(l_i / l_R), recomputed once per iteration."""
    if l_i <= 0.0:
        raise ContractViolationError("no simulated steps; cannot form alive bonus")
    if l_R <= 0.0:
        raise ContractViolationError("target mean length must be positive")
    return float(np.log(l_i / l_R))


@dataclass
class IdentifyConfig:
    iterations: int = 200
    episodes_per_iter: int = 50
    disc_epochs: int = 5
    disc_minibatch: int = 256
    disc_lr: float = 1e-3
    disc_hidden: tuple = (64, 64)
    param_hidden: tuple = (32, 32)
    value_hidden: tuple = (64, 64)
    use_alive_bonus: bool = True
    early_stop_window: int = 20
    early_stop_band: tuple = (0.45, 0.55)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(
        lr=3e-4, epochs=6, minibatch=256, entropy_coef=1e-3))


@dataclass
class IdentificationRun:
    config: IdentifyConfig
    metrics: list
    param_fn: ParamFunction
    discriminator: Discriminator
    stopped_early: bool = False
    aborted: bool = False


def _param_episode(traj: Trajectory, spec: EnvSpec, rewards: np.ndarray) -> EpisodeData:
    feats = np.array([state_features(spec, s) for s in traj.states[:-1]])
    # Step-cap truncations bootstrap from the final state (last action stands
    # in for the unsampled next one); genuine terminations forfeit all future
    # value, which is what lets a per-step bonus price episode endings.
    last = None
    if not traj.terminated:
        last = np.concatenate([state_features(spec, traj.states[-1]),
                               traj.actions[-1]])
    return EpisodeData(
        inputs=np.hstack([feats, traj.actions]),
        outputs=traj.extras["param_raw"],
        log_probs=traj.log_probs["param_fn"].copy(),
        rewards=rewards,
        last_input=last,
        terminated=traj.terminated,
    )


def identify(dataset: TargetDataset, policy, source_spec: EnvSpec,
             config: IdentifyConfig, rngs: dict, param_fn: ParamFunction | None = None,
             out_dir: str | None = None, callback=None) -> IdentificationRun:
    """Alternate discriminator and parameter-function training until the
    budget runs out or simulated tuples reach chance-level scores.

    The target dataset is frozen; only the hybrid source simulator is
    stepped. ``callback(iteration, info)`` receives per-iteration internals
    (trajectories, scores, bonus, rewards) for inspection."""
    if param_fn is None:
        param_fn = ParamFunction(source_spec, hidden=config.param_hidden,
                                 rng=rngs["param_fn"])
    explorer = behavior_policy(policy, dataset.noise_std)
    handle = EnvHandle(source_spec)
    target_tuples = dataset.tuples()
    l_R = dataset.mean_length

    disc = Discriminator(target_tuples.shape[1], hidden=config.disc_hidden,
                         rng=rngs["discriminator"], target_data=target_tuples)
    in_dim = len(source_spec.obs_scales) + source_spec.action_dim
    value_fn = ValueFunction(in_dim, hidden=config.value_hidden, rng=rngs["param_fn"],
                             input_scales=np.concatenate([
                                 np.asarray(source_spec.obs_scales, dtype=float),
                                 np.ones(source_spec.action_dim)]))
    trainer = PpoTrainer(param_fn, value_fn, config.ppo)

    metrics: list = []
    stopped_early = False
    aborted = False
    lo, hi = config.early_stop_band
    for it in range(config.iterations):
        snapshot = [p.copy() for p in param_fn.params()]
        trajs = [run_episode(handle, explorer, rngs["env"], rngs["policy"],
                             param_fn=param_fn, param_rng=rngs["param_fn"],
                             record_states=True)
                 for _ in range(config.episodes_per_iter)]
        l_i = mean_length(trajs)
        if l_i <= 0.0:
            raise ContractViolationError("all simulated episodes were empty")
        sim_tuples = tuples_matrix(trajs)

        disc_losses = train_discriminator(
            disc, target_tuples, sim_tuples, rngs["discriminator"],
            epochs=config.disc_epochs, minibatch=config.disc_minibatch,
            lr=config.disc_lr)

        # Sign: positive when sim episodes run short of l_R, opposing premature
        # termination; adding log(l_i / l_R) directly would amplify that bias.
        bonus = -alive_bonus(l_i, l_R) if config.use_alive_bonus else 0.0
        sim_scores = disc.score_batch(sim_tuples)
        rewards_flat = gan_reward(sim_scores) + bonus

        episodes, offset = [], 0
        for traj in trajs:
            T = len(traj)
            if T == 0:
                continue
            episodes.append(_param_episode(traj, source_spec,
                                           rewards_flat[offset:offset + T]))
            offset += T
        diag = trainer.update(RolloutBatch(episodes), rngs["param_fn"])

        if not all(np.all(np.isfinite(p)) for p in param_fn.params()):
            for p, s in zip(param_fn.params(), snapshot):
                p[...] = s
            aborted = True

        mean_sim_score = float(sim_scores.mean())
        row = {
            "iteration": it,
            "mean_sim_score": mean_sim_score,
            "mean_target_score": float(disc.score_batch(target_tuples).mean()),
            "disc_loss": disc_losses[-1],
            "sim_mean_length": l_i,
            "target_mean_length": l_R,
            "alive_bonus": bonus,
            "mean_reward": float(rewards_flat.mean()),
            "ppo_aborted": bool(diag.get("aborted", False)),
            "approx_kl": diag.get("approx_kl", float("nan")),
        }
        window = [m["mean_sim_score"] for m in metrics[-(config.early_stop_window - 1):]]
        window.append(mean_sim_score)
        row["score_moving_avg"] = float(np.mean(window))
        metrics.append(row)

        if callback is not None:
            callback(it, {"trajectories": trajs, "scores": sim_scores,
                          "bonus": bonus, "rewards": rewards_flat, "row": row})
        if aborted:
            break
        if (len(metrics) >= config.early_stop_window
                and lo <= row["score_moving_avg"] <= hi):
            stopped_early = True
            break

    run = IdentificationRun(config, metrics, param_fn, disc,
                            stopped_early=stopped_early, aborted=aborted)
    if out_dir is not None:
        write_run_dir(out_dir, run)
    return run


@dataclass
class RefineConfig:
    """Refinement defaults: half the standard policy learning rate, value
    function freshly initialized, stochastic parameter sampling on."""

    iterations: int = 60
    episodes_per_iter: int = 20
    stochastic_params: bool = True
    value_hidden: tuple = (64, 64)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(
        lr=1.5e-4, epochs=8, minibatch=256))


def refine_policy(param_fn, policy, source_spec: EnvSpec, reward_cfg,
                  config: RefineConfig, rngs: dict, env_factory=None,
                  callback=None):
    """Warm-start a copy of the behavior policy and PPO-train it inside
    the identified hybrid simulator with the task reward. Returns
    (refined policy, training history)."""
    refined = policy.copy()
    value_fn = ValueFunction(len(source_spec.obs_scales), hidden=config.value_hidden,
                             rng=rngs["policy"],
                             input_scales=np.asarray(source_spec.obs_scales, dtype=float))
    handle = EnvHandle(source_spec)
    history = train_policy(
        handle, refined, value_fn, reward_cfg,
        iterations=config.iterations, episodes_per_iter=config.episodes_per_iter,
        config=config.ppo, env_rng=rngs["env"], policy_rng=rngs["policy"],
        update_rng=rngs["policy"], param_fn=param_fn, param_rng=rngs["param_fn"],
        env_factory=env_factory, stochastic_params=config.stochastic_params,
        callback=callback)
    return refined, history


def _config_to_jsonable(cfg) -> dict:
    d = dataclasses.asdict(cfg)

    def fix(v):
        if isinstance(v, tuple):
            return list(v)
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        return v

    return {k: fix(v) for k, v in d.items()}


def write_metrics_csv(path: str, metrics: list) -> None:
    if not metrics:
        with open(path, "w", newline="") as fh:
            fh.write("")
        return
    keys: list = []
    for row in metrics:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, restval="")
        writer.writeheader()
        writer.writerows(metrics)


def write_run_dir(out_dir: str, run: IdentificationRun,
                  extra_config: dict | None = None) -> None:
    """Persist a self-describing run directory: config.json, metrics.csv,
    param_fn.json, discriminator.json."""
    os.makedirs(out_dir, exist_ok=True)
    config = _config_to_jsonable(run.config)
    if extra_config:
        config.update(extra_config)
    config["stopped_early"] = run.stopped_early
    config["aborted"] = run.aborted
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), run.metrics)
    with open(os.path.join(out_dir, "param_fn.json"), "w") as fh:
        json.dump(run.param_fn.to_dict(), fh, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "discriminator.json"), "w") as fh:
        json.dump(run.discriminator.to_dict(), fh, sort_keys=True)
        fh.write("\n")


@dataclass
class PipelineConfig:
    n_target_episodes: int = 200
    noise_std: float = 0.25
    outer_iterations: int = 1
    identify: IdentifyConfig = field(default_factory=IdentifyConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)


def run_pipeline(policy, source_spec: EnvSpec, target_handle: EnvHandle,
                 reward_cfg, config: PipelineConfig, rngs: dict,
                 out_dir: str | None = None):
    """Full loop: collect target data with the current policy, identify
    the simulator, refine the policy inside it. A second outer iteration
    (off by default) repeats with the refined policy as the new behavior
    policy, which recollects target data."""
    current = policy
    runs = []
    for outer in range(config.outer_iterations):
        dataset = collect_target_data(
            current, target_handle, config.n_target_episodes,
            rngs["env"], rngs["policy"], noise_std=config.noise_std)
        sub_dir = None if out_dir is None else os.path.join(out_dir, f"outer_{outer}")
        run = identify(dataset, current, source_spec, config.identify, rngs,
                       out_dir=sub_dir)
        current, history = refine_policy(run.param_fn, current, source_spec,
                                         reward_cfg, config.refine, rngs)
        runs.append((dataset, run, history))
    return current, runs
