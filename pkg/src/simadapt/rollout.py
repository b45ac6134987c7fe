"""Episode execution shared by data collection, identification, and training.

One loop serves every consumer: plain environment rollouts (param_fn
None), hybrid-simulator rollouts (param_fn set), with or without task
reward, with or without full generative bookkeeping. Randomness is split
across caller-owned streams: env_rng drives initial state, torque noise,
and observation noise; policy_rng drives action sampling; param_rng
drives parameter sampling. The env stream is consumed identically
whether or not draws are recorded, so recording never changes a rollout.
"""

from __future__ import annotations

import numpy as np

from .envs import EnvHandle, is_terminal, is_unhealthy, state_features, task_reward
from .errors import SimulationDivergedError
from .nn import standard_normal_log_prob
from .trajectory import Trajectory


def run_episode(handle: EnvHandle, policy, env_rng, policy_rng, *,
                param_fn=None, param_rng=None, reward_cfg=None,
                deterministic_policy: bool = False, stochastic_params: bool = True,
                max_steps: int | None = None, record_states: bool = True) -> Trajectory:
    spec = handle.spec
    step_cap = spec.max_steps if max_steps is None else min(spec.max_steps, max_steps)

    state, init_z = handle.reset(env_rng)
    std = np.asarray(spec.init_noise_std, dtype=float)
    initial_log_prob = standard_normal_log_prob(init_z[std > 0.0])

    def observed(s):
        if handle.obs_noise:
            z = env_rng.standard_normal(spec.obs_dim)
            return handle.observe(s, env_rng, noise_z=z), z
        return handle.observe(s, env_rng), None

    obs, z0 = observed(state)
    obs_rows = [obs]
    obs_z = [z0] if z0 is not None else None
    obs_lp = [standard_normal_log_prob(z0)] if z0 is not None else None
    states = [state.copy()] if record_states else None
    actions, rewards = [], []
    policy_lp, param_lp, dyn_lp = [], [], []
    param_rows, raw_rows, dyn_z_rows = [], [], []
    terminated = False

    while state.t < step_cap and not is_terminal(spec, state):
        action, lp = policy.act(obs, policy_rng, deterministic=deterministic_policy)
        params_dict = None
        if param_fn is not None:
            params, raw, plp = param_fn.sample(
                state_features(spec, state), action, param_rng, stochastic_params
            )
            params_dict = params.as_dict()
            param_rows.append(params.values)
            raw_rows.append(raw)
            param_lp.append(plp)
        dyn_z = env_rng.standard_normal(spec.action_dim) if handle.torque_noise else None
        try:
            next_state = handle.step(state, action, env_rng, params=params_dict,
                                     noise_z=dyn_z)
        except SimulationDivergedError:
            if param_fn is not None:
                param_rows.pop(), raw_rows.pop(), param_lp.pop()
            terminated = True
            break
        next_obs, z = observed(next_state)

        actions.append(np.asarray(action, dtype=float))
        policy_lp.append(lp)
        if dyn_z is not None:
            dyn_z_rows.append(dyn_z)
            dyn_lp.append(standard_normal_log_prob(dyn_z))
        if obs_z is not None:
            obs_z.append(z)
            obs_lp.append(standard_normal_log_prob(z))
        obs_rows.append(next_obs)
        if record_states:
            states.append(next_state.copy())
        if reward_cfg is not None:
            rewards.append(task_reward(reward_cfg, spec, state, action, next_state))

        state, obs = next_state, next_obs
        if is_unhealthy(spec, state):
            terminated = True
            break

    T = len(actions)
    log_probs = {"policy": np.array(policy_lp)}
    if param_fn is not None:
        log_probs["param_fn"] = np.array(param_lp)
    if handle.torque_noise:
        log_probs["dyn_noise"] = np.array(dyn_lp)
    if obs_lp is not None:
        log_probs["obs_noise"] = np.array(obs_lp[:T + 1])

    extras = {"init_z": init_z}
    if obs_z is not None:
        extras["obs_z"] = np.array(obs_z[:T + 1])
    if dyn_z_rows:
        extras["dyn_z"] = np.array(dyn_z_rows)
    if param_fn is not None and T > 0:
        extras["param_raw"] = np.array(raw_rows)

    traj = Trajectory(
        obs=np.array(obs_rows[:T + 1]),
        actions=np.array(actions).reshape(T, spec.action_dim),
        rewards=np.array(rewards) if reward_cfg is not None else None,
        terminated=terminated,
        states=states[:T + 1] if record_states else None,
        sampled_params=np.array(param_rows) if (param_fn is not None and T > 0) else None,
        log_probs={k: v[:T + 1] if k == "obs_noise" else v[:T]
                   for k, v in log_probs.items()},
        initial_log_prob=initial_log_prob,
        extras=extras,
    )
    return traj


def run_episodes(handle: EnvHandle, policy, n: int, env_rng, policy_rng,
                 **kwargs) -> list[Trajectory]:
    return [run_episode(handle, policy, env_rng, policy_rng, **kwargs) for _ in range(n)]


def evaluate_policy(handle: EnvHandle, policy, reward_cfg, n_episodes: int, seed: int,
                    deterministic: bool = True) -> dict:
    """Mean/std of undiscounted task return and episode length."""
    env_rng = np.random.default_rng([seed, 101])
    policy_rng = np.random.default_rng([seed, 202])
    returns, lengths = [], []
    for _ in range(n_episodes):
        traj = run_episode(handle, policy, env_rng, policy_rng,
                           reward_cfg=reward_cfg, deterministic_policy=deterministic,
                           record_states=False)
        returns.append(traj.total_reward())
        lengths.append(len(traj))
    return {
        "mean_return": float(np.mean(returns)),
        "std_return": float(np.std(returns)),
        "mean_length": float(np.mean(lengths)),
        "returns": returns,
    }
