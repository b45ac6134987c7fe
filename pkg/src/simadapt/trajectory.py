"""Trajectory container and JSON-Lines persistence.

A trajectory holds T transitions: observations o_0..o_T, actions
a_0..a_{T-1}, and optionally rewards, privileged states, per-step
sampled simulator parameters, and the log-density of every stochastic
factor that produced it (initial state, policy, parameter function,
dynamics noise, observation noise). Files are one JSON object per line:
a header carrying the schema version and dimensions, then one line per
transition. Serialization is canonical (sorted keys, no timestamps) so
identical data produces byte-identical files.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .envs import EnvState
from .errors import ConfigurationError, ContractViolationError

SCHEMA_VERSION = "1.0"


@dataclass
class Trajectory:
    """One episode. obs has T+1 rows, actions has T rows."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None = None
    terminated: bool = False
    states: list | None = None
    sampled_params: np.ndarray | None = None
    log_probs: dict = field(default_factory=dict)
    initial_log_prob: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.obs.shape[0] != self.actions.shape[0] + 1:
            raise ContractViolationError(
                f"{self.obs.shape[0]} observations for {self.actions.shape[0]} actions"
            )
        if self.rewards is not None:
            self.rewards = np.asarray(self.rewards, dtype=float)
            if self.rewards.shape[0] != len(self):
                raise ContractViolationError("rewards length does not match actions")

    def __len__(self) -> int:
        return self.actions.shape[0]

    def total_reward(self) -> float:
        if self.rewards is None:
            raise ContractViolationError("trajectory has no recorded rewards")
        return float(np.sum(self.rewards))


@dataclass(frozen=True)
class TransitionTuple:
    """The (o, a, o') triplet the discriminator classifies."""

    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.obs, self.action, self.next_obs])


def tuples_matrix(trajectories: list[Trajectory]) -> np.ndarray:
    """Stack every (o, a, o') of every trajectory into an (N, 2*d+da) matrix."""
    rows = []
    for traj in trajectories:
        if len(traj) == 0:
            continue
        rows.append(np.hstack([traj.obs[:-1], traj.actions, traj.obs[1:]]))
    if not rows:
        raise ContractViolationError("no transitions available")
    return np.vstack(rows)


def mean_length(trajectories: list[Trajectory]) -> float:
    if not trajectories:
        raise ContractViolationError("empty trajectory list")
    return float(np.mean([len(t) for t in trajectories]))


# -- persistence ---------------------------------------------------------------


def _round_trip_floats(values) -> list:
    return np.asarray(values, dtype=float).tolist()


def write_trajectories(path, trajectories: list[Trajectory], env_name: str,
                       meta: dict | None = None) -> None:
    if not trajectories:
        raise ContractViolationError("refusing to write an empty trajectory file")
    obs_dim = trajectories[0].obs.shape[1]
    action_dim = trajectories[0].actions.shape[1]
    header = {
        "schema": SCHEMA_VERSION,
        "kind": "trajectories",
        "env": env_name,
        "obs_dim": int(obs_dim),
        "action_dim": int(action_dim),
        "n_episodes": len(trajectories),
        "meta": meta or {},
    }
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ep, traj in enumerate(trajectories):
            if traj.obs.shape[1] != obs_dim or traj.actions.shape[1] != action_dim:
                raise ContractViolationError("mixed dimensions across trajectories")
            for t in range(len(traj)):
                row = {
                    "episode_id": ep,
                    "t": t,
                    "obs": _round_trip_floats(traj.obs[t]),
                    "action": _round_trip_floats(traj.actions[t]),
                    "next_obs": _round_trip_floats(traj.obs[t + 1]),
                    "done": bool(traj.terminated and t == len(traj) - 1),
                }
                if traj.rewards is not None:
                    row["reward"] = float(traj.rewards[t])
                if traj.states is not None:
                    s = traj.states[t]
                    row["state"] = {"q": _round_trip_floats(s.q),
                                    "qdot": _round_trip_floats(s.qdot)}
                    if t == len(traj) - 1:
                        s_last = traj.states[t + 1]
                        row["next_state"] = {"q": _round_trip_floats(s_last.q),
                                             "qdot": _round_trip_floats(s_last.qdot)}
                if traj.sampled_params is not None:
                    row["sampled_params"] = _round_trip_floats(traj.sampled_params[t])
                lp = {}
                for key, arr in traj.log_probs.items():
                    if key == "obs_noise":
                        lp[key] = float(arr[t + 1])
                        if t == 0:
                            lp["obs_noise_first"] = float(arr[0])
                    else:
                        lp[key] = float(arr[t])
                if t == 0 and traj.initial_log_prob != 0.0:
                    lp["initial"] = float(traj.initial_log_prob)
                if lp:
                    row["log_probs"] = lp
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_trajectories(path) -> tuple[list[Trajectory], dict]:
    with open(path) as fh:
        header_line = fh.readline()
        if not header_line:
            raise ConfigurationError(f"{path}: empty trajectory file")
        header = json.loads(header_line)
        schema = str(header.get("schema", ""))
        major = schema.split(".", 1)[0]
        if major != SCHEMA_VERSION.split(".", 1)[0]:
            raise ConfigurationError(
                f"{path}: unsupported trajectory schema {schema!r}; this reader handles 1.x"
            )
        episodes: dict[int, list[dict]] = {}
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            episodes.setdefault(int(row["episode_id"]), []).append(row)

    trajectories = []
    for ep in sorted(episodes):
        rows = sorted(episodes[ep], key=lambda r: r["t"])
        for i, row in enumerate(rows):
            if row["t"] != i:
                raise ConfigurationError(f"{path}: episode {ep} has non-contiguous steps")
        obs = np.array([r["obs"] for r in rows] + [rows[-1]["next_obs"]])
        actions = np.array([r["action"] for r in rows])
        if obs.shape[1] != header["obs_dim"] or actions.shape[1] != header["action_dim"]:
            raise ConfigurationError(f"{path}: episode {ep} dimensions disagree with header")
        rewards = None
        if "reward" in rows[0]:
            rewards = np.array([r["reward"] for r in rows])
        states = None
        if "state" in rows[0]:
            states = [EnvState(np.array(r["state"]["q"]), np.array(r["state"]["qdot"]), t=i)
                      for i, r in enumerate(rows)]
            last = rows[-1]["next_state"]
            states.append(EnvState(np.array(last["q"]), np.array(last["qdot"]), t=len(rows)))
        params = None
        if "sampled_params" in rows[0]:
            params = np.array([r["sampled_params"] for r in rows])
        log_probs: dict[str, np.ndarray] = {}
        initial_lp = 0.0
        if "log_probs" in rows[0]:
            keys = [k for k in rows[0]["log_probs"]
                    if k not in ("initial", "obs_noise_first")]
            initial_lp = float(rows[0]["log_probs"].get("initial", 0.0))
            for key in keys:
                vals = [r["log_probs"][key] for r in rows]
                if key == "obs_noise":
                    vals = [rows[0]["log_probs"]["obs_noise_first"]] + vals
                log_probs[key] = np.array(vals)
        trajectories.append(Trajectory(
            obs=obs, actions=actions, rewards=rewards,
            terminated=bool(rows[-1]["done"]), states=states,
            sampled_params=params, log_probs=log_probs,
            initial_log_prob=initial_lp,
        ))
    return trajectories, header
