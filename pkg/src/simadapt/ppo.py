"""Clipped-surrogate PPO with generalized advantage estimation.

The same trainer optimizes two kinds of agent: control policies (inputs
are observations, outputs are actions) and the simulation-parameter
function (inputs are state-action features, outputs are raw parameter
samples). An agent exposes dist_batch / log_prob_batch /
backward_from_dist / params; everything else here is agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError
from .nn import Adam, MlpNet, net_from_dict, net_to_dict
from .policy import batch_gaussian_log_prob
from .rollout import run_episode
from .trajectory import Trajectory


@dataclass
class PpoConfig:
    lr: float = 3e-4
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 10
    minibatch: int = 64
    entropy_coef: float = 0.0
    value_lr: float = 1e-3
    value_epochs: int = 10


@dataclass
class EpisodeData:
    """Flat per-episode arrays the trainer consumes.

    ``last_input`` is the agent input at the final (post-step) state,
    used to bootstrap the value at truncation; None forces a zero
    bootstrap, which is also applied when ``terminated`` is True.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    last_input: np.ndarray | None
    terminated: bool


@dataclass
class RolloutBatch:
    episodes: list = field(default_factory=list)

    def n_steps(self) -> int:
        return int(sum(len(e.rewards) for e in self.episodes))

    def mean_length(self) -> float:
        return float(np.mean([len(e.rewards) for e in self.episodes]))

    def mean_reward(self) -> float:
        return float(np.mean(np.concatenate([e.rewards for e in self.episodes])))

    def concat(self):
        X = np.vstack([e.inputs for e in self.episodes])
        out = np.vstack([e.outputs for e in self.episodes])
        lp = np.concatenate([e.log_probs for e in self.episodes])
        return X, out, lp


class ValueFunction:
    """MLP regressor for state (or state-action) values."""

    def __init__(self, in_dim: int, hidden=(64, 64), rng=None, input_scales=None):
        self.net = MlpNet([in_dim, *hidden, 1], rng=rng)
        self.input_scales = (np.ones(in_dim) if input_scales is None
                             else np.asarray(input_scales, dtype=float))
        self._opt: Adam | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        out = self.net.forward((X[None, :] if squeeze else X) / self.input_scales)
        return float(out[0, 0]) if squeeze else out[:, 0]

    def fit(self, X: np.ndarray, targets: np.ndarray, rng, epochs: int = 10,
            minibatch: int = 64, lr: float = 1e-3) -> float:
        if self._opt is None:
            self._opt = Adam(self.net.params(), lr=lr)
        self._opt.lr = lr
        n = X.shape[0]
        last = 0.0
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, minibatch):
                idx = order[start:start + minibatch]
                pred = self.net.forward(X[idx] / self.input_scales)[:, 0]
                err = pred - targets[idx]
                grads, _ = self.net.backward(err[:, None] / len(idx))
                self._opt.step(self.net.params(), grads)
                last = float(0.5 * np.mean(err**2))
        return last

    def to_dict(self) -> dict:
        return {"kind": "value_function", "net": net_to_dict(self.net),
                "input_scales": self.input_scales.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueFunction":
        vf = cls.__new__(cls)
        vf.net = net_from_dict(d["net"])
        vf.input_scales = np.asarray(d["input_scales"], dtype=float)
        vf._opt = None
        return vf


# -- advantage estimation --------------------------------------------------------


def gae_from_values(rewards: np.ndarray, values: np.ndarray, gamma: float,
                    lam: float) -> tuple[np.ndarray, np.ndarray]:
    """GAE for one episode. values has length T+1 (bootstrap already set)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = rewards.shape[0]
    if values.shape[0] != T + 1:
        raise ContractViolationError(f"need {T + 1} values for {T} rewards, got {values.shape[0]}")
    deltas = rewards + gamma * values[1:] - values[:-1]
    adv = np.empty(T)
    acc = 0.0
    for t in reversed(range(T)):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + values[:-1]


def compute_gae(batch: RolloutBatch, value_fn: ValueFunction | None, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and value targets for every step of the batch, in
    concatenation order. Terminal (or bootstrap-less) episodes end at
    value zero; truncated ones bootstrap from the value at last_input."""
    advs, rets = [], []
    for ep in batch.episodes:
        T = len(ep.rewards)
        if value_fn is None:
            values = np.zeros(T + 1)
        else:
            values = np.empty(T + 1)
            values[:T] = value_fn.predict(ep.inputs)
            if ep.terminated or ep.last_input is None:
                values[T] = 0.0
            else:
                values[T] = value_fn.predict(ep.last_input)
        a, r = gae_from_values(ep.rewards, values, gamma, lam)
        advs.append(a)
        rets.append(r)
    return np.concatenate(advs), np.concatenate(rets)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


# -- surrogate objective ----------------------------------------------------------


def surrogate_loss_and_grads(agent, X: np.ndarray, outputs: np.ndarray,
                             old_lp: np.ndarray, advs: np.ndarray, clip: float,
                             entropy_coef: float = 0.0):
    """Clipped PPO surrogate (to minimize) and its gradients.

    Returns (loss, grads, stats). The minimized loss is
    -mean(min(ratio*A, clip(ratio)*A)) - entropy_coef * mean(entropy).
    """
    n = X.shape[0]
    mu, ls = agent.dist_batch(X)
    lp = batch_gaussian_log_prob(mu, ls, outputs)
    ratio = np.exp(lp - old_lp)
    clipped_ratio = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped = ratio * advs
    clipped = clipped_ratio * advs
    surr = np.minimum(unclipped, clipped)
    entropy = np.sum(ls, axis=1) + 0.5 * ls.shape[1] * (1.0 + np.log(2 * np.pi))
    loss = float(-np.mean(surr) - entropy_coef * np.mean(entropy))

    # d surr / d log-prob: the ratio branch carries gradient, the
    # saturated clip branch contributes zero.
    use_unclipped = unclipped <= clipped
    d_lp = np.where(use_unclipped, ratio * advs, 0.0)
    d_lp = -d_lp / n
    sigma2 = np.exp(2.0 * ls)
    diff = outputs - mu
    d_mu = d_lp[:, None] * diff / sigma2
    d_ls = d_lp[:, None] * (diff**2 / sigma2 - 1.0)
    d_ls -= entropy_coef / n
    grads = agent.backward_from_dist(d_mu, d_ls)
    stats = {
        "mean_ratio": float(ratio.mean()),
        "clip_fraction": float(np.mean(~use_unclipped)),
        "approx_kl": float(np.mean(old_lp - lp)),
        "entropy": float(entropy.mean()),
    }
    return loss, grads, stats


class PpoTrainer:
    """Owns the agent and value optimizers; applies clipped updates."""

    def __init__(self, agent, value_fn: ValueFunction | None, config: PpoConfig):
        self.agent = agent
        self.value_fn = value_fn
        self.config = config
        self.opt = Adam(agent.params(), lr=config.lr)

    def update(self, batch: RolloutBatch, rng) -> dict:
        cfg = self.config
        X, outputs, old_lp = batch.concat()
        advs, returns = compute_gae(batch, self.value_fn, cfg.gamma, cfg.lam)
        diag = {
            "mean_reward": batch.mean_reward(),
            "mean_length": batch.mean_length(),
            "n_steps": batch.n_steps(),
            "aborted": False,
        }
        if not np.all(np.isfinite(advs)):
            diag["aborted"] = True
            return diag
        advs = normalize_advantages(advs)

        saved = [p.copy() for p in self.agent.params()]
        saved_opt = (self.opt.t, [m.copy() for m in self.opt.m], [v.copy() for v in self.opt.v])
        n = X.shape[0]
        stats = {}
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                idx = order[start:start + cfg.minibatch]
                loss, grads, stats = surrogate_loss_and_grads(
                    self.agent, X[idx], outputs[idx], old_lp[idx], advs[idx],
                    cfg.clip, cfg.entropy_coef,
                )
                if not (np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads)):
                    params = self.agent.params()
                    for p, s in zip(params, saved):
                        p[...] = s
                    self.opt.t, self.opt.m, self.opt.v = saved_opt
                    diag["aborted"] = True
                    return diag
                self.opt.step(self.agent.params(), grads)
        if self.value_fn is not None:
            diag["value_loss"] = self.value_fn.fit(
                X, returns, rng, epochs=cfg.value_epochs,
                minibatch=cfg.minibatch, lr=cfg.value_lr,
            )
        diag.update(stats)
        return diag


# -- rollout collection for policy training ------------------------------------------


def episode_from_trajectory(traj: Trajectory) -> EpisodeData:
    T = len(traj)
    return EpisodeData(
        inputs=traj.obs[:T],
        outputs=traj.actions,
        log_probs=traj.log_probs["policy"].copy(),
        rewards=traj.rewards.copy() if traj.rewards is not None else np.zeros(T),
        last_input=traj.obs[T],
        terminated=traj.terminated,
    )


def collect_policy_batch(handle, policy, n_episodes: int, env_rng, policy_rng,
                         reward_cfg, param_fn=None, param_rng=None,
                         stochastic_params: bool = True, env_factory=None,
                         record_states: bool = False):
    """Run episodes and pack them for the trainer. ``env_factory``, when
    given, supplies a fresh (handle, param_fn) per episode (domain
    randomization); otherwise the fixed pair is used for all episodes."""
    trajectories, episodes = [], []
    for _ in range(n_episodes):
        h, pf = (handle, param_fn) if env_factory is None else env_factory()
        traj = run_episode(h, policy, env_rng, policy_rng, param_fn=pf,
                           param_rng=param_rng, reward_cfg=reward_cfg,
                           stochastic_params=stochastic_params,
                           record_states=record_states)
        trajectories.append(traj)
        if len(traj) > 0:
            episodes.append(episode_from_trajectory(traj))
    return trajectories, RolloutBatch(episodes)


def train_policy(handle, policy, value_fn, reward_cfg, iterations: int,
                 episodes_per_iter: int, config: PpoConfig, env_rng, policy_rng,
                 update_rng, param_fn=None, param_rng=None, env_factory=None,
                 stochastic_params: bool = True, callback=None) -> list[dict]:
    """Iterate collect-update; returns per-iteration diagnostics."""
    trainer = PpoTrainer(policy, value_fn, config)
    history = []
    for it in range(iterations):
        _, batch = collect_policy_batch(
            handle, policy, episodes_per_iter, env_rng, policy_rng, reward_cfg,
            param_fn=param_fn, param_rng=param_rng, env_factory=env_factory,
            stochastic_params=stochastic_params,
        )
        diag = trainer.update(batch, update_rng)
        diag["iteration"] = it
        history.append(diag)
        if callback is not None:
            callback(it, diag)
    return history
