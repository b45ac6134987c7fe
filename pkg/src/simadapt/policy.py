"""Gaussian control policies.

``GaussianPolicy`` is the trainable object: an MLP mean with a single
learned log-std vector shared across states. ``FixedNoisePolicy`` wraps
any mean function (a trained policy or a hand-written script) in a
fixed-std Gaussian; it is how the behavior policy is rolled out, with
the same exploration noise in the target domain and in the simulator.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError
from .nn import (
    LOG_2PI,
    GaussianHead,
    MlpNet,
    clamp_log_sigma,
    net_from_dict,
    net_to_dict,
)


def batch_gaussian_log_prob(mu: np.ndarray, log_sigma: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise diagonal-Gaussian log-density; all inputs (N, d)."""
    zs = (x - mu) / np.exp(log_sigma)
    return -0.5 * np.sum(zs**2, axis=1) - np.sum(log_sigma, axis=1) - 0.5 * LOG_2PI * x.shape[1]


class GaussianPolicy:
    """MLP mean + global log-std vector over unbounded actions.

    The environment saturates commands itself, so the policy's output
    space is all of R^da and log-densities stay exact.
    """

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64), rng=None,
                 init_log_sigma: float = -0.5, input_scales=None):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.net = MlpNet([obs_dim, *hidden, action_dim], rng=rng, init_output_scale=0.1)
        self.log_sigma = np.full(action_dim, float(init_log_sigma))
        self.input_scales = (np.ones(obs_dim) if input_scales is None
                             else np.asarray(input_scales, dtype=float))

    # -- single-sample interface -------------------------------------------

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return self.net.forward(np.asarray(obs, dtype=float) / self.input_scales)

    def head(self, obs: np.ndarray) -> GaussianHead:
        return GaussianHead(self.mean_action(obs), self.log_sigma)

    def act(self, obs: np.ndarray, rng, deterministic: bool = False):
        head = self.head(obs)
        if deterministic:
            return head.mu.copy(), head.log_prob(head.mu)
        return head.sample(rng)

    def log_prob(self, obs: np.ndarray, action: np.ndarray) -> float:
        return self.head(obs).log_prob(action)

    # -- batch interface for PPO ---------------------------------------------

    def dist_batch(self, obs: np.ndarray):
        mu = self.net.forward(np.asarray(obs, dtype=float) / self.input_scales)
        ls = np.broadcast_to(clamp_log_sigma(self.log_sigma), mu.shape)
        return mu, ls

    def log_prob_batch(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mu, ls = self.dist_batch(obs)
        return batch_gaussian_log_prob(mu, ls, actions)

    def backward_from_dist(self, d_mu: np.ndarray, d_log_sigma: np.ndarray):
        """Gradients for the most recent dist_batch call.

        d_mu and d_log_sigma are d(loss)/d(outputs), shape (N, da).
        Returns grads aligned with params(); the shared log-std gradient
        sums over the batch.
        """
        net_grads, _ = self.net.backward(d_mu)
        mask = ((self.log_sigma > -5.0) & (self.log_sigma < 2.0)).astype(float)
        return net_grads + [d_log_sigma.sum(axis=0) * mask]

    def params(self):
        return self.net.params() + [self.log_sigma]

    def copy(self) -> "GaussianPolicy":
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.obs_dim = self.obs_dim
        other.action_dim = self.action_dim
        other.net = self.net.copy()
        other.log_sigma = self.log_sigma.copy()
        other.input_scales = self.input_scales.copy()
        return other

    def load_weights_from(self, other: "GaussianPolicy") -> None:
        if other.net.layer_sizes != self.net.layer_sizes:
            raise ContractViolationError("policy architectures differ")
        self.net = other.net.copy()
        self.log_sigma = other.log_sigma.copy()

    def to_dict(self) -> dict:
        return {
            "kind": "gaussian_policy",
            "net": net_to_dict(self.net),
            "log_sigma": self.log_sigma.tolist(),
            "input_scales": self.input_scales.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPolicy":
        net = net_from_dict(d["net"])
        policy = cls.__new__(cls)
        policy.net = net
        policy.obs_dim = net.layer_sizes[0]
        policy.action_dim = net.layer_sizes[-1]
        policy.log_sigma = np.asarray(d["log_sigma"], dtype=float)
        policy.input_scales = np.asarray(d["input_scales"], dtype=float)
        return policy


class FixedNoisePolicy:
    """Gaussian with a fixed std around an arbitrary mean function.

    This is the exploration protocol for behavior data: mean action plus
    N(0, noise_std) noise, identical wherever the policy is rolled out.
    """

    def __init__(self, mean_fn, action_dim: int, noise_std: float = 0.25):
        if noise_std < 0:
            raise ContractViolationError("noise_std must be nonnegative")
        self.mean_fn = mean_fn
        self.action_dim = action_dim
        self.noise_std = float(noise_std)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(self.mean_fn(obs), dtype=float).reshape(self.action_dim)

    def head(self, obs: np.ndarray) -> GaussianHead:
        mu = self.mean_action(obs)
        sigma = max(self.noise_std, 1e-8)
        return GaussianHead(mu, np.full(self.action_dim, np.log(sigma)))

    def act(self, obs: np.ndarray, rng, deterministic: bool = False):
        head = self.head(obs)
        if deterministic or self.noise_std == 0.0:
            return head.mu.copy(), head.log_prob(head.mu)
        return head.sample(rng)

    def log_prob(self, obs: np.ndarray, action: np.ndarray) -> float:
        return self.head(obs).log_prob(action)


def behavior_policy(policy: GaussianPolicy, noise_std: float = 0.25) -> FixedNoisePolicy:
    return FixedNoisePolicy(policy.mean_action, policy.action_dim, noise_std)


def scripted_policy(fn, action_dim: int, noise_std: float = 0.25) -> FixedNoisePolicy:
    return FixedNoisePolicy(fn, action_dim, noise_std)
