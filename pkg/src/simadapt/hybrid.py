"""Hybrid simulator: analytic stepper plus a learned parameter function.

The parameter function f maps (state features, action) to a diagonal
Gaussian over raw parameter coordinates through two MLP branches, one
for contact parameters and one for actuator scales. A raw sample is
squashed into each parameter's physical range by an affine sigmoid, so
every emitted value is valid by construction. The log-density PPO needs
is the pre-squash Gaussian one; the squash is treated as part of the
simulator.

``trajectory_log_prob`` evaluates the full generative density of a
recorded rollout: initial-state draws, policy actions, parameter-function
samples, dynamics (torque) noise, and observation noise. Sampled
standard normals contribute their N(0,1) log-density; deterministic
factors contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import EnvSpec, EnvState, NO_GAP, env_step, state_features
from .errors import ContractViolationError
from .nn import (
    GaussianHead,
    MlpNet,
    clamp_log_sigma,
    gaussian_log_prob,
    net_from_dict,
    net_to_dict,
    standard_normal_log_prob,
)
from .policy import batch_gaussian_log_prob
from .trajectory import Trajectory

LOG_SIGMA_OFFSET = -1.0


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class SimParamVector:
    """Squashed per-step simulator parameters in declared layout order."""

    names: tuple
    values: np.ndarray

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])


class ParamFunction:
    """Stochastic map (state features, action) -> simulator parameters.

    Two branches (contact, actuator) each output means and log-stds for
    their parameter group. Branch outputs concatenate in spec layout
    order: contact parameters first, then actuator scales. The output
    bias is set so the initial mean squashes to the spec's nominal
    constants: identification starts at the calibrated simulator rather
    than at an arbitrary point of the parameter box.
    """

    def __init__(self, spec: EnvSpec, hidden=(32, 32), rng=None,
                 log_sigma_offset: float = LOG_SIGMA_OFFSET):
        self.env_name = spec.name
        self.contact_names = tuple(spec.contact_params)
        self.actuator_names = tuple(spec.actuator_params)
        self.names = self.contact_names + self.actuator_names
        if not self.names:
            raise ContractViolationError(f"{spec.name} declares no learnable parameters")
        self.ranges = np.array([spec.param_ranges[n] for n in self.names])
        self.in_dim = spec.obs_dim + spec.action_dim
        self.input_scales = np.concatenate([np.asarray(spec.obs_scales, dtype=float),
                                            np.ones(spec.action_dim)])
        self.log_sigma_offset = float(log_sigma_offset)
        self.hidden = tuple(hidden)
        self.branches = {}
        for group, names in (("contact", self.contact_names),
                             ("actuator", self.actuator_names)):
            if names:
                net = MlpNet(
                    [self.in_dim, *hidden, 2 * len(names)], rng=rng, init_output_scale=0.1
                )
                lo = np.array([spec.param_ranges[n][0] for n in names])
                hi = np.array([spec.param_ranges[n][1] for n in names])
                nominal = np.array([spec.param_nominal[n] for n in names])
                frac = np.clip((nominal - lo) / (hi - lo), 1e-4, 1.0 - 1e-4)
                net.biases[-1][: len(names)] = np.log(frac / (1.0 - frac))
                self.branches[group] = net

    # -- distribution -----------------------------------------------------------

    def _features(self, state_feats, action):
        x = np.concatenate([np.asarray(state_feats, dtype=float),
                            np.asarray(action, dtype=float)])
        if x.shape != (self.in_dim,):
            raise ContractViolationError(f"input shape {x.shape}, expected ({self.in_dim},)")
        return x / self.input_scales

    def dist(self, state_feats: np.ndarray, action: np.ndarray) -> GaussianHead:
        x = self._features(state_feats, action)
        mus, log_sigmas = [], []
        for group, names in (("contact", self.contact_names),
                             ("actuator", self.actuator_names)):
            if not names:
                continue
            out = self.branches[group].forward(x)
            k = len(names)
            mus.append(out[:k])
            log_sigmas.append(out[k:] + self.log_sigma_offset)
        return GaussianHead(np.concatenate(mus), np.concatenate(log_sigmas))

    def squash(self, raw: np.ndarray) -> np.ndarray:
        lo, hi = self.ranges[:, 0], self.ranges[:, 1]
        return lo + (hi - lo) * _sigmoid(np.asarray(raw, dtype=float))

    def sample(self, state_feats, action, rng, stochastic: bool = True):
        """Returns (SimParamVector, raw pre-squash vector, log_prob)."""
        head = self.dist(state_feats, action)
        if stochastic:
            raw, log_prob = head.sample(rng)
        else:
            raw, log_prob = head.mu.copy(), 0.0
        return SimParamVector(self.names, self.squash(raw)), raw, log_prob

    def mean_param_dict(self, state_feats, action) -> dict:
        head = self.dist(state_feats, action)
        return SimParamVector(self.names, self.squash(head.mu)).as_dict()

    def log_prob(self, state_feats, action, raw: np.ndarray) -> float:
        return self.dist(state_feats, action).log_prob(raw)

    # -- batch interface for PPO ----------------------------------------------

    def dist_batch(self, inputs: np.ndarray):
        """inputs rows are concat(state features, action), unnormalized."""
        X = np.asarray(inputs, dtype=float) / self.input_scales
        mus, log_sigmas = [], []
        self._last_raw_ls = {}
        for group, names in (("contact", self.contact_names),
                             ("actuator", self.actuator_names)):
            if not names:
                continue
            out = self.branches[group].forward(X)
            k = len(names)
            mus.append(out[:, :k])
            raw_ls = out[:, k:] + self.log_sigma_offset
            self._last_raw_ls[group] = raw_ls
            log_sigmas.append(clamp_log_sigma(raw_ls))
        return np.hstack(mus), np.hstack(log_sigmas)

    def log_prob_batch(self, inputs: np.ndarray, raws: np.ndarray) -> np.ndarray:
        mu, ls = self.dist_batch(inputs)
        return batch_gaussian_log_prob(mu, ls, raws)

    def backward_from_dist(self, d_mu: np.ndarray, d_log_sigma: np.ndarray):
        grads = []
        col = 0
        for group, names in (("contact", self.contact_names),
                             ("actuator", self.actuator_names)):
            if not names:
                continue
            k = len(names)
            raw_ls = self._last_raw_ls[group]
            mask = ((raw_ls > -5.0) & (raw_ls < 2.0)).astype(float)
            d_out = np.hstack([d_mu[:, col:col + k], d_log_sigma[:, col:col + k] * mask])
            branch_grads, _ = self.branches[group].backward(d_out)
            grads.extend(branch_grads)
            col += k
        return grads

    def params(self):
        out = []
        for group in ("contact", "actuator"):
            if group in self.branches:
                out.extend(self.branches[group].params())
        return out

    def copy(self) -> "ParamFunction":
        other = ParamFunction.__new__(ParamFunction)
        other.__dict__.update({k: v for k, v in self.__dict__.items() if k != "branches"})
        other.branches = {g: net.copy() for g, net in self.branches.items()}
        return other

    def to_dict(self) -> dict:
        return {
            "kind": "param_function",
            "env": self.env_name,
            "contact_names": list(self.contact_names),
            "actuator_names": list(self.actuator_names),
            "ranges": self.ranges.tolist(),
            "in_dim": self.in_dim,
            "input_scales": self.input_scales.tolist(),
            "log_sigma_offset": self.log_sigma_offset,
            "hidden": list(self.hidden),
            "branches": {g: net_to_dict(net) for g, net in self.branches.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamFunction":
        f = cls.__new__(cls)
        f.env_name = d["env"]
        f.contact_names = tuple(d["contact_names"])
        f.actuator_names = tuple(d["actuator_names"])
        f.names = f.contact_names + f.actuator_names
        f.ranges = np.asarray(d["ranges"], dtype=float)
        f.in_dim = int(d["in_dim"])
        f.input_scales = np.asarray(d["input_scales"], dtype=float)
        f.log_sigma_offset = float(d["log_sigma_offset"])
        f.hidden = tuple(d["hidden"])
        f.branches = {g: net_from_dict(nd) for g, nd in d["branches"].items()}
        return f


def pinned_param_function(spec: EnvSpec, values: dict) -> "PinnedParams":
    return PinnedParams(spec, values)


class PinnedParams:
    """A degenerate parameter function emitting fixed values. Test double
    for equivalence oracles; log_prob is 0 (deterministic factor)."""

    def __init__(self, spec: EnvSpec, values: dict | None = None):
        self.names = tuple(spec.contact_params) + tuple(spec.actuator_params)
        if values is None:
            values = spec.param_nominal
        missing = [n for n in self.names if n not in values]
        if missing:
            raise ContractViolationError(f"pinned values missing {missing}")
        self.values = np.array([float(values[n]) for n in self.names])

    def sample(self, state_feats, action, rng, stochastic: bool = True):
        return SimParamVector(self.names, self.values.copy()), self.values.copy(), 0.0


def mean_params_over(f: ParamFunction, inputs: np.ndarray) -> dict:
    """Mean squashed parameter means over (features, action) rows."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    mu, _ = f.dist_batch(inputs)
    squashed = f.squash(mu)
    return {name: float(squashed[:, i].mean()) for i, name in enumerate(f.names)}


def param_eval(f, state: EnvState, action: np.ndarray, spec: EnvSpec, rng,
               stochastic: bool = True):
    """Evaluate f at a full (noise-free) state. Returns (SimParamVector, log_prob)."""
    params, _, log_prob = f.sample(state_features(spec, state), action, rng, stochastic)
    return params, log_prob


def hybrid_step(spec: EnvSpec, f, state: EnvState, action: np.ndarray,
                env_rng, param_rng, stochastic: bool = True,
                torque_noise: bool = True):
    """Sample parameters from f, then step the analytic simulator with them."""
    params, log_prob = param_eval(f, state, action, spec, param_rng, stochastic)
    next_state = env_step(spec, NO_GAP, state, action, env_rng,
                          params=params.as_dict(), torque_noise=torque_noise)
    return next_state, params, log_prob


# -- trajectory probability ----------------------------------------------------


@dataclass
class TrajectoryLogProb:
    total: float
    factors: dict


def trajectory_log_prob(traj: Trajectory, policy, f, spec: EnvSpec) -> TrajectoryLogProb:
    """Eq.-style factorization of a recorded rollout's log-density.

    Requires the rollout to have retained full intermediates: states,
    pre-squash parameter samples, and the standard-normal draws behind
    initial state, torque noise, and observation noise. Deterministic
    factors (absent draws, pinned parameters) contribute zero.
    """
    factors = {"initial": 0.0, "policy": 0.0, "param_fn": 0.0,
               "dyn_noise": 0.0, "obs_noise": 0.0}
    T = len(traj)

    init_z = traj.extras.get("init_z")
    if init_z is not None:
        std = np.asarray(spec.init_noise_std, dtype=float)
        active = std > 0
        factors["initial"] = standard_normal_log_prob(np.asarray(init_z)[active])

    if T > 0:
        if policy is not None:
            factors["policy"] = float(sum(
                policy.log_prob(traj.obs[t], traj.actions[t]) for t in range(T)
            ))
        if f is not None and not isinstance(f, PinnedParams):
            if traj.states is None or "param_raw" not in traj.extras:
                raise ContractViolationError(
                    "trajectory lacks states or raw parameter samples for the f factor"
                )
            raws = traj.extras["param_raw"]
            factors["param_fn"] = float(sum(
                f.log_prob(state_features(spec, traj.states[t]), traj.actions[t], raws[t])
                for t in range(T)
            ))
        dyn_z = traj.extras.get("dyn_z")
        if dyn_z is not None:
            factors["dyn_noise"] = standard_normal_log_prob(np.asarray(dyn_z))
        obs_z = traj.extras.get("obs_z")
        if obs_z is not None:
            factors["obs_noise"] = standard_normal_log_prob(np.asarray(obs_z))

    total = float(sum(factors.values()))
    return TrajectoryLogProb(total=total, factors=factors)
