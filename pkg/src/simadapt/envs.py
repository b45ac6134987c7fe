"""Analytic toy environments and their target-domain variants.

Three systems, each stepped by semi-implicit Euler at 50 Hz:

- ``slider``: a block on a rough plane driven by a horizontal force.
  Coulomb friction with a viscous regularization near zero velocity.
- ``pendulum``: a damped rigid pendulum (angle measured from the
  downward vertical) driven by a joint torque. No contact.
- ``hopper1d``: a point-mass body on a massless springy leg. Penalty
  contact supplies the normal force; thrust and horizontal drive act
  only during contact, and thrust is weaker than gravity so the body
  cannot hover.

A target variant is the same system with one dynamics gap applied:
``power`` rescales commanded torque and subtracts a velocity-dependent
term, ``heavy`` adds body mass, ``deform`` swaps the hard penalty
contact for a softer nonlinear law. The learned parameter function can
override contact and actuator constants per step through the ``params``
mapping; its keys are declared per environment in the spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractViolationError, SimulationDivergedError

GAP_KINDS = ("none", "deform", "power", "heavy")

# Velocity window for the viscous regularization of Coulomb friction.
FRICTION_V_EPS = 1e-2


@dataclass
class EnvState:
    """Generalized positions and velocities plus the step counter."""

    q: np.ndarray
    qdot: np.ndarray
    t: int = 0

    def copy(self) -> "EnvState":
        return EnvState(self.q.copy(), self.qdot.copy(), self.t)


@dataclass(frozen=True)
class EnvSpec:
    """Physical constants, dimensions, and bounds for one environment."""

    name: str
    dt: float = 0.02
    gravity: float = 9.8
    mass: float = 1.0
    max_steps: int = 100
    motor_gain: float = 6.0
    torque_limit: float = 1.0
    action_dim: int = 1
    obs_dim: int = 2
    obs_scales: tuple = (1.0, 1.0)
    init_q: tuple = (0.0,)
    init_qdot: tuple = (0.0,)
    init_noise_std: tuple = (0.05, 0.05)
    # slider / hopper1d ground friction coefficient
    friction: float = 0.0
    # pendulum
    length: float = 0.8
    joint_damping: float = 0.0
    # hopper1d contact model
    leg_length: float = 1.0
    contact_stiffness: float = 60.0
    contact_damping: float = 8.0
    tangential_damping: float = 0.17
    thrust_gain: float = 8.0
    drive_gain: float = 4.0
    # healthy bounds
    pos_bound: float = math.inf
    vel_bound: float = 10.0
    z_healthy: tuple = (0.4, 2.0)
    # learnable parameter declaration
    contact_params: tuple = ()
    actuator_params: tuple = ()
    param_ranges: dict = field(default_factory=dict)
    param_nominal: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TargetGap:
    """One dynamics gap between source and target domain.

    kind="none" leaves the source untouched. "power" applies
    ``tau_eff = motor_scale * tau - velocity_friction * qdot`` per
    actuator. "heavy" adds ``mass_delta`` to the body mass. "deform"
    multiplies contact stiffness by ``deform_stiffness_ratio`` and adds
    a penetration-squared term with coefficient ``deform_quad``.
    """

    kind: str = "none"
    motor_scale: float = 1.0
    velocity_friction: float = 0.0
    mass_delta: float = 0.0
    deform_stiffness_ratio: float = 0.2
    deform_quad: float = 10.0

    def __post_init__(self):
        if self.kind not in GAP_KINDS:
            raise ConfigurationError(f"unknown gap kind {self.kind!r}; expected one of {GAP_KINDS}")


NO_GAP = TargetGap(kind="none")


@dataclass(frozen=True)
class TaskRewardConfig:
    """Weights of r = w_c + w_v*v_x - w_a*|a|^2 - w_j*|j|_0 - w_s*|qddot|."""

    w_c: float = 0.0
    w_v: float = 1.0
    w_a: float = 0.05
    w_j: float = 0.0
    w_s: float = 0.0
    target_direction: float = 1.0


# -- environment factories ------------------------------------------------------


def slider_spec(**overrides) -> EnvSpec:
    base = dict(
        name="slider",
        mass=1.0,
        friction=0.5,
        motor_gain=6.0,
        action_dim=1,
        obs_dim=2,
        obs_scales=(1.0, 1.0),
        init_q=(0.0,),
        init_qdot=(0.0,),
        init_noise_std=(0.05, 0.05),
        pos_bound=50.0,
        vel_bound=10.0,
        max_steps=100,
        contact_params=("lateral_friction",),
        actuator_params=("motor_scale_0",),
        param_ranges={"lateral_friction": (0.0, 2.0), "motor_scale_0": (0.0, 3.0)},
        param_nominal={"lateral_friction": 0.5, "motor_scale_0": 1.0},
    )
    base.update(overrides)
    if "friction" in overrides and "param_nominal" not in overrides:
        base["param_nominal"] = {"lateral_friction": overrides["friction"], "motor_scale_0": 1.0}
    return EnvSpec(**base)


def pendulum_spec(**overrides) -> EnvSpec:
    base = dict(
        name="pendulum",
        mass=1.0,
        length=0.8,
        joint_damping=0.05,
        motor_gain=2.5,
        action_dim=1,
        obs_dim=3,
        obs_scales=(1.0, 1.0, 5.0),
        init_q=(0.0,),
        init_qdot=(0.0,),
        init_noise_std=(0.1, 0.1),
        vel_bound=20.0,
        max_steps=100,
        contact_params=(),
        actuator_params=("motor_scale_0",),
        param_ranges={"motor_scale_0": (0.0, 3.0)},
        param_nominal={"motor_scale_0": 1.0},
    )
    base.update(overrides)
    return EnvSpec(**base)


def hopper1d_spec(**overrides) -> EnvSpec:
    base = dict(
        name="hopper1d",
        mass=1.2,
        friction=0.8,
        leg_length=1.0,
        contact_stiffness=60.0,
        contact_damping=8.0,
        tangential_damping=0.17,
        thrust_gain=8.0,
        drive_gain=4.0,
        motor_gain=1.0,
        action_dim=2,
        obs_dim=3,
        obs_scales=(1.0, 2.0, 2.0),
        init_q=(0.0, 1.2),
        init_qdot=(0.0, 0.0),
        init_noise_std=(0.0, 0.05, 0.1, 0.1),
        vel_bound=25.0,
        z_healthy=(0.4, 2.0),
        max_steps=200,
        contact_params=(
            "lateral_friction",
            "contact_stiffness_scale",
            "contact_damping_scale",
            "tangential_damping_scale",
        ),
        actuator_params=("motor_scale_0", "motor_scale_1"),
        param_ranges={
            "lateral_friction": (0.0, 2.0),
            "contact_stiffness_scale": (0.05, 20.0),
            "contact_damping_scale": (0.0, 5.0),
            "tangential_damping_scale": (0.0, 5.0),
            "motor_scale_0": (0.0, 3.0),
            "motor_scale_1": (0.0, 3.0),
        },
        param_nominal={
            "lateral_friction": 0.8,
            "contact_stiffness_scale": 1.0,
            "contact_damping_scale": 1.0,
            "tangential_damping_scale": 1.0,
            "motor_scale_0": 1.0,
            "motor_scale_1": 1.0,
        },
    )
    base.update(overrides)
    if "friction" in overrides and "param_nominal" not in overrides:
        nominal = dict(base["param_nominal"])
        nominal["lateral_friction"] = overrides["friction"]
        base["param_nominal"] = nominal
    return EnvSpec(**base)


_SPEC_FACTORIES = {"slider": slider_spec, "pendulum": pendulum_spec, "hopper1d": hopper1d_spec}


def make_spec(name: str, **overrides) -> EnvSpec:
    if name not in _SPEC_FACTORIES:
        raise ConfigurationError(f"unknown environment {name!r}; expected one of {sorted(_SPEC_FACTORIES)}")
    return _SPEC_FACTORIES[name](**overrides)


def default_gap(env_name: str, kind: str) -> TargetGap:
    """Shipped gap magnitudes, tuned so a behavior policy's target return
    lands well below its source return without making the task hopeless."""
    table = {
        ("slider", "power"): TargetGap("power", motor_scale=0.85, velocity_friction=0.05),
        ("slider", "heavy"): TargetGap("heavy", mass_delta=0.15),
        ("pendulum", "power"): TargetGap("power", motor_scale=0.7, velocity_friction=0.05),
        ("pendulum", "heavy"): TargetGap("heavy", mass_delta=0.3),
        ("hopper1d", "deform"): TargetGap("deform", deform_stiffness_ratio=0.2, deform_quad=10.0),
        ("hopper1d", "power"): TargetGap("power", motor_scale=0.6, velocity_friction=0.1),
        ("hopper1d", "heavy"): TargetGap("heavy", mass_delta=0.6),
    }
    if kind == "none":
        return NO_GAP
    key = (env_name, kind)
    if key not in table:
        raise ConfigurationError(f"no shipped gap {kind!r} for environment {env_name!r}")
    return table[key]


# -- core stepping ---------------------------------------------------------------


def _param(params, name: str, default: float) -> float:
    if params is None:
        return default
    return float(params.get(name, default))


def _actuator_rates(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Joint velocity seen by each actuator, for power-gap back-torque."""
    if spec.name == "hopper1d":
        return state.qdot.copy()
    return state.qdot[:1].copy()


def effective_torque(spec: EnvSpec, gap: TargetGap, state: EnvState, action: np.ndarray,
                     rng, params=None, torque_noise: bool = True,
                     noise_z=None) -> np.ndarray:
    """Commanded action -> effective normalized torque.

    Order: saturation, multiplicative 5% noise, learned motor scale,
    then the power-gap transform. All in normalized command units; each
    environment applies its own gain afterwards. ``noise_z`` supplies
    pre-drawn standard normals so callers can record them; when omitted
    they are drawn from ``rng`` in place.
    """
    a = np.clip(np.asarray(action, dtype=float), -spec.torque_limit, spec.torque_limit)
    if a.shape != (spec.action_dim,):
        raise ContractViolationError(f"action shape {a.shape}, expected ({spec.action_dim},)")
    tau = a
    if torque_noise:
        if noise_z is None:
            noise_z = rng.standard_normal(spec.action_dim)
        tau = tau * (1.0 + 0.05 * np.asarray(noise_z))
    scales = np.array(
        [_param(params, f"motor_scale_{i}", 1.0) for i in range(spec.action_dim)]
    )
    tau = scales * tau
    if gap.kind == "power":
        tau = gap.motor_scale * tau - gap.velocity_friction * _actuator_rates(spec, state)
    return tau


def _hopper_normal_force(spec: EnvSpec, gap: TargetGap, z: float, vz: float, params) -> float:
    pen = max(0.0, spec.leg_length - z)
    if pen <= 0.0:
        return 0.0
    k = spec.contact_stiffness * _param(params, "contact_stiffness_scale", 1.0)
    d = spec.contact_damping * _param(params, "contact_damping_scale", 1.0)
    if gap.kind == "deform":
        k = k * gap.deform_stiffness_ratio
        f = k * pen + gap.deform_quad * pen * pen - d * vz
    else:
        f = k * pen - d * vz
    return max(0.0, f)


def _coulomb(v: float, mu: float, normal: float) -> float:
    """Regularized Coulomb friction force opposing v."""
    return -mu * normal * float(np.clip(v / FRICTION_V_EPS, -1.0, 1.0))


def env_step(spec: EnvSpec, gap: TargetGap, state: EnvState, action: np.ndarray,
             rng, params=None, torque_noise: bool = True, noise_z=None) -> EnvState:
    """One semi-implicit Euler step: v' = v + dt*acc, q' = q + dt*v'."""
    tau = effective_torque(spec, gap, state, action, rng, params, torque_noise, noise_z)
    mass = spec.mass + (gap.mass_delta if gap.kind == "heavy" else 0.0)
    dt = spec.dt

    if spec.name == "slider":
        v = float(state.qdot[0])
        mu = _param(params, "lateral_friction", spec.friction)
        force = spec.motor_gain * tau[0] + _coulomb(v, mu, mass * spec.gravity)
        acc = np.array([force / mass])
    elif spec.name == "pendulum":
        theta, omega = float(state.q[0]), float(state.qdot[0])
        inertia = mass * spec.length**2
        torque = (
            spec.motor_gain * tau[0]
            - mass * spec.gravity * spec.length * math.sin(theta)
            - spec.joint_damping * omega
        )
        acc = np.array([torque / inertia])
    elif spec.name == "hopper1d":
        z, vx, vz = float(state.q[1]), float(state.qdot[0]), float(state.qdot[1])
        f_n = _hopper_normal_force(spec, gap, z, vz, params)
        in_contact = (spec.leg_length - z) > 0.0
        mu = _param(params, "lateral_friction", spec.friction)
        c_t = spec.tangential_damping * _param(params, "tangential_damping_scale", 1.0)
        f_x = 0.0
        f_z = -mass * spec.gravity + f_n
        if in_contact:
            f_x = spec.drive_gain * tau[0] - c_t * f_n * vx
            cone = mu * f_n
            f_x = float(np.clip(f_x, -cone, cone))
            f_z += spec.thrust_gain * tau[1]
        acc = np.array([f_x / mass, f_z / mass])
    else:
        raise ConfigurationError(f"unknown environment {spec.name!r}")

    qdot = state.qdot + dt * acc
    q = state.q + dt * qdot
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qdot))):
        raise SimulationDivergedError(f"{spec.name} produced a non-finite state at t={state.t}")
    return EnvState(q=q, qdot=qdot, t=state.t + 1)


# -- observation, termination, reward ---------------------------------------------


def state_features(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Noise-free observation map. Cyclic coordinates are excluded
    (slider/hopper x position is translation-invariant for the tasks)."""
    if spec.name == "slider":
        return np.array([state.q[0], state.qdot[0]])
    if spec.name == "pendulum":
        return np.array([math.cos(state.q[0]), math.sin(state.q[0]), state.qdot[0]])
    if spec.name == "hopper1d":
        return np.array([state.q[1], state.qdot[0], state.qdot[1]])
    raise ConfigurationError(f"unknown environment {spec.name!r}")


def observe(spec: EnvSpec, state: EnvState, rng, noise_on: bool = True,
            noise_z=None) -> np.ndarray:
    feats = state_features(spec, state)
    if noise_on:
        if noise_z is None:
            noise_z = rng.standard_normal(spec.obs_dim)
        feats = feats + 0.10 * np.asarray(spec.obs_scales) * np.asarray(noise_z)
    return feats


def is_unhealthy(spec: EnvSpec, state: EnvState) -> bool:
    """Healthy-bound violation only; the step budget is handled separately."""
    if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qdot))):
        return True
    if np.any(np.abs(state.qdot) > spec.vel_bound):
        return True
    if spec.name == "slider":
        return abs(float(state.q[0])) > spec.pos_bound
    if spec.name == "hopper1d":
        z = float(state.q[1])
        return not (spec.z_healthy[0] <= z <= spec.z_healthy[1])
    return False


def is_terminal(spec: EnvSpec, state: EnvState) -> bool:
    return is_unhealthy(spec, state) or state.t >= spec.max_steps


def forward_velocity(spec: EnvSpec, state: EnvState) -> float:
    return float(state.qdot[0])


def task_reward(cfg: TaskRewardConfig, spec: EnvSpec, s: EnvState, a: np.ndarray,
                s_next: EnvState) -> float:
    a = np.asarray(a, dtype=float)
    v_x = cfg.target_direction * forward_velocity(spec, s_next)
    at_limit = int(np.sum(np.abs(a) >= spec.torque_limit - 1e-9))
    qddot = (s_next.qdot - s.qdot) / spec.dt
    return float(
        cfg.w_c
        + cfg.w_v * v_x
        - cfg.w_a * float(np.sum(a**2))
        - cfg.w_j * at_limit
        - cfg.w_s * float(np.linalg.norm(qddot))
    )


DEFAULT_TASK_REWARDS = {
    "slider": TaskRewardConfig(w_c=0.0, w_v=1.0, w_a=0.05, w_j=0.0, w_s=0.01),
    "pendulum": TaskRewardConfig(w_c=0.0, w_v=1.0, w_a=0.05, w_j=0.0, w_s=0.01),
    "hopper1d": TaskRewardConfig(w_c=0.0, w_v=1.0, w_a=0.05, w_j=0.0, w_s=0.01),
}


def reset_env(spec: EnvSpec, rng) -> tuple[EnvState, np.ndarray]:
    """Draw an initial state; returns the standard-normal draws used."""
    nq = len(spec.init_q)
    dim = nq + len(spec.init_qdot)
    std = np.asarray(spec.init_noise_std, dtype=float)
    if std.shape != (dim,):
        raise ConfigurationError(f"init_noise_std has {std.shape[0]} entries, state has {dim}")
    z = rng.standard_normal(dim)
    q = np.asarray(spec.init_q) + std[:nq] * z[:nq]
    qdot = np.asarray(spec.init_qdot) + std[nq:] * z[nq:]
    return EnvState(q=q, qdot=qdot, t=0), z


# -- handles -----------------------------------------------------------------------


class EnvHandle:
    """An environment bound to a gap, with a step counter.

    The counter is the audit trail for the no-target-data contract: the
    identification and refinement stages must never increment a target
    handle's counter.
    """

    def __init__(self, spec: EnvSpec, gap: TargetGap = NO_GAP,
                 obs_noise: bool = True, torque_noise: bool = True):
        self.spec = spec
        self.gap = gap
        self.obs_noise = obs_noise
        self.torque_noise = torque_noise
        self.steps_taken = 0

    def reset(self, rng) -> tuple[EnvState, np.ndarray]:
        return reset_env(self.spec, rng)

    def step(self, state: EnvState, action: np.ndarray, rng, params=None,
             noise_z=None) -> EnvState:
        self.steps_taken += 1
        return env_step(self.spec, self.gap, state, action, rng, params=params,
                        torque_noise=self.torque_noise, noise_z=noise_z)

    def observe(self, state: EnvState, rng, noise_z=None) -> np.ndarray:
        return observe(self.spec, state, rng, noise_on=self.obs_noise, noise_z=noise_z)

    def with_spec(self, **overrides) -> "EnvHandle":
        return EnvHandle(replace(self.spec, **overrides), self.gap,
                         self.obs_noise, self.torque_noise)


def make_env(spec: EnvSpec, obs_noise: bool = True, torque_noise: bool = True) -> EnvHandle:
    return EnvHandle(spec, NO_GAP, obs_noise, torque_noise)


def make_target(spec: EnvSpec, gap: TargetGap, obs_noise: bool = True,
                torque_noise: bool = True) -> EnvHandle:
    if gap.kind not in GAP_KINDS:
        raise ConfigurationError(f"unknown gap kind {gap.kind!r}")
    return EnvHandle(spec, gap, obs_noise, torque_noise)
