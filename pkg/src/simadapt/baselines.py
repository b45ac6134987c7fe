"""Comparison methods: fine-tuning, domain randomization, CMA-ES SysID.

Domain randomization draws dynamics per episode from uniform ranges over
the same knobs the parameter function controls, plus a mass ratio that the
parameter function cannot express. Fine-tuning trains directly on the
target environment under a hard episode budget. CMA-ES system
identification fits state-independent parameter means (and log-variances)
by minimizing a smoothed trajectory-distance fitness, with open-loop
(replayed actions) or closed-loop (behavior policy) simulator rollouts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .envs import (
    NO_GAP,
    EnvHandle,
    EnvSpec,
    EnvState,
    TargetGap,
    env_step,
    is_terminal,
    observe,
)
from .errors import ConfigurationError, ContractViolationError, SimulationDivergedError
from .hybrid import PinnedParams
from .identify import TargetDataset
from .policy import behavior_policy
from .ppo import PpoConfig, PpoTrainer, ValueFunction, collect_policy_batch, train_policy

# Fitness assigned to candidates whose rollouts diverge immediately or
# produce non-finite distances.
MAX_FITNESS_PENALTY = 1e6


# -- domain randomization -------------------------------------------------------------


@dataclass(frozen=True)
class DrRanges:
    """Uniform sampling intervals per dynamics knob.

    mass_scale and motor_scale are dimensionless ratios; lateral_friction
    is an absolute coefficient; motor_friction is a velocity-proportional
    torque drop (the power-gap damping channel); the contact scales
    multiply the spec's stiffness and damping constants. Knobs absent
    from an environment's parameter set are ignored at sampling time.
    """

    mass_scale: tuple = (0.5, 1.5)
    motor_scale: tuple = (0.5, 1.5)
    lateral_friction: tuple = (0.4, 1.5)
    motor_friction: tuple = (0.0, 0.1)
    contact_stiffness_scale: tuple = (0.5, 2.0)
    contact_damping_scale: tuple = (0.5, 2.0)
    tangential_damping_scale: tuple = (0.5, 2.0)

    def __post_init__(self):
        for f in dataclasses.fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ConfigurationError(f"{f.name}: lo {lo} > hi {hi}")


def nominal_ranges(spec: EnvSpec) -> DrRanges:
    """Degenerate ranges pinned at the spec's nominal dynamics."""
    friction = spec.param_nominal.get("lateral_friction", 0.5)
    return DrRanges(mass_scale=(1.0, 1.0), motor_scale=(1.0, 1.0),
                    lateral_friction=(friction, friction), motor_friction=(0.0, 0.0),
                    contact_stiffness_scale=(1.0, 1.0),
                    contact_damping_scale=(1.0, 1.0),
                    tangential_damping_scale=(1.0, 1.0))


def _uniform(rng, interval):
    lo, hi = interval
    return lo if lo == hi else float(rng.uniform(lo, hi))


def dr_sample(spec: EnvSpec, ranges: DrRanges, rng) -> tuple[EnvSpec, TargetGap, dict]:
    """One per-episode draw: a spec with scaled mass, a power-style gap
    carrying the motor-friction term, and overrides for the simulation
    parameters the environment exposes."""
    mass = _uniform(rng, ranges.mass_scale) * spec.mass
    motor_friction = _uniform(rng, ranges.motor_friction)
    gap = NO_GAP if motor_friction == 0.0 else TargetGap(
        kind="power", motor_scale=1.0, velocity_friction=motor_friction)

    params = dict(spec.param_nominal)
    for name in params:
        if name.startswith("motor_scale_"):
            params[name] = _uniform(rng, ranges.motor_scale)
        elif name == "lateral_friction":
            params[name] = _uniform(rng, ranges.lateral_friction)
        elif name == "contact_stiffness_scale":
            params[name] = _uniform(rng, ranges.contact_stiffness_scale)
        elif name == "contact_damping_scale":
            params[name] = _uniform(rng, ranges.contact_damping_scale)
        elif name == "tangential_damping_scale":
            params[name] = _uniform(rng, ranges.tangential_damping_scale)
    return dataclasses.replace(spec, mass=mass), gap, params


def dr_env_factory(spec: EnvSpec, ranges: DrRanges, rng,
                   obs_noise: bool = True, torque_noise: bool = True):
    """Episode factory for the training loop: fresh randomized dynamics
    each reset."""

    def factory():
        ep_spec, gap, params = dr_sample(spec, ranges, rng)
        handle = EnvHandle(ep_spec, gap, obs_noise, torque_noise)
        return handle, PinnedParams(ep_spec, params)

    return factory


@dataclass
class BaselineTrainConfig:
    iterations: int = 60
    episodes_per_iter: int = 20
    value_hidden: tuple = (64, 64)
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(
        lr=3e-4, epochs=8, minibatch=256))


def train_dr_policy(spec: EnvSpec, ranges: DrRanges, reward_cfg,
                    config: BaselineTrainConfig, policy, rngs: dict,
                    callback=None):
    """PPO with per-episode randomized dynamics; warm-starts from the
    given policy. Returns (policy, history)."""
    trained = policy.copy()
    value_fn = ValueFunction(len(spec.obs_scales), hidden=config.value_hidden,
                             rng=rngs["policy"],
                             input_scales=np.asarray(spec.obs_scales, dtype=float))
    factory = dr_env_factory(spec, ranges, rngs["env"])
    history = train_policy(
        EnvHandle(spec), trained, value_fn, reward_cfg,
        iterations=config.iterations, episodes_per_iter=config.episodes_per_iter,
        config=config.ppo, env_rng=rngs["env"], policy_rng=rngs["policy"],
        update_rng=rngs["policy"], env_factory=factory, callback=callback)
    return trained, history


# -- fine-tuning on the target --------------------------------------------------------


def finetune(policy, target_handle: EnvHandle, reward_cfg,
             config: BaselineTrainConfig, rngs: dict, budget_episodes: int = 200):
    """PPO directly on the target environment, stopping before any episode
    beyond the budget starts. Returns (policy, history, episodes_used)."""
    if budget_episodes < 0:
        raise ConfigurationError("budget must be nonnegative")
    tuned = policy.copy()
    if budget_episodes == 0:
        return tuned, [], 0
    value_fn = ValueFunction(len(target_handle.spec.obs_scales),
                             hidden=config.value_hidden, rng=rngs["policy"],
                             input_scales=np.asarray(target_handle.spec.obs_scales,
                                                     dtype=float))
    trainer = PpoTrainer(tuned, value_fn, config.ppo)
    history = []
    used = 0
    for it in range(config.iterations):
        n = min(config.episodes_per_iter, budget_episodes - used)
        if n <= 0:
            break
        _, batch = collect_policy_batch(
            target_handle, tuned, n, rngs["env"], rngs["policy"], reward_cfg)
        used += n
        diag = trainer.update(batch, rngs["policy"])
        diag["iteration"] = it
        diag["episodes_used"] = used
        history.append(diag)
    return tuned, history, used


# -- CMA-ES system identification -----------------------------------------------------


def smooth_observations(obs: np.ndarray, sigma: float) -> np.ndarray:
    """Per-dimension temporal Gaussian smoothing; sigma in steps."""
    if sigma <= 0.0:
        return np.asarray(obs, dtype=float)
    return gaussian_filter1d(np.asarray(obs, dtype=float), sigma, axis=0,
                             mode="nearest")


def sysid_fitness(sim_trajs, real_trajs, p: float = 2.0,
                  smooth_sigma: float = 2.0) -> float:
    """Mean over index-paired trajectories of the trajectory distance
    between Gaussian-smoothed observation sequences.

    The distance is the per-step l_p norm of the observation difference
    summed over the common-prefix length (so a constant offset delta over
    T steps costs T times the p-norm of delta). Pairs with no common
    prefix contribute the max penalty. Accepts Trajectory objects or raw
    (T, obs_dim) arrays.
    """
    if len(sim_trajs) != len(real_trajs):
        raise ContractViolationError("trajectory lists must pair by index")
    if not sim_trajs:
        raise ContractViolationError("no trajectory pairs")
    total = 0.0
    for sim, real in zip(sim_trajs, real_trajs):
        sim_obs = sim.obs if hasattr(sim, "obs") else np.asarray(sim, dtype=float)
        real_obs = real.obs if hasattr(real, "obs") else np.asarray(real, dtype=float)
        n = min(sim_obs.shape[0], real_obs.shape[0])
        if n == 0:
            total += MAX_FITNESS_PENALTY
            continue
        a = smooth_observations(sim_obs[:n], smooth_sigma)
        b = smooth_observations(real_obs[:n], smooth_sigma)
        step_norms = np.sum(np.abs(a - b) ** p, axis=1) ** (1.0 / p)
        dist = float(np.sum(step_norms))
        total += dist if np.isfinite(dist) else MAX_FITNESS_PENALTY
    return total / len(sim_trajs)


@dataclass
class CmaesConfig:
    population: int = 16
    generations: int = 200
    sigma0_scale: float = 0.3
    elite_fraction: float = 0.5


def cmaes_minimize(objective, x0: np.ndarray, sigma0: float,
                   bounds: tuple, config: CmaesConfig, rng, callback=None):
    """Covariance matrix adaptation evolution strategy: rank-mu plus
    rank-one covariance update with cumulative step-size control.
    Candidates are clipped to bounds before evaluation (bound repair).
    Returns (best_x, best_f, per-generation log)."""
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    lam = config.population
    mu = max(1, int(lam * config.elite_fraction))
    weights = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights /= weights.sum()
    mu_eff = 1.0 / np.sum(weights**2)

    cc = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
    cs = (mu_eff + 2) / (n + mu_eff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mu_eff)
    cmu = min(1 - c1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
    damps = 1 + 2 * max(0.0, np.sqrt((mu_eff - 1) / (n + 1)) - 1) + cs
    chi_n = np.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))

    mean = x0.copy()
    sigma = float(sigma0)
    C = np.eye(n)
    p_sigma = np.zeros(n)
    p_c = np.zeros(n)
    lo, hi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)

    best_x, best_f = mean.copy(), np.inf
    log = []
    for gen in range(config.generations):
        eigvals, eigvecs = np.linalg.eigh(C)
        eigvals = np.maximum(eigvals, 1e-20)
        sqrt_C = eigvecs @ np.diag(np.sqrt(eigvals)) @ eigvecs.T
        inv_sqrt_C = eigvecs @ np.diag(1.0 / np.sqrt(eigvals)) @ eigvecs.T

        zs = rng.standard_normal((lam, n))
        xs = np.clip(mean + sigma * (zs @ sqrt_C.T), lo, hi)
        fs = np.empty(lam)
        for i in range(lam):
            f = objective(xs[i])
            fs[i] = f if np.isfinite(f) else MAX_FITNESS_PENALTY
        order = np.argsort(fs)
        if fs[order[0]] < best_f:
            best_f = float(fs[order[0]])
            best_x = xs[order[0]].copy()

        # recombination over the repaired (clipped) elite displacements
        y_sel = (xs[order[:mu]] - mean) / sigma
        y_w = weights @ y_sel
        mean = mean + sigma * y_w

        p_sigma = ((1 - cs) * p_sigma
                   + np.sqrt(cs * (2 - cs) * mu_eff) * (inv_sqrt_C @ y_w))
        h_sigma = float(np.linalg.norm(p_sigma)
                        / np.sqrt(1 - (1 - cs) ** (2 * (gen + 1)))
                        < (1.4 + 2 / (n + 1)) * chi_n)
        p_c = (1 - cc) * p_c + h_sigma * np.sqrt(cc * (2 - cc) * mu_eff) * y_w

        rank_mu = sum(w * np.outer(y, y) for w, y in zip(weights, y_sel))
        C = ((1 - c1 - cmu) * C
             + c1 * (np.outer(p_c, p_c) + (1 - h_sigma) * cc * (2 - cc) * C)
             + cmu * rank_mu)
        C = (C + C.T) / 2
        sigma *= float(np.exp((cs / damps) * (np.linalg.norm(p_sigma) / chi_n - 1)))
        sigma = float(np.clip(sigma, 1e-12, 1e6))

        row = {"generation": gen, "best_f": best_f,
               "gen_best_f": float(fs[order[0]]), "sigma": sigma}
        log.append(row)
        if callback is not None:
            callback(gen, row)
        if sigma < 1e-10:
            break
    return best_x, best_f, log


@dataclass
class SysIdResult:
    param_names: tuple
    means: np.ndarray
    log_variances: np.ndarray
    fitness: float
    generations: list

    def mean_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.param_names, self.means)}

    def sample_dict(self, rng) -> dict:
        std = np.exp(0.5 * self.log_variances)
        draw = self.means + std * rng.standard_normal(len(self.means))
        return {n: float(v) for n, v in zip(self.param_names, draw)}


class _ReplayPolicy:
    """Feeds back a recorded action sequence; zero action past its end."""

    def __init__(self, actions: np.ndarray):
        self.actions = np.asarray(actions, dtype=float)
        self.action_dim = self.actions.shape[1]
        self._t = 0

    def reset(self):
        self._t = 0

    def act(self, obs, rng, deterministic: bool = False):
        a = (self.actions[self._t].copy() if self._t < len(self.actions)
             else np.zeros(self.action_dim))
        self._t += 1
        return a, 0.0


def _candidate_rollout(spec: EnvSpec, params: dict, init_state: EnvState,
                       policy, n_steps: int, rng) -> np.ndarray:
    """Noise-free rollout from a recorded initial state under candidate
    constant parameters. Divergence or early termination truncates."""
    state = EnvState(init_state.q.copy(), init_state.qdot.copy(), 0)
    obs_rows = [observe(spec, state, rng, noise_on=False)]
    if hasattr(policy, "reset"):
        policy.reset()
    for _ in range(n_steps):
        action, _ = policy.act(obs_rows[-1], rng, deterministic=True)
        try:
            state = env_step(spec, NO_GAP, state, np.asarray(action, dtype=float),
                             rng, params=params, torque_noise=False)
        except SimulationDivergedError:
            break
        obs_rows.append(observe(spec, state, rng, noise_on=False))
        if is_terminal(spec, state):
            break
    return np.array(obs_rows)


def cmaes_sysid(dataset: TargetDataset, policy, spec: EnvSpec,
                mode: str = "open_loop", config: CmaesConfig | None = None,
                rng=None, p: float = 2.0, smooth_sigma: float = 2.0,
                optimize_variance: bool = True, callback=None) -> SysIdResult:
    """Fit constant simulation parameters by CMA-ES on trajectory distance.

    open_loop replays each recorded action sequence from its recorded
    initial state; closed_loop runs the behavior policy's mean action.
    The search runs in unit-box coordinates (one axis per parameter mean,
    plus one per log-variance when optimize_variance is on), so sigma0 is
    sigma0_scale times each range's width. Candidate rollouts are
    noise-free so fitness differences come from dynamics alone; the
    log-variance axes therefore settle near their lower bound unless the
    data demand spread, and refinement samples from the result.
    """
    if mode not in ("open_loop", "closed_loop"):
        raise ConfigurationError(f"unknown sysid mode {mode!r}")
    config = config or CmaesConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    names = tuple(spec.contact_params) + tuple(spec.actuator_params)
    lo = np.array([spec.param_ranges[n][0] for n in names])
    hi = np.array([spec.param_ranges[n][1] for n in names])
    width = hi - lo
    k = len(names)

    real_trajs = dataset.trajectories
    inits = []
    for traj in real_trajs:
        if traj.states is None or len(traj.states) == 0:
            raise ContractViolationError(
                "sysid needs recorded initial states in the dataset")
        inits.append(traj.states[0])
    real_obs = [t.obs for t in real_trajs]

    mean_policy = behavior_policy(policy, 0.0)
    log_var_lo, log_var_hi = -12.0, 2.0

    def decode(u):
        means = lo + u[:k] * width
        log_vars = (log_var_lo + u[k:] * (log_var_hi - log_var_lo)
                    if optimize_variance else np.full(k, log_var_lo))
        return means, log_vars

    def objective(u):
        means, _ = decode(u)
        params = {n: float(v) for n, v in zip(names, means)}
        sim_seqs = []
        for traj, init in zip(real_trajs, inits):
            ep_policy = (_ReplayPolicy(traj.actions) if mode == "open_loop"
                         else mean_policy)
            sim_seqs.append(_candidate_rollout(spec, params, init, ep_policy,
                                               n_steps=len(traj), rng=rng))
        return sysid_fitness(sim_seqs, real_obs, p=p, smooth_sigma=smooth_sigma)

    dim = 2 * k if optimize_variance else k
    u0 = np.empty(dim)
    u0[:k] = (np.array([spec.param_nominal[n] for n in names]) - lo) / width
    if optimize_variance:
        u0[k:] = 0.25
    best_u, best_f, log = cmaes_minimize(
        objective, u0, config.sigma0_scale, (np.zeros(dim), np.ones(dim)),
        config, rng, callback=callback)
    means, log_vars = decode(best_u)
    return SysIdResult(names, np.clip(means, lo, hi), log_vars, best_f, log)


def sysid_env_factory(spec: EnvSpec, result: SysIdResult, rng,
                      obs_noise: bool = True, torque_noise: bool = True):
    """Refinement under SysID: per-episode parameters drawn from the
    identified Gaussian, clipped into the legal ranges."""
    names = result.param_names
    lo = np.array([spec.param_ranges[n][0] for n in names])
    hi = np.array([spec.param_ranges[n][1] for n in names])

    def factory():
        draw = result.sample_dict(rng)
        vals = np.clip(np.array([draw[n] for n in names]), lo, hi)
        params = {n: float(v) for n, v in zip(names, vals)}
        return EnvHandle(spec, NO_GAP, obs_noise, torque_noise), PinnedParams(spec, params)

    return factory
