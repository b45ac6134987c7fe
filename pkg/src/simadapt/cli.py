"""Command-line surface binding the modules into reproducible runs.

Subcommands: collect, identify, refine, baseline, evaluate, dump-params,
score-dataset. Every run directory receives the exact configuration used,
so a persisted config plus the same build reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .baselines import (
    BaselineTrainConfig,
    CmaesConfig,
    DrRanges,
    cmaes_sysid,
    finetune,
    sysid_env_factory,
    train_dr_policy,
)
from .config import RunConfig, load_config, seed_streams
from .discriminator import Discriminator
from .envs import (
    DEFAULT_TASK_REWARDS,
    EnvHandle,
    NO_GAP,
    default_gap,
    make_spec,
)
from .errors import ConfigurationError
from .hybrid import ParamFunction, PinnedParams, mean_params_over
from .identify import (
    RefineConfig,
    TargetDataset,
    collect_target_data,
    identify,
    load_dataset,
    refine_policy,
    save_dataset,
    write_metrics_csv,
    write_run_dir,
)
from .policy import GaussianPolicy


def _resolve_gap(env: str, gap_name: str):
    if gap_name in ("none", "", None):
        return NO_GAP
    return default_gap(env, gap_name)


def _load_policy(path: str | None, spec, seed: int) -> GaussianPolicy:
    if path is None:
        rng = np.random.default_rng([seed, 909])
        return GaussianPolicy(len(spec.obs_scales), spec.action_dim, rng=rng)
    if not os.path.exists(path):
        raise ConfigurationError(f"policy checkpoint not found: {path}")
    with open(path) as fh:
        return GaussianPolicy.from_dict(json.load(fh))


def _save_policy(path: str, policy: GaussianPolicy) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(policy.to_dict(), fh, sort_keys=True)
        fh.write("\n")


def _load_param_fn(path: str):
    if not os.path.exists(path):
        raise ConfigurationError(f"parameter-function checkpoint not found: {path}")
    with open(path) as fh:
        return ParamFunction.from_dict(json.load(fh))


def _write_config(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _base_config(args) -> RunConfig:
    """Resolve the run configuration: file values, then explicit flags."""
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "env", None):
        cfg.env = args.env
    if getattr(args, "gap", None):
        cfg.gap = args.gap
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_collect(args) -> int:
    cfg = _base_config(args)
    spec = make_spec(cfg.env)
    gap = _resolve_gap(cfg.env, cfg.gap)
    handle = EnvHandle(spec, gap, not args.no_obs_noise, not args.no_torque_noise)
    rngs = seed_streams(cfg.seed)
    policy = _load_policy(args.policy, spec, cfg.seed)
    reward_cfg = DEFAULT_TASK_REWARDS[cfg.env] if args.with_rewards else None
    dataset = collect_target_data(
        policy, handle, args.n, rngs["env"], rngs["policy"],
        noise_std=args.noise_std, reward_cfg=reward_cfg,
        extra_provenance={"seed": cfg.seed, "policy": args.policy or "fresh"})
    save_dataset(args.out, dataset)
    print(f"collected {dataset.n_episodes} episodes "
          f"({handle.steps_taken} steps, mean length {dataset.mean_length:.1f}) "
          f"-> {args.out}")
    return 0


def cmd_identify(args) -> int:
    cfg = _base_config(args)
    dataset = load_dataset(args.dataset)
    env = args.env or str(dataset.provenance.get("env", "")) or cfg.env
    spec = make_spec(env)
    rngs = seed_streams(cfg.seed)
    policy = _load_policy(args.policy, spec, cfg.seed)
    config = cfg.pipeline.identify
    if args.iterations is not None:
        config.iterations = args.iterations
    if args.episodes is not None:
        config.episodes_per_iter = args.episodes
    if args.no_alive_bonus:
        config.use_alive_bonus = False
    run = identify(dataset, policy, spec, config, rngs, out_dir=args.out)
    if args.out:
        write_run_dir(args.out, run, extra_config={
            "command": "identify", "env": env, "seed": cfg.seed,
            "dataset": args.dataset})
    last = run.metrics[-1] if run.metrics else None
    score = f"{last['mean_sim_score']:.3f}" if last else "n/a"
    print(f"identification finished after {len(run.metrics)} iterations "
          f"(early stop: {run.stopped_early}, final sim score {score})")
    return 0


def cmd_refine(args) -> int:
    cfg = _base_config(args)
    spec = make_spec(cfg.env)
    rngs = seed_streams(cfg.seed)
    policy = _load_policy(args.policy, spec, cfg.seed)
    if args.nominal_params:
        param_fn = PinnedParams(spec)
    else:
        if not args.param_fn:
            raise ConfigurationError("refine needs --param-fn or --nominal-params")
        param_fn = _load_param_fn(args.param_fn)
    config = cfg.pipeline.refine
    if args.iterations is not None:
        config.iterations = args.iterations
    if args.episodes is not None:
        config.episodes_per_iter = args.episodes
    if args.lr is not None:
        config.ppo.lr = args.lr
    config.stochastic_params = not args.deterministic_params
    reward_cfg = DEFAULT_TASK_REWARDS[cfg.env]
    refined, history = refine_policy(param_fn, policy, spec, reward_cfg,
                                     config, rngs)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _save_policy(os.path.join(args.out, "policy.json"), refined)
        write_metrics_csv(os.path.join(args.out, "metrics.csv"), history)
        _write_config(args.out, {
            "command": "refine", "env": cfg.env, "seed": cfg.seed,
            "iterations": config.iterations,
            "episodes_per_iter": config.episodes_per_iter,
            "lr": config.ppo.lr, "stochastic_params": config.stochastic_params,
            "param_fn": args.param_fn or "nominal", "policy": args.policy or "fresh"})
    final = history[-1]["mean_reward"] if history else float("nan")
    print(f"refinement ran {len(history)} iterations "
          f"(final mean step reward {final:.4f})")
    return 0


def cmd_baseline(args) -> int:
    cfg = _base_config(args)
    spec = make_spec(cfg.env)
    gap = _resolve_gap(cfg.env, cfg.gap)
    rngs = seed_streams(cfg.seed)
    policy = _load_policy(args.policy, spec, cfg.seed)
    reward_cfg = DEFAULT_TASK_REWARDS[cfg.env]
    config = BaselineTrainConfig()
    if args.iterations is not None:
        config.iterations = args.iterations
    if args.episodes is not None:
        config.episodes_per_iter = args.episodes

    history: list = []
    extra: dict = {}
    if args.method == "ft":
        target = EnvHandle(spec, gap)
        trained, history, used = finetune(policy, target, reward_cfg, config,
                                          rngs, budget_episodes=args.budget)
        extra["episodes_used"] = used
    elif args.method in ("dr", "dr-ft"):
        trained, history = train_dr_policy(spec, DrRanges(), reward_cfg, config,
                                           policy, rngs)
        if args.method == "dr-ft":
            target = EnvHandle(spec, gap)
            trained, ft_history, used = finetune(trained, target, reward_cfg,
                                                 config, rngs,
                                                 budget_episodes=args.budget)
            history = history + ft_history
            extra["episodes_used"] = used
    elif args.method in ("sysid-o", "sysid-c"):
        if not args.dataset:
            raise ConfigurationError("sysid methods need --dataset")
        dataset = load_dataset(args.dataset)
        if args.fit_trajs is not None:
            dataset = TargetDataset(dataset.trajectories[:args.fit_trajs],
                                    dataset.provenance)
        mode = "open_loop" if args.method == "sysid-o" else "closed_loop"
        cmaes_cfg = CmaesConfig()
        if args.generations is not None:
            cmaes_cfg.generations = args.generations
        if args.population is not None:
            cmaes_cfg.population = args.population
        result = cmaes_sysid(dataset, policy, spec, mode=mode,
                             config=cmaes_cfg, rng=rngs["cmaes"])
        extra["identified_means"] = result.mean_dict()
        extra["fitness"] = result.fitness
        history = result.generations
        factory = sysid_env_factory(spec, result, rngs["env"])
        refine_cfg = RefineConfig(iterations=config.iterations,
                                  episodes_per_iter=config.episodes_per_iter)
        trained, refine_history = refine_policy(
            PinnedParams(spec, result.mean_dict()), policy, spec, reward_cfg,
            refine_cfg, rngs, env_factory=factory)
        history = history + refine_history
    else:
        raise ConfigurationError(f"unknown baseline method {args.method!r}")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _save_policy(os.path.join(args.out, "policy.json"), trained)
        write_metrics_csv(os.path.join(args.out, "metrics.csv"), history)
        _write_config(args.out, {
            "command": "baseline", "method": args.method, "env": cfg.env,
            "gap": cfg.gap, "seed": cfg.seed, "budget": args.budget,
            "fit_trajs": args.fit_trajs, **extra})
    print(f"baseline {args.method} finished ({len(history)} metric rows)")
    return 0


def cmd_evaluate(args) -> int:
    from .rollout import evaluate_policy

    cfg = _base_config(args)
    spec = make_spec(cfg.env)
    gap = _resolve_gap(cfg.env, cfg.gap)
    policy = _load_policy(args.policy, spec, cfg.seed)
    reward_cfg = DEFAULT_TASK_REWARDS[cfg.env]
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else [cfg.seed])
    rows = []
    for seed in seeds:
        handle = EnvHandle(spec, gap)
        stats = evaluate_policy(handle, policy, reward_cfg, args.episodes, seed,
                                deterministic=not args.stochastic)
        rows.append({"seed": seed, "mean_return": stats["mean_return"],
                     "std_return": stats["std_return"],
                     "mean_length": stats["mean_length"]})
    means = np.array([r["mean_return"] for r in rows])
    summary = {
        "env": cfg.env, "gap": cfg.gap, "episodes": args.episodes,
        "seeds": seeds, "mean_return": float(means.mean()),
        "across_seed_std": float(means.std()),
        "per_seed": rows,
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_metrics_csv(os.path.join(args.out, "results.csv"), rows)
    print(f"return {summary['mean_return']:.3f} "
          f"+/- {rows[0]['std_return']:.3f} over {args.episodes} episodes"
          + (f" (across-seed std {summary['across_seed_std']:.3f})"
             if len(seeds) > 1 else ""))
    return 0


def cmd_dump_params(args) -> int:
    from .envs import state_features

    param_fn = _load_param_fn(args.param_fn)
    if args.dataset:
        dataset = load_dataset(args.dataset)
        env = args.env or str(dataset.provenance.get("env", param_fn.env_name))
        spec = make_spec(env)
        blocks = []
        for traj in dataset.trajectories:
            if len(traj) == 0:
                continue
            if traj.states:
                feats = np.array([state_features(spec, s)
                                  for s in traj.states[:-1]])
            else:
                feats = traj.obs[:-1]
            blocks.append(np.hstack([feats, traj.actions]))
        rows = np.vstack(blocks)
    else:
        spec = make_spec(args.env or param_fn.env_name)
        rows = np.zeros((1, len(spec.obs_scales) + spec.action_dim))
    means = mean_params_over(param_fn, rows)
    print(json.dumps({"n_states": int(rows.shape[0]), "param_means": means},
                     indent=2, sort_keys=True))
    return 0


def cmd_score_dataset(args) -> int:
    with open(args.discriminator) as fh:
        disc = Discriminator.from_dict(json.load(fh))
    dataset = load_dataset(args.dataset)
    scores = disc.score_batch(dataset.tuples())
    print(json.dumps({
        "n_tuples": int(scores.shape[0]),
        "mean_score": float(scores.mean()),
        "std_score": float(scores.std()),
    }, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simadapt",
        description="Adversarial simulator identification on analytic toy tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, env_required=False):
        p.add_argument("--config", default=None, help="RunConfig JSON path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory or file")
        p.add_argument("--env", required=env_required, default=None,
                       choices=["slider", "pendulum", "hopper1d"])

    p = sub.add_parser("collect", help="roll the behavior policy in a target env")
    common(p)
    p.add_argument("--gap", default=None, choices=["none", "deform", "power", "heavy"])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--noise-std", type=float, default=0.25)
    p.add_argument("--policy", default=None)
    p.add_argument("--with-rewards", action="store_true")
    p.add_argument("--no-obs-noise", action="store_true")
    p.add_argument("--no-torque-noise", action="store_true")
    p.set_defaults(fn=cmd_collect)
    p.set_defaults(out_required=True)

    p = sub.add_parser("identify", help="fit the simulation-parameter function")
    common(p, env_required=False)
    p.add_argument("--dataset", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--no-alive-bonus", action="store_true")
    p.set_defaults(fn=cmd_identify)

    p = sub.add_parser("refine", help="retrain the policy in the hybrid simulator")
    common(p)
    p.add_argument("--param-fn", default=None)
    p.add_argument("--nominal-params", action="store_true",
                   help="pin parameters at nominal (plain source training)")
    p.add_argument("--policy", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--deterministic-params", action="store_true")
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("baseline", help="run a comparison method")
    common(p)
    p.add_argument("--method", required=True,
                   choices=["ft", "dr", "dr-ft", "sysid-o", "sysid-c"])
    p.add_argument("--gap", default=None, choices=["none", "deform", "power", "heavy"])
    p.add_argument("--policy", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--fit-trajs", type=int, default=None,
                   help="fit only the first N dataset trajectories")
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("evaluate", help="mean/std task return of a policy")
    common(p)
    p.add_argument("--gap", default=None, choices=["none", "deform", "power", "heavy"])
    p.add_argument("--policy", default=None)
    p.add_argument("--episodes", type=int, default=30)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--stochastic", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("dump-params", help="mean parameter outputs of a checkpoint")
    common(p, env_required=False)
    p.add_argument("--param-fn", required=True)
    p.add_argument("--dataset", default=None)
    p.set_defaults(fn=cmd_dump_params)

    p = sub.add_parser("score-dataset", help="discriminator scores on a dataset")
    common(p, env_required=False)
    p.add_argument("--discriminator", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_score_dataset)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "collect" and not args.out:
        parser.error("collect needs --out FILE")
    if args.command == "dump-params" and not (args.dataset or args.env):
        parser.error("dump-params needs --dataset or --env")
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
