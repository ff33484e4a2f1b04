"""Command-line front end: ``softql {train,eval,oracle-check,export}``.

Exit codes: 0 success, 1 property failure, 2 usage/config error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from pathlib import Path


from .config import ConfigError, EnvConfig, RunConfig, load_config
from .core import goal_occupancy, rollout_policy, substream, train, write_metrics
from .envs import write_trajectories
from .errors import InvalidInputError, NumericAbort
from .nn import load_checkpoint
from .oracle import DEFAULT_SIZES, run_battery
from .svgd import SamplerNetwork

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
ENV_OUTPUT_DIR = "SOFTQL_OUTPUT_DIR"
ENV_SEED = "SOFTQL_SEED"

log = logging.getLogger("softql")


def _resolve(config: RunConfig, seed=None, output_dir=None, n_epochs=None) -> RunConfig:
    """Apply environment-variable then command-line overrides."""
    if os.environ.get(ENV_OUTPUT_DIR):
        config.output_dir = os.environ[ENV_OUTPUT_DIR]
    if os.environ.get(ENV_SEED):
        try:
            config.train.seed = int(os.environ[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer") from None
    if seed is not None:
        config.train.seed = seed
    if output_dir is not None:
        config.output_dir = output_dir
    if n_epochs is not None:
        config.train.n_epochs = n_epochs
    config.train.validate()
    return config


def write_occupancy(path, env, occupancy, n_rollouts) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("goal", "x", "y", "fraction", "n_rollouts"))
        for i, (g, frac) in enumerate(zip(env.goals, occupancy)):
            writer.writerow((i, repr(float(g[0])), repr(float(g[1])), repr(float(frac)), n_rollouts))
    return path


def _evaluate(sampler, env, n_rollouts, seed, out_dir, suffix=""):
    rng = substream(seed, "eval")
    rows, finals = rollout_policy(env, sampler, n_rollouts, rng)
    occ = goal_occupancy(finals, len(env.goals))
    write_trajectories(Path(out_dir) / f"trajectories{suffix}.csv", rows)
    write_occupancy(Path(out_dir) / f"occupancy{suffix}.csv", env, occ, n_rollouts)
    return occ


def _print_occupancy(env, occ, n_rollouts):
    print(f"goal occupancy over {n_rollouts} rollouts:")
    for i, (g, frac) in enumerate(zip(env.goals, occ)):
        print(f"  goal {i} at ({g[0]:+.1f}, {g[1]:+.1f}): {frac:.2f}")


def cmd_train(args) -> int:
    try:
        config = _resolve(load_config(args.config), args.seed, args.output_dir, args.n_epochs)
        env = config.env.make()
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.resolved.yaml")
    try:
        result = train(config.train, env, out_dir=out, progress=not args.quiet)
    except NumericAbort as exc:
        print(f"error: {exc}; diagnostic state in {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    write_metrics(out / "metrics.csv", result.metrics, wall_clock=config.log_wall_clock)
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "seconds"))
        for row in result.metrics:
            writer.writerow((row.epoch, f"{row.seconds:.3f}"))
    if config.eval_rollouts:
        occ = _evaluate(result.agent.sampler, env, config.eval_rollouts, config.train.seed, out)
        _print_occupancy(env, occ, config.eval_rollouts)
    print(f"wrote run to {out}")
    return EXIT_OK


def _load_sampler(path, env):
    networks, meta = load_checkpoint(path)
    if "sampler" not in networks:
        raise InvalidInputError(f"{path} has no sampler network")
    state_dim = meta.get("state_dim", env.state_dim)
    action_dim = meta.get("action_dim", env.action_dim)
    if state_dim != env.state_dim or action_dim != env.action_dim:
        raise InvalidInputError(f"checkpoint dims ({state_dim}, {action_dim}) do not match the environment")
    sampler = SamplerNetwork(networks["sampler"], state_dim, action_dim)
    if sampler.action_dim != env.action_dim:
        raise InvalidInputError("checkpoint sampler output does not match the action dimension")
    return sampler, meta


def cmd_eval(args) -> int:
    try:
        config = load_config(args.config) if args.config else RunConfig(env=EnvConfig())
        env = config.env.make()
        sampler, meta = _load_sampler(args.checkpoint, env)
    except (InvalidInputError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    out = Path(args.output_dir or Path(args.checkpoint).parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    occ = _evaluate(sampler, env, args.n_rollouts, seed, out)
    _print_occupancy(env, occ, args.n_rollouts)
    return EXIT_OK


def _parse_sizes(text):
    sizes = []
    for part in text.split(","):
        try:
            s, a = (int(x) for x in part.lower().split("x"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad size {part!r}; expected e.g. 3x2") from None
        if s < 1 or a < 1:
            raise argparse.ArgumentTypeError("sizes must be positive")
        sizes.append((s, a))
    return tuple(sizes)


def cmd_oracle_check(args, backup=None) -> int:
    kwargs = {} if backup is None else {"backup": backup}
    results = run_battery(seed=args.seed, sizes=args.sizes, n_mdps=args.n_mdps, **kwargs)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: "
              + ", ".join(f"{r.name} (seed {r.seed})" for r in failed))
        return EXIT_PROPERTY
    print(f"all {len(results)} properties passed")
    return EXIT_OK


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        config = load_config(run_dir / "config.resolved.yaml")
        env = config.env.make()
        checkpoints = sorted(run_dir.glob("checkpoint_*.npz"))
        if not checkpoints:
            raise InvalidInputError(f"no checkpoints in {run_dir}")
        samplers = [(ck, _load_sampler(ck, env)[0]) for ck in checkpoints]
    except (InvalidInputError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.output_dir or run_dir / "export")
    out.mkdir(parents=True, exist_ok=True)
    if (run_dir / "metrics.csv").exists():
        shutil.copyfile(run_dir / "metrics.csv", out / "metrics.csv")
    n = args.n_rollouts if args.n_rollouts is not None else config.eval_rollouts
    for ck, sampler in samplers:
        suffix = "_" + ck.stem.split("_")[-1]
        occ = _evaluate(sampler, env, n, config.train.seed, out, suffix)
        print(f"{ck.name}: occupancy " + " ".join(f"{x:.2f}" for x in occ))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softql", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run soft Q-learning from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--n-epochs", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out a checkpointed sampler and summarize goal occupancy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--n-rollouts", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle-check", help="run the tabular property battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", type=_parse_sizes, default=DEFAULT_SIZES)
    p.add_argument("--n-mdps", type=int, default=20)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("export", help="re-emit metrics and trajectories from a run's checkpoints")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--n-rollouts", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
