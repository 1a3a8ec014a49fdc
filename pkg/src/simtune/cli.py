"""``simtune`` command line: run experiments, compare runs, inspect envs, check gradients."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import kernels
from .config import ConfigError, parse_config
from .envs import ENVS, Controller, dump_trajectory, make_env_spec, rollout
from .nn import NumericalDivergence

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("simtune")


def cmd_run(args) -> int:
    from .harness import run_experiment

    cfg = parse_config(args.config, seed=args.seed, output_dir=args.out)
    if args.blind and cfg.method == "oracle_test":
        raise ConfigError("oracle_test reads the hidden parameters and cannot run with --blind")
    log.info("running %s on %s (seed %d) -> %s", cfg.method, cfg.env_id, cfg.seed, cfg.output_dir)
    result = run_experiment(cfg, blind=args.blind)
    s = result.summary
    print(f"{cfg.method} on {cfg.env_id}, seed {cfg.seed}: {s['rounds']} rounds, output in {result.out_dir}")
    if not args.blind:
        for name, e0, e1, first in zip(
            s["param_names"], s["initial_percent_error"], s["final_percent_error"], s["first_round_below_10pct"]
        ):
            print(f"  {name:<14} error {e0:8.2f}% -> {e1:8.2f}%   first round < 10%: {first if first is not None else '-'}")
        print(f"  mean error {s['initial_mean_percent_error']:.2f}% -> {s['final_mean_percent_error']:.2f}%")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .harness import compare_runs, format_table, write_table

    if len(args.dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    rows = compare_runs(args.dirs)
    print(format_table(rows))
    write_table(rows, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_envs_list(args) -> int:
    for env_id, env in ENVS.items():
        spec = make_env_spec(env_id)
        print(f"{env_id}  (action_dim={spec.action_dim}, {len(spec.schema)} parameters)")
        for name, kind, value in zip(spec.schema.names, spec.schema.kinds, spec.real_params):
            print(f"    {name:<14} {kind:<9} true={value:g}")
    return EXIT_OK


def cmd_envs_dump(args) -> int:
    spec = make_env_spec(args.env_id, args.frame_size, args.episode_len)
    traj = rollout(spec, spec.real_params, Controller(args.controller), np.random.default_rng(args.seed))
    paths = dump_trajectory(traj, args.out)
    print(f"wrote {len(paths)} frames to {args.out}")
    return EXIT_OK


def cmd_check_gradients(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    reports = run_all(seed=args.seed, probes=args.probes)
    for r in reports:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<14} probes={r.probes:<4d} max rel err={r.max_rel_error:.2e}")
    print(f"tolerance {TOLERANCE:g}; kernels backend: {kernels.BACKEND}")
    return EXIT_OK if all(r.ok for r in reports) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simtune", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a YAML config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--blind", action="store_true", help="never emit or evaluate against the hidden parameters")
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate final errors of completed runs by method")
    cmp_.add_argument("dirs", nargs="+")
    cmp_.add_argument("--out", default="compare.csv")
    cmp_.set_defaults(func=cmd_compare)

    envs = sub.add_parser("envs", help="environment utilities")
    esub = envs.add_subparsers(dest="envs_command", required=True)
    esub.add_parser("list", help="list environments and their true parameters").set_defaults(func=cmd_envs_list)
    dump = esub.add_parser("dump", help="write one rollout as PPM frames")
    dump.add_argument("env_id", choices=sorted(ENVS))
    dump.add_argument("--out", required=True)
    dump.add_argument("--seed", type=int, default=0)
    dump.add_argument("--frame-size", type=int, default=32)
    dump.add_argument("--episode-len", type=int, default=60)
    dump.add_argument("--controller", default="random")
    dump.set_defaults(func=cmd_envs_dump)

    check = sub.add_parser("check", help="self checks")
    csub = check.add_subparsers(dest="check_command", required=True)
    grad = csub.add_parser("gradients", help="finite-difference check of every layer")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--probes", type=int, default=120)
    grad.set_defaults(func=cmd_check_gradients)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDivergence as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # compare of mismatched runs and invalid env arguments are configuration problems
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
