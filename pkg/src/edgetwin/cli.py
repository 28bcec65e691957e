"""Command-line entry point.

Subcommands: run, compare, replay, twin (train/export/import/cluster),
validate-config. Exit codes: 0 success, 2 configuration error, 3 runtime
divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .baselines import PolicyKind
from .config import dump_config, load_config, load_config_dict
from .errors import ConfigError, TraceFormatError, TrainingDivergenceError
from .experiment import (bs_descriptors, compare_policies, route_history,
                         run_experiment)
from .twin import (TwinModel, affinity_matrix, dcs_cluster, load_twin,
                   save_twin, train_local_twin)
from .workload import TraceStats, load_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--seed", default=None,
                   help="comma-separated seed list, overrides run.seeds")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--policy", default=None, help="policy kind override")
    p.add_argument("--override", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted-path config override")


def _load(args: argparse.Namespace):
    overrides = list(args.override)
    if args.seed:
        overrides.append(f"run.seeds=[{args.seed}]")
    if args.out:
        overrides.append(f'run.out_dir="{args.out}"')
    if getattr(args, "policy", None):
        overrides.append(f'policy.kind="{args.policy}"')
    return load_config(args.config, overrides)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    results = run_experiment(cfg)
    for r in results:
        print(f"seed {r.seed}: hit_rate={r.final_hit_rate:.4f} "
              f"requests={r.requests} decisions={r.decisions} "
              f"mutations={r.mutations}")
    print(f"metrics written to {cfg.run.out_dir}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _load(args)
    kinds = [PolicyKind(k.strip()) for k in args.policies.split(",")]
    rows = compare_policies(cfg, kinds)
    cols = ["policy", "hit_rate_mean", "load_spread_mean", "mutations_mean"]
    print("  ".join(f"{c:>18}" for c in cols))
    for row in rows:
        print("  ".join(
            f"{row[c]:>18.4f}" if isinstance(row[c], float) else f"{row[c]:>18}"
            for c in cols))
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    overrides = list(args.override)
    overrides.append('workload.kind="trace"')
    overrides.append(f'workload.trace_path="{args.trace}"')
    args.override = overrides
    cfg = _load(args)
    results = run_experiment(cfg)
    for r in results:
        print(f"seed {r.seed}: hit_rate={r.final_hit_rate:.4f} "
              f"requests={r.requests}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    sys.stdout.write(dump_config(cfg.raw))
    return EXIT_OK


def cmd_twin_train(args: argparse.Namespace) -> int:
    cfg = _load(args)
    stats = TraceStats()
    events = list(load_trace(args.trace, cfg.trace_catalogue_cap,
                             n_clients=cfg.network.n_clients, stats=stats))
    if not events:
        raise ConfigError(f"trace {args.trace} produced no events")
    twin = train_local_twin(events, TwinModel.fresh(cfg.trace_catalogue_cap),
                            cfg.twin.sync)
    save_twin(args.out_file, twin, created_step=len(events))
    print(f"trained twin on {len(events)} events "
          f"({len(stats.parse_errors)} parse errors) -> {args.out_file}")
    return EXIT_OK


def cmd_twin_export(args: argparse.Namespace) -> int:
    twin, step = load_twin(args.checkpoint)
    np.savetxt(args.out_file, twin.logits)
    print(f"exported version={twin.version} created_step={step} "
          f"catalogue={twin.logits.shape[0]} -> {args.out_file}")
    return EXIT_OK


def cmd_twin_import(args: argparse.Namespace) -> int:
    logits = np.loadtxt(args.params)
    save_twin(args.out_file, TwinModel(logits=np.atleast_1d(logits),
                                       version=args.version))
    print(f"imported {np.atleast_1d(logits).shape[0]} parameters "
          f"-> {args.out_file}")
    return EXIT_OK


def cmd_twin_cluster(args: argparse.Namespace) -> int:
    cfg = _load(args)
    histories: list[list[int]] = [[] for _ in range(cfg.network.n_bs)]
    if args.trace:
        events = list(load_trace(args.trace, cfg.trace_catalogue_cap,
                                 n_clients=cfg.network.n_clients))
        histories = route_history(events, cfg.network)
        catalogue = cfg.trace_catalogue_cap
    else:
        catalogue = cfg.catalogue_size
    phi = affinity_matrix(
        bs_descriptors(cfg.network, histories, catalogue), cfg.twin.affinity)
    labels = dcs_cluster(phi, cfg.twin.clusters)
    for n, c in enumerate(labels):
        print(f"bs {n}: cluster {c}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgetwin",
        description="Reliable edge-caching simulator and optimizer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _common_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("compare", help="run several policies on one workload")
    _common_flags(p)
    p.add_argument("--policies", required=True,
                   help="comma-separated policy kinds")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("replay", help="replay a trace file")
    _common_flags(p)
    p.add_argument("trace", help="CSV or .csv.gz trace path")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("validate-config", help="validate and echo a config")
    _common_flags(p)
    p.set_defaults(fn=cmd_validate)

    twin = sub.add_parser("twin", help="twin model utilities")
    tsub = twin.add_subparsers(dest="twin_command", required=True)

    p = tsub.add_parser("train", help="train a twin from a trace")
    _common_flags(p)
    p.add_argument("trace")
    p.add_argument("out_file")
    p.set_defaults(fn=cmd_twin_train)

    p = tsub.add_parser("export", help="dump twin parameters as text")
    p.add_argument("checkpoint")
    p.add_argument("out_file")
    p.set_defaults(fn=cmd_twin_export)

    p = tsub.add_parser("import", help="build a checkpoint from parameters")
    p.add_argument("params")
    p.add_argument("out_file")
    p.add_argument("--version", type=int, default=0)
    p.set_defaults(fn=cmd_twin_import)

    p = tsub.add_parser("cluster", help="cluster stations by affinity")
    _common_flags(p)
    p.add_argument("--trace", default=None,
                   help="optional trace informing request-mix affinity")
    p.set_defaults(fn=cmd_twin_cluster)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TraceFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
