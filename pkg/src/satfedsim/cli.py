"""Command-line interface.

Subcommands: ``run`` (full experiment), ``partition`` (write dataset
shards), ``inspect clusters`` (dump the warm-up cluster assignment), and
``plot`` (render charts from an existing metrics CSV).
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

from . import harness
from .domain import ConfigError, load_config
from .harness import EXIT_CONFIG, EXIT_IO, EXIT_OK


def _parse_overrides(pairs: Optional[Sequence[str]]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--override expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="config file path")
    parser.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        overrides = _parse_overrides(args.override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return harness.run_experiment(args.config, args.out_dir,
                                  overrides=overrides,
                                  stop_at_accuracy=args.stop_at_accuracy,
                                  make_plots=not args.no_plots)


def cmd_partition(args: argparse.Namespace) -> int:
    from . import learner
    from .domain import STREAM_PARTITION, SeededRng
    try:
        cfg = load_config(args.config, _parse_overrides(args.override))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rng = SeededRng(cfg.seed, STREAM_PARTITION)
        eval_shard, gs_shard, client_shards, _ = harness.build_data(cfg, rng)
        os.makedirs(args.out_dir, exist_ok=True)
        learner.write_shard(eval_shard, os.path.join(args.out_dir, "eval.sfsd"))
        learner.write_shard(gs_shard, os.path.join(args.out_dir, "gs_labeled.sfsd"))
        for i, shard in enumerate(client_shards):
            learner.write_shard(shard,
                                os.path.join(args.out_dir, f"client_{i:03d}.sfsd"))
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {2 + len(client_shards)} shards to {args.out_dir}")
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    if args.what != "clusters":
        print(f"unknown inspect target {args.what!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, _parse_overrides(args.override))
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    state = harness.build_state(cfg)
    lines = ["client_id,cluster,is_ps"]
    ps_ids = set(int(p) for p in state.assignment.ps_ids)
    for c in state.clients:
        cluster = int(state.assignment.labels[c.id])
        lines.append(f"{c.id},{cluster},{1 if c.id in ps_ids else 0}")
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            harness.atomic_write_text(args.out, text)
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    from . import plots
    try:
        written = plots.emit_plots(args.metrics, args.out_dir)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="satfedsim",
        description="Deterministic desk-scale simulator of clustered "
                    "semi-supervised federated learning over LEO "
                    "constellations")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment end to end")
    _add_config_args(p_run)
    p_run.add_argument("--out-dir", default="results", help="artifact directory")
    p_run.add_argument("--stop-at-accuracy", type=float, default=None,
                       help="stop once evaluation accuracy reaches this value")
    p_run.add_argument("--no-plots", action="store_true",
                       help="skip SVG chart emission")
    p_run.set_defaults(func=cmd_run)

    p_part = sub.add_parser("partition", help="write dataset shard files")
    _add_config_args(p_part)
    p_part.add_argument("--out-dir", default="shards", help="shard directory")
    p_part.set_defaults(func=cmd_partition)

    p_inspect = sub.add_parser("inspect", help="dump internal structures")
    p_inspect.add_argument("what", choices=["clusters"],
                           help="structure to dump")
    _add_config_args(p_inspect)
    p_inspect.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p_inspect.set_defaults(func=cmd_inspect)

    p_plot = sub.add_parser("plot", help="render charts from a metrics CSV")
    p_plot.add_argument("--metrics", required=True, help="metrics CSV path")
    p_plot.add_argument("--out-dir", default=".", help="chart directory")
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
