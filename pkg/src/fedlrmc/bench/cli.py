"""Command line entry point: ``fedlrmc <experiment> --config FILE [--seed N] [--out DIR] [--threads N]``."""
import argparse
import sys

from .config import COMMANDS, load_config
from .experiments import run_experiment
from .report import emit_report


def build_parser():
    parser = argparse.ArgumentParser(prog="fedlrmc", description="Seeded low-rank matrix completion experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, kind in COMMANDS.items():
        sp = sub.add_parser(cmd, help=f"run a {kind.replace('_', ' ')} experiment")
        sp.add_argument("--config", required=True,
                        help="flat key = value config file, or a summary.json to replay")
        sp.add_argument("--seed", type=int, default=None, help="override master_seed")
        sp.add_argument("--out", default=None, help="override output_dir")
        sp.add_argument("--threads", type=int, default=1, help="trials run in parallel (default 1)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    kind = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, kind=kind, master_seed=args.seed, output_dir=args.out)
    except (OSError, ValueError) as exc:
        print(f"fedlrmc: {exc}", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("fedlrmc: --threads must be >= 1", file=sys.stderr)
        return 2
    record = run_experiment(cfg, threads=args.threads)
    out = emit_report(record, cfg.output_dir)
    print(f"config_hash={record.config_hash}")
    print(f"digest={record.digest()}")
    print(f"output={out}")
    for name, table in record.aggregates.items():
        if name == "trials" or name == "curve":
            continue
        print(f"[{name}]")
        cols = list(table)
        print(",".join(cols))
        for row in zip(*(table[c] for c in cols)):
            print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    return 0


if __name__ == "__main__":
    sys.exit(main())
