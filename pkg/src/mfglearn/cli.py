"""Command-line entry point.

    mfglearn <subcommand> [--config FILE] [--seed N] [--out-dir DIR] [--threads N]

Exit status: 0 success, 2 configuration error, 3 convergence failure,
4 numerical error (including failed acceptance checks).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import Config, config_from_dict, parse_config
from .errors import ConfigError, MFGError

SUBCOMMANDS = ("stationary", "transition", "temporary-eq", "common-noise", "discrete-learn", "discrete-master", "mrp", "suite")

log = logging.getLogger("mfglearn")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out-dir", type=Path, help="output directory (default: runs/<subcommand>)")
    common.add_argument("--threads", type=int, help="BLAS threads (default: run.threads)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="mfglearn", description="Mean field games with learning agents.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "common-noise":
            p.add_argument("--beta", type=float, help="override model.beta")
            p.add_argument("--gain", type=float, help="override common_noise.gain")
        if name == "suite":
            p.add_argument("--only", type=int, nargs="*", help="criterion numbers to run")
    return parser


def load_config(args) -> Config:
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    return cfg.with_overrides(
        **{
            "run.seed": args.seed,
            "run.threads": args.threads,
            "model.beta": getattr(args, "beta", None),
            "common_noise.gain": getattr(args, "gain", None),
        }
    )


def _suite(cfg, args, out_dir):
    from .acceptance import run_all
    from .io import RunDirectory

    with RunDirectory(out_dir, "suite", cfg, cfg.run.seed) as run:
        results = run_all(args.only)
        run.json(
            "summary.json",
            {
                f"criterion_{r.number}": {
                    "name": r.name,
                    "passed": r.passed,
                    "seconds": r.seconds,
                    "checks": {k: {"measured": m, "tolerance": t} for k, (m, t) in r.checks.items()},
                    "detail": r.detail,
                }
                for r in results
            },
        )
    return all(r.passed for r in results)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        from threadpoolctl import threadpool_limits

        from .experiments import run_experiment

        out_dir = args.out_dir or Path("runs") / args.command
        with threadpool_limits(limits=cfg.run.threads):
            if args.command == "suite":
                return 0 if _suite(cfg, args, out_dir) else 4
            path, summary = run_experiment(cfg, args.command, out_dir)
        print(f"{args.command}: outputs in {path}")
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return exc.exit_code
    except MFGError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
