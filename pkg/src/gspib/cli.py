"""Command line pipeline driver.

Invoked as ``python -m gspib <command> --config run.ini --out dir``.  Exit
codes: 0 success, 2 config error, 3 numerical failure, 4 kinetics ensemble
came back all-censored (nothing to fit).  Worker count for ensemble and
sweep members comes from the GSPIB_WORKERS environment variable.
"""

import argparse
import sys
from pathlib import Path

from . import workflows
from .config import ConfigError, load_config, write_template

COMMANDS = {
    "simulate": (workflows.run_simulate,
                 "unbiased Langevin run, CV series, trajectory"),
    "train": (workflows.run_train,
              "fit the state-predictive bottleneck on a trajectory"),
    "wtmetad": (workflows.run_wtmetad,
                "well-tempered metadynamics replicas"),
    "imetad": (workflows.run_imetad,
               "infrequent metadynamics first-passage ensemble"),
    "analyze": (workflows.run_analyze,
                "classify, reweight, FES surfaces, dF tables"),
    "gradcheck": (workflows.run_gradcheck,
                  "finite-difference audit of every gradient"),
    "sweep-lag": (workflows.run_sweep_lag,
                  "retrain across prediction lags, tabulate K"),
}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CENSORED = 4


def make_parser():
    parser = argparse.ArgumentParser(
        prog="gspib",
        description="graph-state bottleneck CV pipeline for the LJ7 cluster")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True,
                       help="run configuration file (key = value sections)")
        p.add_argument("--out", required=True,
                       help="output directory for artifacts")
    tpl = sub.add_parser("config-template",
                         help="write a fully documented config template")
    tpl.add_argument("--out", required=True, help="file to write")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    if args.command == "config-template":
        write_template(args.out)
        return EXIT_OK
    handler = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config)
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        rc = handler(cfg, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if rc is None else int(rc)


if __name__ == "__main__":
    sys.exit(main())
