"""Command-line entry point: ``tunnelqmc <subcommand> [--config F] [--seed S] ...``.

Subcommands map onto experiment kinds; flags override the config file. Output
is CSV written to ``--out`` (or stdout). The exit status is nonzero when an
experiment with pass/fail checks (``equilibrium``) reports failures.
"""

import argparse
from dataclasses import replace
import sys

from . import ctqmc, harness
from .errors import ConfigError

SUBCOMMANDS = {
    "spectrum": "spectrum",
    "perturb": "perturbation-report",
    "equilibrium": "equilibrium-check",
    "zb-ratio": "zb-ratio",
    "escape": "escape-scaling",
    "profiles": "profiles",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tunnelqmc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run a {kind} experiment")
        p.add_argument("--config", help="INI file with an [experiment] section")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output CSV path (default: stdout)")
        p.add_argument("--runs", type=int)
        p.add_argument("--threads", type=int)
        if name == "escape":
            p.add_argument("--runs-out", help="per-run CSV (N,K,chain,sweeps_to_passage,timeout_flag)")
    return parser


def _config(args, kind):
    if args.config:
        cfg = harness.load_config(args.config)
        if cfg.kind != kind:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand ({kind})")
    else:
        cfg = harness.parse_config(f"[experiment]\nkind = {kind}\n")
    over = {k: getattr(args, k) for k in ("seed", "runs", "threads") if getattr(args, k) is not None}
    return replace(cfg, **over) if over else cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    kind = SUBCOMMANDS[args.command]
    try:
        cfg = _config(args, kind)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    status = 0
    if kind == "spectrum":
        _, text = harness.run_spectrum(cfg)
    elif kind == "perturbation-report":
        _, text = harness.run_perturbation_report(cfg)
    elif kind == "equilibrium-check":
        _, text, failed = harness.run_equilibrium_check(cfg)
        if failed:
            print(f"{failed} equilibrium checks failed", file=sys.stderr)
            status = 1
    elif kind == "zb-ratio":
        _, text = harness.run_zb_ratio(cfg)
    elif kind == "escape-scaling":
        _, text, raw = harness.run_escape_scaling(cfg)
        if args.runs_out:
            with open(args.runs_out, "w") as fh:
                fh.write(ctqmc.escape_result_csv(raw))
    else:
        _, text = harness.run_profiles(cfg)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
