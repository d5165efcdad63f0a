"""Command-line entry point: ``sieveci <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .errors import InputError, SieveCIError, SingularSystemError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

COMMANDS = ("evaluate-fixed", "evaluate-optimal", "onpolicy", "simulate", "value-diff")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--gamma", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--eta", type=float)
    common.add_argument("--L", type=int, help="fix the sieve dimension")
    common.add_argument("--ridge", type=float)
    common.add_argument("--kn", type=int, help="trajectory groups")
    common.add_argument("--kt", type=int, help="time groups")
    common.add_argument("--reps", type=int, help="replications (0: single run)")
    common.add_argument("--seed", type=int)
    common.add_argument("--permute-seed", type=int, dest="permute_seed")
    common.add_argument("--workers", type=int)
    common.add_argument("--out", metavar="PATH",
                        help="report (JSON) or, for simulate, the CSV file")
    p = argparse.ArgumentParser(prog="sieveci", description="Policy value inference.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def load_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise InputError("config must be a JSON object")
    est = cfg.setdefault("estimator", {})
    exp = cfg.setdefault("experiment", {})
    for flag, key in (("gamma", "gamma"), ("alpha", "alpha"), ("eta", "eta"), ("L", "L"),
                      ("ridge", "ridge"), ("kn", "kn"), ("kt", "kt")):
        v = getattr(args, flag)
        if v is not None:
            est[key] = v
    for flag in ("reps", "seed", "permute_seed", "workers"):
        v = getattr(args, flag)
        if v is not None:
            exp[flag] = v
    return cfg


def run(args) -> harness.ExperimentReport | None:
    cfg = load_config(args)
    if args.command == "simulate":
        if not args.out:
            raise InputError("simulate needs --out PATH")
        ds = harness.simulate_to_csv(cfg, args.out)
        print(f"wrote {ds.N} transitions to {args.out}")
        return None
    fn = {"evaluate-fixed": harness.experiment_fixed,
          "evaluate-optimal": harness.experiment_optimal,
          "onpolicy": harness.experiment_onpolicy,
          "value-diff": harness.experiment_value_diff}[args.command]
    report = fn(cfg)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
    print(report.text_summary())
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except SingularSystemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SieveCIError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
