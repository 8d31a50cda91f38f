"""Command-line entry point: ``coupledflow {run,resume,diagnose,verify}``."""

import argparse
import sys

from .exceptions import CoupledFlowError
from .runner import diagnose_checkpoint, resume_experiment, run_experiment, verify


def _steps(text):
    try:
        steps = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not steps or any(s < 1 for s in steps):
        raise argparse.ArgumentTypeError("step counts must be positive")
    return steps


def build_parser():
    parser = argparse.ArgumentParser(prog="coupledflow", description="Coupled shortcut flow experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, seed=True):
        p.add_argument("--out", help="output directory")
        p.add_argument("--ema", action="store_true", help="restore with EMA parameters")
        p.add_argument("--steps", type=_steps, help="comma-separated inference step counts, e.g. 1,2,4")
        if seed:
            p.add_argument("--seed", type=int, help="override the experiment seed")

    p = sub.add_parser("run", help="train and evaluate from a config file")
    p.add_argument("config")
    common(p)
    p = sub.add_parser("resume", help="continue training from a checkpoint")
    p.add_argument("checkpoint")
    common(p, seed=False)
    p = sub.add_parser("diagnose", help="evaluate a checkpoint without training")
    p.add_argument("checkpoint")
    p.add_argument("config")
    common(p)
    p = sub.add_parser("verify", help="check artifact checksums against the MANIFEST")
    p.add_argument("dir")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "verify":
            problems = verify(args.dir)
            for line in problems:
                print(line, file=sys.stderr)
            print("ok" if not problems else f"{len(problems)} problem(s)")
            return 0 if not problems else 1
        if args.verb == "run":
            result = run_experiment(args.config, args.out, args.seed, args.steps, args.ema)
        elif args.verb == "resume":
            result = resume_experiment(args.checkpoint, args.out, args.steps, args.ema)
        else:
            result = diagnose_checkpoint(args.checkpoint, args.config, args.out, args.seed, args.steps, args.ema)
    except (CoupledFlowError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not result.ok:
        print(f"failed at stage {result.failed_stage}: {result.error}", file=sys.stderr)
        return 1
    print(result.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
