"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .harness import ConfigInvalid, MissingCheckpoint


def _numerical_errors() -> tuple[type[Exception], ...]:
    from . import mappo, mpc, neural_core, numerics, qp

    return (
        numerics.SingularMatrix,
        numerics.NotPositiveDefinite,
        numerics.NonFiniteOutput,
        neural_core.NonFiniteGradient,
        mappo.NonFiniteLoss,
        qp.Infeasible,
        qp.SingularKKT,
        qp.RankDeficientConstraints,
        qp.MaxIterations,
        mpc.QPFailed,
        mpc.LineSearchFailed,
        FloatingPointError,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepsafempc")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run policy, predictor, and filtered-eval phases")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--single-thread", action="store_true")

    compare = sub.add_parser("compare", help="paired evaluation with and without the filter")
    compare.add_argument("--config", required=True)
    compare.add_argument("--checkpoints", required=True)
    compare.add_argument("--episodes", type=int, default=50)

    pred = sub.add_parser("pred-error", help="emit the one-step prediction error curve")
    pred.add_argument("--config", required=True)
    pred.add_argument("--checkpoints", required=True)
    pred.add_argument("--steps", type=int, default=1000)

    printc = sub.add_parser("print-config", help="print a preset config as TOML")
    printc.add_argument("--preset", choices=sorted(harness.PRESETS), default="cheetah2")
    return parser


def _load(args) -> harness.RunConfig:
    config = harness.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "single_thread", False):
        config.single_thread = True
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "print-config":
            sys.stdout.write(harness.config_to_toml(harness.default_config(args.preset)))
            return 0
        config = _load(args)
        if args.command == "train":
            paths = harness.run_training(config)
            for name, path in paths.items():
                print(f"{name}: {path}")
            return 0
        if args.command == "compare":
            summary = harness.run_comparison(config, args.checkpoints, args.episodes)
            print(
                f"mean cost without filter: {summary['mean_cost_off']:.3f}\n"
                f"mean cost with filter:    {summary['mean_cost_on']:.3f}\n"
                f"reduction:                {summary['reduction_pct']:.1f}%"
            )
            return 0
        if args.command == "pred-error":
            result = harness.emit_prediction_error_curve(config, args.checkpoints, args.steps)
            print(f"max error: {result['max_error']:.6g} ({result['csv']})")
            return 0
        return 2
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingCheckpoint as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except _numerical_errors() as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
