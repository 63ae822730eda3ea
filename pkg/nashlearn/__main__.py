import argparse
import logging
import sys

from nashlearn import __version__
from nashlearn.core import (
    EXIT_CONFIG,
    EXIT_LOCALITY,
    EXIT_NOT_CONVERGED,
    cmd_forward,
    cmd_inverse,
    cmd_make_demos,
    cmd_verify,
    write_report,
)
from nashlearn.errors import (
    AssemblyError,
    ConfigurationError,
    DegenerateGameError,
    DivergenceError,
    LocalityViolation,
    OracleFailure,
    ShapeError,
    StaleSensitivityError,
    TopologyError,
    UnsolvableSystemError,
)
from nashlearn.scenario import Scenario

logger = logging.getLogger("nashlearn")


def _common(parser):
    parser.add_argument("--scenario", required=True, help="scenario XML file")
    parser.add_argument("--out", default="out", help="directory for output files")
    locality = parser.add_mutually_exclusive_group()
    locality.add_argument(
        "--strict-locality",
        dest="strict",
        action="store_true",
        default=True,
        help="fail on the first message to a non-neighbour (the default)",
    )
    locality.add_argument(
        "--permissive-locality",
        dest="strict",
        action="store_false",
        help="record messages to non-neighbours and continue",
    )
    parser.add_argument("--workers", type=int, default=1, help="threads per round")
    parser.add_argument("--max-iters", type=int, help="iteration cap")
    parser.add_argument("--tol", type=float, help="termination tolerance")
    parser.add_argument("--gamma", type=float, help="shooting step size")
    parser.add_argument("--alpha", type=float, help="linear-solver step size")
    parser.add_argument("--eta", type=float, help="learning rate")


def build_parser():
    parser = argparse.ArgumentParser(
        description="Solve and learn multi-robot dynamic games"
    )
    parser.add_argument("-v", "--version", dest="version", action="store_true")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging verbosity",
    )
    subparsers = parser.add_subparsers(dest="command")

    forward = subparsers.add_parser("forward", help="compute the Nash equilibrium")
    _common(forward)
    forward.add_argument("--theta", help="checkpoint with parameters to solve at")

    demos = subparsers.add_parser("make-demos", help="synthesise demonstrations")
    _common(demos)
    demos.add_argument("--count", type=int, help="number of demonstrations")
    demos.add_argument("--seed", type=int, help="random seed")

    inverse = subparsers.add_parser("inverse", help="learn parameters from demonstrations")
    _common(inverse)
    inverse.add_argument(
        "--demos", nargs="+", required=True, help="demonstration files or directories"
    )
    inverse.add_argument(
        "--init",
        default="scenario",
        help='"scenario", "truth", "random", a factor applied to the true parameters '
        "or a checkpoint",
    )
    inverse.add_argument("--seed", type=int, help="random seed of --init random")

    verify = subparsers.add_parser("verify", help="certify a solution")
    _common(verify)
    verify.add_argument(
        "--solution", nargs="+", required=True, help="trajectory files or directories"
    )
    verify.add_argument("--theta", help="checkpoint with parameters to verify at")
    return parser


def run(args):
    scenario = Scenario.open(args.scenario)
    overrides = {
        "gamma": args.gamma,
        "tol": args.tol,
        "max_iters": args.max_iters,
        "alpha": args.alpha,
        "eta": args.eta,
    }
    if args.command == "forward":
        report = cmd_forward(
            scenario,
            args.out,
            theta=args.theta,
            strict=args.strict,
            workers=args.workers,
            **overrides,
        )
    elif args.command == "make-demos":
        report = cmd_make_demos(
            scenario,
            args.out,
            count=args.count,
            seed=args.seed,
            strict=args.strict,
            workers=args.workers,
            **overrides
        )
    elif args.command == "inverse":
        report = cmd_inverse(
            scenario,
            args.demos,
            args.out,
            init=args.init,
            seed=args.seed,
            strict=args.strict,
            workers=args.workers,
            **overrides
        )
    else:
        report = cmd_verify(scenario, args.solution, args.out, theta=args.theta, **overrides)
    write_report(report, args.out)
    logger.info("%s finished with exit code %d", args.command, report.exit_code)
    return report.exit_code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.version:
        print(__version__)
        sys.exit()
    if not args.command:
        parser.print_help()
        sys.exit(EXIT_CONFIG)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        code = run(args)
    except LocalityViolation as e:
        logger.error(str(e))
        code = EXIT_LOCALITY
    except (ConfigurationError, TopologyError, ShapeError, FileNotFoundError) as e:
        logger.error(str(e))
        code = EXIT_CONFIG
    except (
        AssemblyError,
        DegenerateGameError,
        DivergenceError,
        OracleFailure,
        StaleSensitivityError,
        UnsolvableSystemError,
    ) as e:
        logger.error(str(e))
        code = EXIT_NOT_CONVERGED
    sys.exit(code)


if __name__ == "__main__":
    main()
