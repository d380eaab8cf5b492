#!/usr/bin/env python3
"""
Bloch Beam CLI

Command-line entry point for the Bloch-band Gaussian beam studies: band
tables, beam propagation, beam and reference field snapshots, residual
diagnostics and the epsilon-ladder convergence study.
"""

import argparse
import os
import sys
from pathlib import Path

from colorama import Fore, Style, init as colorama_init

# Add the project root to the Python path to import our manager
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from manager import StudyManager  # noqa: E402
from solvers.errors import BlochBeamError, ConfigurationError  # noqa: E402

ACTIONS = ["bands", "propagate", "simulate", "reference", "converge", "residual"]
ALIASES = {"b": "bands", "prop": "propagate", "sim": "simulate", "ref": "reference", "conv": "converge", "res": "residual"}

EXIT_OK = 0
EXIT_INCOMPLETE = 1
EXIT_CONFIG = 2


def _ok(message: str) -> None:
    print(f"{Fore.GREEN}✓{Style.RESET_ALL} {message}")


def _fail(message: str) -> None:
    print(f"{Fore.RED}✗{Style.RESET_ALL} {message}", file=sys.stderr)


def _print_rows(result) -> None:
    print(f"{'epsilon':>12} {'err_initial':>12} {'err_total':>12} {'order_tot':>10} {'min_ImM':>10} {'runtime':>9}")
    for row in result.rows:
        order = "" if row.order_total is None else f"{row.order_total:.3f}"
        line = (f"{row.epsilon:12.6g} {row.err_initial_L2:12.4e} {row.err_total_L2:12.4e} "
                f"{order:>10} {row.min_ImM:10.4g} {row.runtime_s:8.1f}s")
        if row.completed:
            print(line)
        else:
            print(f"{Fore.RED}{line}  {row.error}{Style.RESET_ALL}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blochbeam",
        description="Bloch-band Gaussian beam superposition for the semiclassical Schrodinger equation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s bands --config studies/mathieu.cfg           # Band table over the Brillouin zone
  %(prog)s propagate --config studies/mathieu.cfg       # Final beam states at T
  %(prog)s simulate --config studies/mathieu.cfg        # Beam field snapshots per epsilon
  %(prog)s reference --config studies/mathieu.cfg       # Split-step reference snapshots
  %(prog)s converge --config studies/mathieu.cfg        # Full convergence study
  %(prog)s residual --config studies/mathieu.cfg        # Eikonal residual ratios per beam

Command Aliases:
  bands (b), propagate (prop), simulate (sim), reference (ref),
  converge (conv), residual (res)

Environment Variables:
  BLOCHBEAM_OUTPUT_DIR, BLOCHBEAM_WORKERS, BLOCHBEAM_LOG_LEVEL
        """
    )
    parser.add_argument(
        "action",
        choices=ACTIONS + list(ALIASES),
        help="Action to perform"
    )
    parser.add_argument("--config", required=True, help="Study config file (key = value lines)")
    parser.add_argument("--out", help="Output directory (overrides config and BLOCHBEAM_OUTPUT_DIR)")
    parser.add_argument("--workers", type=int, help="Worker threads for beams and windows")
    parser.add_argument("--serial", action="store_true", help="Run every beam on the calling thread")
    parser.add_argument("--no-a1", dest="with_a1", action="store_false", default=None,
                        help="Leave out the first-order corrector A1")
    parser.add_argument("--epsilon", type=float, help="Run a single epsilon instead of the ladder")
    parser.add_argument("--verbose", action="store_true", help="Show detailed logs (sets logging level to INFO)")
    return parser


def main(argv=None) -> int:
    colorama_init()
    args = build_parser().parse_args(argv)

    if args.verbose:
        os.environ['BLOCHBEAM_LOG_LEVEL'] = 'INFO'

    action = ALIASES.get(args.action, args.action)

    try:
        manager = StudyManager(
            args.config, output_dir=args.out, workers=args.workers, serial=args.serial,
            with_a1=args.with_a1, epsilon=args.epsilon, verbose=args.verbose,
        )
    except ConfigurationError as exc:
        _fail(str(exc))
        for problem in exc.errors:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if action == "bands":
            _ok(f"band table written to {manager.run_bands()}")
        elif action == "propagate":
            _ok(f"beam states written to {manager.run_propagate()}")
        elif action == "simulate":
            for path in manager.run_simulate():
                _ok(f"beam field written to {path}")
        elif action == "reference":
            for path in manager.run_reference():
                _ok(f"reference field written to {path}")
        elif action == "residual":
            _ok(f"residual table written to {manager.run_residual()}")
        elif action == "converge":
            result = manager.run_converge()
            _print_rows(result)
            if not result.completed:
                _fail(f"{sum(not row.completed for row in result.rows)} epsilon value(s) did not complete")
                return EXIT_INCOMPLETE
            _ok(f"convergence study written to {manager.output_dir}")
    except ConfigurationError as exc:
        _fail(str(exc))
        return EXIT_CONFIG
    except BlochBeamError as exc:
        _fail(f"{type(exc).__name__}: {exc}")
        return EXIT_INCOMPLETE
    except OSError as exc:
        _fail(str(exc))
        return EXIT_INCOMPLETE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
