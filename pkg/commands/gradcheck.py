"""
Gradcheck - finite-difference check of every differentiable op and the full model
"""

import logging

from config import EXIT_NUMERIC, EXIT_OK
from gradcheck_suite import format_suite, run_suite

logger = logging.getLogger(__name__)

NAME = "gradcheck"


def add_parser(subparsers):
    parser = subparsers.add_parser(NAME, help="Run the gradient check suite (64-bit)")
    parser.add_argument("--seed", type=int, default=0, help="Seed for inputs and coordinate sampling (default 0)")
    parser.add_argument("--coords", type=int, default=100, help="Coordinates per parameter (default 100)")
    parser.set_defaults(run=run)
    return parser


def run(args) -> int:
    entries = run_suite(seed=args.seed, n_coords=args.coords)
    print(format_suite(entries), end="")
    failed = [e.name for e in entries if not e.passed]
    if failed:
        logger.error("Gradient check failed for: %s", ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK
