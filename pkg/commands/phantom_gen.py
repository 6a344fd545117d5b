"""
Phantom Gen - write a synthetic dataset
"""

import logging

from config import DEFAULT_PHANTOM_SPEC, EXIT_OK
from phantom import generate, load_phantom_spec, write_phantom

logger = logging.getLogger(__name__)

NAME = "phantom-gen"


def add_parser(subparsers):
    parser = subparsers.add_parser(NAME, help="Generate phantom volumes with lesion boxes and position labels")
    parser.add_argument("--spec", default=str(DEFAULT_PHANTOM_SPEC),
                        help="Phantom spec file (default: assets/phantom_default.conf)")
    parser.add_argument("--seed", type=int, default=0, help="Dataset seed; volume i uses seed + i (default 0)")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.set_defaults(run=run)
    return parser


def run(args) -> int:
    spec = load_phantom_spec(args.spec)
    dataset = generate(spec, args.seed)
    write_phantom(dataset, args.out, spec, args.seed)
    n_train = len(dataset.split("train"))
    n_lesions = sum(len(v.lesions) for v in dataset.volumes)
    print(f"{len(dataset.volumes)} volumes ({n_train} train, {len(dataset.volumes) - n_train} test), "
          f"{n_lesions} lesions -> {args.out}")
    return EXIT_OK
