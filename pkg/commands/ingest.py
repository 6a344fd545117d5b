"""
Ingest - validate a HUVOL volume and normalize its slice interval
"""

import logging
from pathlib import Path

from config import EXIT_OK, load_run_config
from volume_io import load_volume, resample_z, save_volume

logger = logging.getLogger(__name__)

NAME = "ingest"


def add_parser(subparsers):
    parser = subparsers.add_parser(NAME, help="Validate a volume and resample it to the target slice interval")
    parser.add_argument("--input", required=True, help="HUVOL file to read")
    parser.add_argument("--out", required=True, help="Output HUVOL file (effective config goes next to it)")
    parser.add_argument("--config", help="Run config file (key = value)")
    parser.add_argument("--target-z", type=float, dest="target_z_mm",
                        help="Slice interval in mm (default 2.0, z-normalization)")
    parser.set_defaults(run=run)
    return parser


def run(args) -> int:
    config = load_run_config(args.config, {"target_z_mm": args.target_z_mm})
    volume = load_volume(args.input)
    resampled = resample_z(volume, config.target_z_mm)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(resampled, out)
    config.write_echo(out.parent)

    z, y, x = resampled.shape
    print(f"{out.name}: {z} slices of {y}x{x} at {resampled.spacing_mm[0]:g} mm "
          f"(from {volume.num_slices} at {volume.spacing_mm[0]:g} mm)")
    return EXIT_OK
