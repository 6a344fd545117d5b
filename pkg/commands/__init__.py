"""
Subcommand modules for the MVP lesion detection toolkit

Each module exposes NAME, add_parser(subparsers) and run(args) -> exit code.
"""

from . import ingest, window, cluster_windows, phantom_gen, train, evaluate, gradcheck

COMMANDS = [ingest, window, cluster_windows, phantom_gen, train, evaluate, gradcheck]

__all__ = ['ingest', 'window', 'cluster_windows', 'phantom_gen', 'train', 'evaluate', 'gradcheck', 'COMMANDS']
