"""
Cluster Windows - k-means over recommended (level, width) pairs
"""

import logging
from pathlib import Path

from config import EXIT_OK, load_run_config
from window_clustering import cluster_windows, format_centroids, load_window_samples

logger = logging.getLogger(__name__)

NAME = "cluster-windows"


def add_parser(subparsers):
    parser = subparsers.add_parser(NAME, help="Cluster level,width samples into representative windows")
    parser.add_argument("--input", required=True, help="CSV of level,width lines (no header)")
    parser.add_argument("--config", help="Run config file (key = value)")
    parser.add_argument("--k", type=int, dest="kmeans_k", help="Number of clusters (default 3)")
    parser.add_argument("--seed", type=int, help="Seed for k-means++ initialization (default 0)")
    parser.add_argument("--max-iter", type=int, dest="kmeans_max_iter", help="Iteration cap (default 300)")
    parser.add_argument("--out", help="Optional output directory for centroids.txt")
    parser.set_defaults(run=run)
    return parser


def run(args) -> int:
    config = load_run_config(args.config, {
        "kmeans_k": args.kmeans_k,
        "seed": args.seed,
        "kmeans_max_iter": args.kmeans_max_iter,
    })
    samples = load_window_samples(args.input)
    result = cluster_windows(samples, k=config.kmeans_k, seed=config.seed,
                             max_iter=config.kmeans_max_iter, tol=config.kmeans_tol)
    text = format_centroids(result)
    logger.info("%d samples, %d iterations, inertia %.6g", len(samples), result.iterations, result.inertia)
    print(text, end="")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "centroids.txt").write_text(text, encoding="utf-8")
        config.write_echo(out)
    return EXIT_OK
