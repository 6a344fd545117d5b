"""
Window Clustering

k-means over radiologist-recommended (level, width) pairs, used to discover
representative views. Lloyd iterations with k-means++ seeding; distances are
Euclidean on the raw (level, width) plane.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from errors import ClusteringError, InvalidWindowError
from windowing import WindowSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowSample:
    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise InvalidWindowError(f"Sample width must be positive, got {self.width}")


@dataclass
class KMeansResult:
    """
    Output of cluster_windows

    Attributes:
        centroids: One WindowSpec per cluster
        assignments: Cluster index per input sample (input order)
        inertia: Sum of squared distances to the assigned centroid
        iterations: Lloyd iterations performed
        inertia_history: Inertia after every assignment step
    """
    centroids: List[WindowSpec]
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_history: List[float] = field(default_factory=list)

    def sorted_centroids(self) -> List[WindowSpec]:
        return sorted(self.centroids, key=lambda w: (w.level, w.width))


def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    closest = cdist(points, centers[0][None], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            index = int(np.argmax(closest))
        else:
            index = int(rng.choice(n, p=closest / total))
        centers.append(points[index])
        closest = np.minimum(closest, cdist(points, points[index][None], "sqeuclidean")[:, 0])
    return np.array(centers, dtype=np.float64)


def _assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    distances = cdist(points, centroids, "sqeuclidean")
    # argmin keeps the lowest cluster index on ties
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(points.shape[0]), labels]


def cluster_windows(
    samples: Sequence[WindowSample],
    k: int = 3,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> KMeansResult:
    """
    Cluster (level, width) samples with k-means

    The samples are put into a canonical (level, width) order before seeding,
    so the result does not depend on input order.

    Args:
        samples: Windows to cluster
        k: Number of clusters
        seed: Seed for k-means++ initialization
        max_iter: Iteration cap
        tol: Stop when no centroid moves more than this

    Returns:
        KMeansResult (assignments in input order)

    Raises:
        ClusteringError: Empty input, k < 1 or k > number of distinct samples
    """
    if not samples:
        raise ClusteringError("Cannot cluster an empty sample list")
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")

    points = np.array([[s.level, s.width] for s in samples], dtype=np.float64)
    n_distinct = np.unique(points, axis=0).shape[0]
    if k > n_distinct:
        raise ClusteringError(f"k={k} exceeds the number of distinct samples ({n_distinct})")

    order = np.lexsort((points[:, 1], points[:, 0]))
    canonical = points[order]

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(canonical, k, rng)

    history: List[float] = []
    labels = np.zeros(canonical.shape[0], dtype=np.int64)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        labels, sq_dist = _assign(canonical, centroids)
        history.append(float(sq_dist.sum()))

        new_centroids = centroids.copy()
        for cluster in range(k):
            members = canonical[labels == cluster]
            if members.shape[0]:
                new_centroids[cluster] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the sample farthest from its centroid
                far = int(np.argmax(sq_dist))
                new_centroids[cluster] = canonical[far]
                sq_dist[far] = 0.0
                logger.debug("Re-seeded empty cluster %d at sample %d", cluster, far)

        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break

    labels, sq_dist = _assign(canonical, centroids)
    inertia = float(sq_dist.sum())
    if not history or inertia != history[-1]:
        history.append(inertia)

    assignments = np.empty_like(labels)
    assignments[order] = labels
    logger.debug("k-means converged after %d iterations, inertia %.6g", iterations, inertia)
    return KMeansResult(
        centroids=[WindowSpec(float(c[0]), float(c[1])) for c in centroids],
        assignments=assignments,
        inertia=inertia,
        iterations=iterations,
        inertia_history=history,
    )


def load_window_samples(path) -> List[WindowSample]:
    """
    Read `level,width` lines (no header); blank lines and '#' comments ignored

    Raises:
        ClusteringError: Unparsable rows
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, header=None, names=["level", "width"], comment="#",
                            skip_blank_lines=True, dtype=float)
    except (ValueError, pd.errors.ParserError) as e:
        raise ClusteringError(f"Failed to read window samples from {path}: {e}")
    except FileNotFoundError:
        raise ClusteringError(f"Window sample file not found: {path}")
    if frame.isna().any().any():
        raise ClusteringError(f"{path}: every row needs a level and a width")
    return [WindowSample(float(row.level), float(row.width)) for row in frame.itertuples(index=False)]


def format_centroids(result: KMeansResult) -> str:
    """Centroids as `level:width` lines sorted by level"""
    return "".join(f"{w.level!r}:{w.width!r}\n" for w in result.sorted_centroids())
