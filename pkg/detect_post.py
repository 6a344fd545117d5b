"""
Detection post-processing: anchors, box geometry, decoding and NMS

Boxes are (x1, y1, x2, y2) in pixels. Vectorized helpers work on (N, 4)
float arrays; the Box/Detection dataclasses are the record-level view used by
evaluation and file I/O.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import ANCHOR_SCALES, ASPECT_RATIOS, MAX_LOG_SCALE, NEGATIVE_IOU, NMS_IOU, POSITIVE_IOU
from errors import AnchorError, EvaluationError, ShapeError

logger = logging.getLogger(__name__)


# =============================================================================
# DATA TYPES
# =============================================================================

@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ShapeError(f"Box corners out of order: ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_row(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "Box":
        return cls(float(row[0]), float(row[1]), float(row[2]), float(row[3]))


@dataclass(frozen=True)
class AnchorSet:
    """
    Anchor side lengths (one per pyramid level) and aspect ratios (width / height)
    """
    scales: Tuple[float, ...] = ANCHOR_SCALES
    aspect_ratios: Tuple[float, ...] = ASPECT_RATIOS

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        ratios = tuple(float(r) for r in self.aspect_ratios)
        if not scales or any(b <= a for a, b in zip(scales, scales[1:])):
            raise AnchorError(f"Anchor scales must be strictly increasing, got {scales}")
        if not ratios or any(r <= 0 for r in ratios):
            raise AnchorError(f"Aspect ratios must be positive, got {ratios}")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "aspect_ratios", ratios)

    @property
    def anchors_per_position(self) -> int:
        return len(self.aspect_ratios)

    def scale_for_level(self, level: int) -> float:
        if level >= len(self.scales):
            raise AnchorError(f"No anchor scale for pyramid level {level} (scales {self.scales})")
        return self.scales[level]


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise EvaluationError(f"Detection score must be in [0, 1], got {self.score}")


@dataclass
class AnchorAssignment:
    """
    Per-anchor training targets

    Attributes:
        labels: 1 positive, 0 negative, -1 ignored
        matched_gt: Index of the matched gt box (-1 when there is none)
        max_iou: Best IoU of each anchor against any gt
    """
    labels: np.ndarray
    matched_gt: np.ndarray
    max_iou: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == 1).sum())


# =============================================================================
# ANCHORS
# =============================================================================

def generate_anchors(feature_shapes: Sequence[Tuple[int, int]], anchor_set: AnchorSet,
                     strides: Sequence[int]) -> np.ndarray:
    """
    Anchors for every pyramid level

    Each level l uses scale anchor_set.scales[l]; anchors are centered on the
    receptive cell center ((col + 0.5) * stride, (row + 0.5) * stride) and are
    area-preserving: w = s * sqrt(r), h = s / sqrt(r).

    Args:
        feature_shapes: (H, W) per level
        anchor_set: Scales and ratios
        strides: Pixel stride per level

    Returns:
        (N, 4) boxes ordered level, row, column, ratio

    Raises:
        AnchorError: Missing scale/stride for a level, or no anchors at all
    """
    if len(strides) != len(feature_shapes):
        raise AnchorError(f"Need one stride per level, got {len(strides)} for {len(feature_shapes)} levels")
    ratios = np.array(anchor_set.aspect_ratios, dtype=np.float64)
    levels: List[np.ndarray] = []
    for level, ((height, width), stride) in enumerate(zip(feature_shapes, strides)):
        scale = anchor_set.scale_for_level(level)
        half_w = scale * np.sqrt(ratios) / 2.0
        half_h = scale / np.sqrt(ratios) / 2.0
        rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        cx = ((cols.reshape(-1) + 0.5) * stride)[:, None]
        cy = ((rows.reshape(-1) + 0.5) * stride)[:, None]
        boxes = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)
        levels.append(boxes.reshape(-1, 4))
    anchors = np.concatenate(levels, axis=0) if levels else np.zeros((0, 4))
    if anchors.shape[0] == 0:
        raise AnchorError("No anchors generated")
    return anchors


# =============================================================================
# BOX GEOMETRY
# =============================================================================

def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes; 0 where the union is empty"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        result = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return result


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes"""
    return float(iou_matrix(a.to_row(), b.to_row())[0, 0])


def encode_boxes(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """
    Regression targets (dx, dy, dw, dh) of gt boxes relative to anchors

    dx = (gx - ax) / aw, dy = (gy - ay) / ah, dw = log(gw / aw), dh = log(gh / ah)
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2.0
    ay = anchors[:, 1] + ah / 2.0
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + gw / 2.0
    gy = gt[:, 1] + gh / 2.0
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray,
                 image_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Apply (dx, dy, dw, dh) deltas to anchors

    Args:
        anchors: (N, 4)
        deltas: (N, 4)
        image_size: (height, width) to clamp to, or None

    Returns:
        (N, 4) decoded boxes
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if anchors.shape != deltas.shape or anchors.ndim != 2 or anchors.shape[1] != 4:
        raise ShapeError(f"decode_boxes: anchors {anchors.shape} vs deltas {deltas.shape}")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2.0
    ay = anchors[:, 1] + ah / 2.0
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    boxes = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)
    if image_size is not None:
        height, width = image_size
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    return boxes


def flip_boxes_horizontal(boxes: np.ndarray, image_width: float) -> np.ndarray:
    """Mirror boxes about the vertical center line of an image"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([image_width - boxes[:, 2], boxes[:, 1], image_width - boxes[:, 0], boxes[:, 3]], axis=1)


# =============================================================================
# ASSIGNMENT AND SUPPRESSION
# =============================================================================

def assign_anchors(anchors: np.ndarray, gt_boxes: np.ndarray,
                   positive_iou: float = POSITIVE_IOU, negative_iou: float = NEGATIVE_IOU,
                   match_low_quality: bool = True) -> AnchorAssignment:
    """
    IoU-based anchor labels

    Anchors with IoU >= positive_iou are positive, < negative_iou negative,
    the rest ignored. With match_low_quality, each gt's best anchors (ties
    included) are also positive.

    Raises:
        AnchorError: No anchors
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    if n == 0:
        raise AnchorError("Cannot assign targets without anchors")
    if gt_boxes.shape[0] == 0:
        return AnchorAssignment(np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64), np.zeros(n))

    overlaps = iou_matrix(anchors, gt_boxes)
    matched = overlaps.argmax(axis=1)
    best = overlaps[np.arange(n), matched]
    labels = np.full(n, -1, dtype=np.int64)
    labels[best < negative_iou] = 0
    labels[best >= positive_iou] = 1

    if match_low_quality:
        best_per_gt = overlaps.max(axis=0)
        for g, value in enumerate(best_per_gt):
            if value <= 0:
                continue
            for a in np.flatnonzero(overlaps[:, g] == value):
                labels[a] = 1
                matched[a] = g

    matched = np.where(labels == 1, matched, -1)
    return AnchorAssignment(labels=labels, matched_gt=matched, max_iou=best)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = NMS_IOU) -> np.ndarray:
    """
    Greedy NMS on arrays

    Returns:
        Indices of survivors, by descending score (ties: earlier index first)
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(scores.size), -scores))
    keep: List[int] = []
    while order.size:
        current = int(order[0])
        keep.append(current)
        rest = order[1:]
        if not rest.size:
            break
        overlaps = iou_matrix(boxes[current], boxes[rest])[0]
        order = rest[overlaps <= iou_thresh]
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thresh: float = NMS_IOU) -> List[Detection]:
    """Greedy non-maximum suppression; output sorted by descending score"""
    if not dets:
        return []
    boxes = np.stack([d.box.to_row() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thresh)]


# =============================================================================
# TEXT FORMATS
# =============================================================================

def format_detection_lines(records: Iterable[Tuple[str, Detection]]) -> str:
    """`image_id score x1 y1 x2 y2` lines"""
    lines = []
    for image_id, det in records:
        b = det.box
        lines.append(f"{image_id} {det.score:.6f} {b.x1:.3f} {b.y1:.3f} {b.x2:.3f} {b.y2:.3f}\n")
    return "".join(lines)


def format_gt_lines(records: Iterable[Tuple[str, Box]]) -> str:
    """`image_id x1 y1 x2 y2` lines"""
    return "".join(f"{image_id} {b.x1:.3f} {b.y1:.3f} {b.x2:.3f} {b.y2:.3f}\n" for image_id, b in records)


def _read_table(path, columns: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"File not found: {path}")
    try:
        frame = pd.read_csv(path, sep=r"\s+", header=None, names=columns, comment="#",
                            dtype={columns[0]: str}, engine="python")
        if frame.isna().any().any():
            raise EvaluationError(f"{path}: every line needs {len(columns)} fields ({' '.join(columns)})")
        frame[columns[1:]] = frame[columns[1:]].apply(pd.to_numeric, errors="raise")
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)
    except EvaluationError:
        raise
    except (ValueError, TypeError, pd.errors.ParserError) as e:
        raise EvaluationError(f"Failed to parse {path}: {e}")
    return frame


def read_gt_file(path) -> Dict[str, List[Box]]:
    """Read `image_id x1 y1 x2 y2` lines, grouped by image"""
    frame = _read_table(path, ["image_id", "x1", "y1", "x2", "y2"])
    grouped: Dict[str, List[Box]] = {}
    for row in frame.itertuples(index=False):
        grouped.setdefault(str(row.image_id), []).append(Box(float(row.x1), float(row.y1), float(row.x2), float(row.y2)))
    return grouped


def read_detection_file(path) -> Dict[str, List[Detection]]:
    """Read `image_id score x1 y1 x2 y2` lines, grouped by image"""
    frame = _read_table(path, ["image_id", "score", "x1", "y1", "x2", "y2"])
    grouped: Dict[str, List[Detection]] = {}
    for row in frame.itertuples(index=False):
        box = Box(float(row.x1), float(row.y1), float(row.x2), float(row.y2))
        grouped.setdefault(str(row.image_id), []).append(Detection(box, float(row.score)))
    return grouped
