"""
FROC Evaluation

Sensitivity as a function of average false positives per image, reported at
fixed rates (0.5, 1, 2, 3, 4 FPs per image).

Matching: detections are processed by descending score; a detection is a true
positive when its best-IoU unmatched ground truth reaches the IoU threshold.
Because processing is score-ordered, the matches at any score threshold are a
prefix of the full matching, so one pass yields every operating point.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import EVAL_IOU, REPORT_RATES
from detect_post import Box, Detection, iou_matrix, read_detection_file, read_gt_file
from errors import EvaluationError

logger = logging.getLogger(__name__)


@dataclass
class EvalCase:
    image_id: str
    gt_boxes: List[Box] = field(default_factory=list)
    detections: List[Detection] = field(default_factory=list)


@dataclass
class FrocCurve:
    """
    Operating points, one per distinct detection score (descending thresholds)

    Attributes:
        thresholds: Score threshold of each point
        fps_per_image: Average false positives per image at the threshold
        sensitivity: Fraction of gts matched at the threshold
        n_images: Number of evaluated images
        n_gt: Number of ground-truth lesions
    """
    thresholds: np.ndarray
    fps_per_image: np.ndarray
    sensitivity: np.ndarray
    n_images: int
    n_gt: int

    def sensitivity_at(self, rate: float) -> float:
        """Max sensitivity over points with fps_per_image <= rate (0 if none)"""
        eligible = self.sensitivity[self.fps_per_image <= rate]
        return float(eligible.max()) if eligible.size else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "threshold": self.thresholds,
            "fps_per_image": self.fps_per_image,
            "sensitivity": self.sensitivity,
        })


@dataclass(frozen=True)
class SensitivityReport:
    """Sensitivities (fractions in [0, 1]) at the report rates"""
    rates: Tuple[float, ...]
    sensitivities: Tuple[float, ...]


def match_detections(case: EvalCase, iou_thresh: float = EVAL_IOU) -> np.ndarray:
    """
    Greedy TP/FP flags for one image

    Args:
        case: Image with gt boxes and detections
        iou_thresh: Minimum IoU for a true positive

    Returns:
        Boolean TP flag per detection, aligned with case.detections
    """
    n_det = len(case.detections)
    flags = np.zeros(n_det, dtype=bool)
    if n_det == 0 or not case.gt_boxes:
        return flags
    det_boxes = np.stack([d.box.to_row() for d in case.detections])
    gt_boxes = np.stack([b.to_row() for b in case.gt_boxes])
    overlaps = iou_matrix(det_boxes, gt_boxes)
    scores = np.array([d.score for d in case.detections])
    matched = np.zeros(len(case.gt_boxes), dtype=bool)
    for index in np.lexsort((np.arange(n_det), -scores)):
        candidates = np.where(matched, -1.0, overlaps[index])
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_thresh:
            matched[best] = True
            flags[index] = True
    return flags


def froc(cases: Sequence[EvalCase], report_rates: Sequence[float] = REPORT_RATES,
         iou_thresh: float = EVAL_IOU) -> Tuple[FrocCurve, SensitivityReport]:
    """
    Sweep the score threshold over all distinct positive detection scores

    Raises:
        EvaluationError: No images or no ground truths
    """
    if not cases:
        raise EvaluationError("FROC needs at least one image")
    n_gt = sum(len(case.gt_boxes) for case in cases)
    if n_gt == 0:
        raise EvaluationError("FROC needs at least one ground-truth lesion")

    scores, hits = [], []
    for case in cases:
        flags = match_detections(case, iou_thresh)
        for det, flag in zip(case.detections, flags):
            # zero-score detections are never emitted
            if det.score > 0:
                scores.append(det.score)
                hits.append(flag)

    scores_arr = np.array(scores, dtype=np.float64)
    hits_arr = np.array(hits, dtype=bool)
    order = np.argsort(-scores_arr, kind="stable")
    scores_arr, hits_arr = scores_arr[order], hits_arr[order]
    tp = np.cumsum(hits_arr)
    fp = np.cumsum(~hits_arr)
    # last index of every group of equal scores
    ends = np.flatnonzero(np.append(scores_arr[1:] != scores_arr[:-1], True)) if scores_arr.size else np.array([], int)

    curve = FrocCurve(
        thresholds=scores_arr[ends],
        fps_per_image=fp[ends] / len(cases),
        sensitivity=tp[ends] / n_gt,
        n_images=len(cases),
        n_gt=n_gt,
    )
    report_values = SensitivityReport(tuple(report_rates), tuple(curve.sensitivity_at(r) for r in report_rates))
    logger.debug("FROC over %d images, %d gts, %d operating points", len(cases), n_gt, ends.size)
    return curve, report_values


def fps_at_sensitivity(curve: FrocCurve, target: float) -> Optional[float]:
    """Smallest FP rate at which the curve reaches the target sensitivity (None if never)"""
    reached = curve.fps_per_image[curve.sensitivity >= target]
    return float(reached.min()) if reached.size else None


def report(curves: Union[Dict[str, SensitivityReport], Sequence[Tuple[str, SensitivityReport]]],
           rates: Sequence[float] = REPORT_RATES) -> str:
    """
    Text table: one row per method, sensitivities in percent with two decimals

    Example:
        FPs per image     0.5       1       2       3       4
        Ours            73.83   81.82   87.60   89.57   91.30
    """
    rows = list(curves.items()) if isinstance(curves, dict) else list(curves)
    label = "FPs per image"
    name_width = max([len(label)] + [len(name) for name, _ in rows])
    header = label.ljust(name_width) + "".join(f"{rate:>8g}" for rate in rates)
    lines = [header.rstrip()]
    for name, values in rows:
        lookup = dict(zip(values.rates, values.sensitivities))
        cells = []
        for rate in rates:
            if rate not in lookup:
                raise EvaluationError(f"Method {name!r} has no sensitivity at {rate:g} FPs per image")
            cells.append(f"{lookup[rate] * 100.0:>8.2f}")
        lines.append(name.ljust(name_width) + "".join(cells))
    return "\n".join(lines) + "\n"


# =============================================================================
# FILE HELPERS
# =============================================================================

def build_cases(gt: Dict[str, List[Box]], detections: Dict[str, List[Detection]]) -> List[EvalCase]:
    """One case per image id found in either file, sorted by id"""
    image_ids = sorted(set(gt) | set(detections))
    return [EvalCase(image_id, list(gt.get(image_id, [])), list(detections.get(image_id, []))) for image_id in image_ids]


def load_cases(gt_path, detections_path) -> List[EvalCase]:
    return build_cases(read_gt_file(gt_path), read_detection_file(detections_path))


def write_curve_csv(curve: FrocCurve, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve.to_frame().to_csv(path, index=False, float_format="%.6f")
    return path
