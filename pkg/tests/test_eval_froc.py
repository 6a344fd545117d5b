"""Tests for :mod:`eval_froc`"""

import numpy as np
import pandas as pd
import pytest

from config import REPORT_RATES
from detect_post import Box, Detection, iou
from errors import EvaluationError
from eval_froc import (
    EvalCase,
    SensitivityReport,
    build_cases,
    fps_at_sensitivity,
    froc,
    match_detections,
    report,
    write_curve_csv,
)


def _random_box(rng, extent=40.0):
    x, y = rng.uniform(0, extent, 2)
    w, h = rng.uniform(2, 12, 2)
    return Box(float(x), float(y), float(x + w), float(y + h))


def _random_case(rng, image_id, n_gt, n_det):
    gts = [_random_box(rng) for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.5:
            # jitter a gt so matches actually happen
            g = gts[rng.integers(len(gts))]
            dx, dy = rng.normal(0, 1.5, 2)
            box = Box(g.x1 + dx, g.y1 + dy, g.x2 + dx, g.y2 + dy)
        else:
            box = _random_box(rng)
        dets.append(Detection(box, float(np.round(rng.random(), 1))))
    return EvalCase(image_id, gts, dets)


def _greedy_oracle(case, thresh):
    order = sorted(range(len(case.detections)), key=lambda i: (-case.detections[i].score, i))
    matched = [False] * len(case.gt_boxes)
    flags = [False] * len(case.detections)
    for i in order:
        best, best_iou = -1, -1.0
        for g, gt in enumerate(case.gt_boxes):
            if matched[g]:
                continue
            value = iou(case.detections[i].box, gt)
            if value > best_iou:
                best, best_iou = g, value
        if best >= 0 and best_iou >= thresh:
            matched[best] = True
            flags[i] = True
    return flags


def _sweep_oracle(cases, thresh):
    n_gt = sum(len(c.gt_boxes) for c in cases)
    scores = sorted({d.score for c in cases for d in c.detections if d.score > 0}, reverse=True)
    fps, sens = [], []
    for t in scores:
        tp = fp = 0
        for c in cases:
            kept = EvalCase(c.image_id, c.gt_boxes, [d for d in c.detections if d.score >= t])
            hits = int(sum(_greedy_oracle(kept, thresh)))
            tp += hits
            fp += len(kept.detections) - hits
        fps.append(fp / len(cases))
        sens.append(tp / n_gt)
    return np.array(scores), np.array(fps), np.array(sens)


def _perfect_cases():
    return [
        EvalCase("a", [Box(0, 0, 10, 10)], [Detection(Box(0, 0, 10, 10), 0.9)]),
        EvalCase("b", [Box(5, 5, 9, 9), Box(20, 20, 30, 30)],
                 [Detection(Box(5, 5, 9, 9), 0.8), Detection(Box(20, 20, 30, 30), 0.7)]),
    ]


# =============================================================================
# MATCHING
# =============================================================================

def test_perfect_detection_is_a_true_positive():
    case = EvalCase("img", [Box(0, 0, 10, 10)], [Detection(Box(0, 0, 10, 10), 0.5)])
    assert match_detections(case).tolist() == [True]


def test_each_gt_matches_once():
    case = EvalCase("img", [Box(0, 0, 10, 10)],
                    [Detection(Box(1, 0, 11, 10), 0.4), Detection(Box(0, 1, 10, 11), 0.9)])
    assert match_detections(case).tolist() == [False, True]


def test_matching_equals_greedy_oracle():
    rng = np.random.default_rng(0)
    for trial in range(200):
        case = _random_case(rng, "img", 10, 20)
        thresh = float(rng.choice([0.3, 0.5]))
        assert match_detections(case, thresh).tolist() == _greedy_oracle(case, thresh)


# =============================================================================
# FROC
# =============================================================================

def test_perfect_detector():
    curve, values = froc(_perfect_cases())
    assert values.sensitivities == (1.0,) * 5
    assert report({"perfect": values}).splitlines()[1] == "perfect" + " " * 6 + "  100.00" * 5


def test_no_detections():
    _, values = froc([EvalCase("a", [Box(0, 0, 4, 4)], [])])
    assert values.sensitivities == (0.0,) * 5


def test_froc_equals_threshold_sweep():
    rng = np.random.default_rng(1)
    for trial in range(100):
        cases = [_random_case(rng, f"img{i}", int(rng.integers(0, 4)), int(rng.integers(0, 8))) for i in range(5)]
        if not any(c.gt_boxes for c in cases):
            cases[0].gt_boxes.append(_random_box(rng))
        curve, _ = froc(cases)
        thresholds, fps, sens = _sweep_oracle(cases, 0.5)
        np.testing.assert_array_equal(curve.thresholds, thresholds)
        np.testing.assert_array_equal(curve.fps_per_image, fps)
        np.testing.assert_array_equal(curve.sensitivity, sens)


def test_sensitivity_is_monotone_and_bounded():
    rng = np.random.default_rng(2)
    cases = [_random_case(rng, f"img{i}", 3, 10) for i in range(8)]
    curve, values = froc(cases)
    assert np.all(np.diff(curve.sensitivity) >= 0)
    assert np.all(np.diff(curve.fps_per_image) >= 0)
    assert all(0.0 <= s <= 1.0 for s in values.sensitivities)
    assert list(values.sensitivities) == sorted(values.sensitivities)


def test_zero_score_detections_change_nothing():
    rng = np.random.default_rng(3)
    cases = [_random_case(rng, f"img{i}", 2, 6) for i in range(6)]
    _, before = froc(cases)
    for case in cases:
        case.detections.append(Detection(_random_box(rng), 0.0))
        case.detections.append(Detection(case.gt_boxes[0], 0.0))
    _, after = froc(cases)
    assert before == after


def test_duplicating_images_keeps_the_curve():
    rng = np.random.default_rng(4)
    cases = [_random_case(rng, f"img{i}", 2, 5) for i in range(5)]
    doubled = cases + [EvalCase(c.image_id + "_copy", list(c.gt_boxes), list(c.detections)) for c in cases]
    a, _ = froc(cases)
    b, _ = froc(doubled)
    np.testing.assert_array_equal(a.fps_per_image, b.fps_per_image)
    np.testing.assert_array_equal(a.sensitivity, b.sensitivity)


def test_step_interpolation():
    cases = [
        EvalCase("a", [Box(0, 0, 10, 10), Box(20, 20, 30, 30)],
                 [Detection(Box(0, 0, 10, 10), 0.9), Detection(Box(50, 50, 60, 60), 0.8),
                  Detection(Box(20, 20, 30, 30), 0.7)]),
    ]
    curve, values = froc(cases, report_rates=(0.5, 1.0))
    # one FP per image is needed before the second lesion is found
    assert values.sensitivities == (0.5, 1.0)
    assert fps_at_sensitivity(curve, 1.0) == 1.0
    assert fps_at_sensitivity(curve, 0.5) == 0.0


def test_fps_at_unreachable_sensitivity():
    curve, _ = froc([EvalCase("a", [Box(0, 0, 4, 4), Box(10, 10, 14, 14)], [Detection(Box(0, 0, 4, 4), 0.6)])])
    assert fps_at_sensitivity(curve, 1.0) is None


@pytest.mark.parametrize("cases", [[], [EvalCase("a", [], [Detection(Box(0, 0, 1, 1), 0.5)])]])
def test_froc_errors(cases):
    with pytest.raises(EvaluationError):
        froc(cases)


# =============================================================================
# REPORT AND FILES
# =============================================================================

def test_report_reproduces_table_row():
    percentages = (73.83, 81.82, 87.60, 89.57, 91.30)
    values = SensitivityReport(REPORT_RATES, tuple(p / 100.0 for p in percentages))
    table = report([("Ours", values)])
    assert table == (
        "FPs per image     0.5       1       2       3       4\n"
        "Ours" + " " * 9 + "   73.83   81.82   87.60   89.57   91.30\n"
    )


def test_empty_report_is_header_only():
    assert report({}) == "FPs per image     0.5       1       2       3       4\n"


def test_report_rejects_missing_rate():
    with pytest.raises(EvaluationError):
        report({"partial": SensitivityReport((1.0,), (0.5,))})


def test_build_cases_and_curve_csv(tmp_path):
    cases = build_cases({"b": [Box(0, 0, 4, 4)]}, {"a": [Detection(Box(0, 0, 1, 1), 0.3)],
                                                  "b": [Detection(Box(0, 0, 4, 4), 0.9)]})
    assert [c.image_id for c in cases] == ["a", "b"]
    curve, _ = froc(cases)
    frame = pd.read_csv(write_curve_csv(curve, tmp_path / "curve.csv"))
    assert list(frame.columns) == ["threshold", "fps_per_image", "sensitivity"]
    assert frame["sensitivity"].tolist() == [1.0, 1.0]
    assert frame["fps_per_image"].tolist() == [0.0, 0.5]
