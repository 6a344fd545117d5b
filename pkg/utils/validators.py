"""
Validation Utilities

Provides validation functions for run configuration values, volumes and labels.
Every validator returns a tuple (is_valid, error_message).
"""

import math
from typing import Any, Tuple

import numpy as np

from config import (
    HU_CLINICAL_RANGE,
    POSITION_CLASSES,
    VALID_N_CTX,
)


def validate_positive(value: Any) -> Tuple[bool, str]:
    """
    Validate a strictly positive finite number

    Args:
        value: Number to check

    Returns:
        Tuple of (is_valid, error_message)
    """
    try:
        number = float(value)
    except (TypeError, ValueError):
        return False, f"Expected a number, got {value!r}"
    if not math.isfinite(number) or number <= 0:
        return False, f"Must be positive, got {value}"
    return True, ""


def validate_non_negative(value: Any) -> Tuple[bool, str]:
    try:
        number = float(value)
    except (TypeError, ValueError):
        return False, f"Expected a number, got {value!r}"
    if not math.isfinite(number) or number < 0:
        return False, f"Must be non-negative, got {value}"
    return True, ""


def validate_probability(value: Any) -> Tuple[bool, str]:
    """Validate a number in [0, 1]"""
    is_valid, message = validate_non_negative(value)
    if not is_valid:
        return is_valid, message
    if float(value) > 1:
        return False, f"Must be within [0, 1], got {value}"
    return True, ""


def validate_momentum(value: Any) -> Tuple[bool, str]:
    is_valid, message = validate_non_negative(value)
    if not is_valid:
        return is_valid, message
    if float(value) >= 1:
        return False, f"Momentum must be in [0, 1), got {value}"
    return True, ""


def validate_n_ctx(value: Any) -> Tuple[bool, str]:
    """
    Validate the number of context slices

    Returns:
        Tuple of (is_valid, error_message)
    """
    if value not in VALID_N_CTX:
        return False, f"n_ctx must be one of {VALID_N_CTX}, got {value}"
    return True, ""


def validate_choice(value: Any, choices: Tuple[str, ...]) -> Tuple[bool, str]:
    if value not in choices:
        return False, f"Must be one of: {', '.join(choices)}"
    return True, ""


def validate_positive_tuple(value: Any) -> Tuple[bool, str]:
    if not isinstance(value, tuple) or not value:
        return False, "Expected a non-empty list"
    for item in value:
        is_valid, message = validate_positive(item)
        if not is_valid:
            return is_valid, message
    return True, ""


def validate_increasing(value: Any) -> Tuple[bool, str]:
    """Validate a non-empty, strictly increasing list of positive numbers"""
    is_valid, message = validate_positive_tuple(value)
    if not is_valid:
        return is_valid, message
    if any(b <= a for a, b in zip(value, value[1:])):
        return False, f"Values must be strictly increasing, got {value}"
    return True, ""


def validate_position_label(class_index: int, p: float) -> Tuple[bool, str]:
    """
    Validate a position label

    Args:
        class_index: Discrete zone index
        p: Continuous position

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not (0 <= class_index < len(POSITION_CLASSES)):
        return False, f"Class index must be in [0, {len(POSITION_CLASSES) - 1}], got {class_index}"
    if not (0.0 <= p <= 1.0):
        return False, f"Continuous position must be within [0, 1], got {p}"
    return True, ""


def validate_hu_range(voxels: np.ndarray) -> Tuple[bool, str]:
    """
    Check voxels against the clinically meaningful HU range

    This is a warning-level check; storage range is enforced by the dtype.
    """
    low, high = HU_CLINICAL_RANGE
    if voxels.size == 0:
        return True, ""
    vmin, vmax = int(voxels.min()), int(voxels.max())
    if vmin < low or vmax > high:
        return False, f"HU values [{vmin}, {vmax}] exceed clinical range [{low}, {high}]"
    return True, ""


# Per-key rules for RunConfig values
_RUN_CONFIG_RULES = {
    "seed": lambda v: (True, "") if v >= 0 else (False, f"Seed must be >= 0, got {v}"),
    "epochs": lambda v: (True, "") if v >= 1 else (False, f"Epochs must be >= 1, got {v}"),
    "batch_size": validate_positive,
    "learning_rate": validate_non_negative,
    "momentum": validate_momentum,
    "decay_factor": validate_positive,
    "precision": lambda v: validate_choice(v, ("test", "fast")),
    "lambda_pos": validate_non_negative,
    "lambda_reg": validate_non_negative,
    "views": lambda v: validate_choice(v, ("single", "multi")),
    "attention": lambda v: validate_choice(v, ("concat", "cbam")),
    "position": lambda v: validate_choice(v, ("on", "off")),
    "n_ctx": validate_n_ctx,
    "reduction": validate_positive,
    "stages": validate_positive_tuple,
    "stage_stride": validate_positive,
    "pyramid_channels": validate_positive,
    "pyramid_levels": validate_positive,
    "anchor_scales": validate_increasing,
    "aspect_ratios": validate_positive_tuple,
    "positive_iou": validate_probability,
    "negative_iou": validate_probability,
    "target_z_mm": validate_positive,
    "resize_long_side": validate_positive,
    "flip_prob": validate_probability,
    "score_thresh": validate_probability,
    "nms_iou": validate_probability,
    "max_detections": validate_positive,
    "eval_iou": validate_probability,
    "report_rates": validate_increasing,
    "kmeans_k": validate_positive,
    "kmeans_max_iter": validate_positive,
    "kmeans_tol": validate_non_negative,
}


def validate_run_config_value(key: str, value: Any) -> Tuple[bool, str]:
    """
    Validate one RunConfig value by key

    Returns:
        Tuple of (is_valid, error_message)
    """
    rule = _RUN_CONFIG_RULES.get(key)
    if rule is None:
        return True, ""
    return rule(value)
