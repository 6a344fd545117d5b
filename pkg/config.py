"""
Configuration settings for the MVP lesion detection toolkit

This module contains all configuration constants and settings used across the project.
Centralized configuration makes it easy to modify settings without changing code in multiple places.
Run-level tunables are read from a `key = value` file into a RunConfig (see helpers below).
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from errors import ConfigError


# =============================================================================
# VOLUME FORMAT CONFIGURATION
# =============================================================================

# HUVOL on-disk format (text header + raw little-endian int16, z-major)
HUVOL_MAGIC = "HUVOL 1"

# Float image interchange format used by the `window` subcommand
FIMG_MAGIC = "FIMG 1"

# Clinically meaningful HU range (values outside are flagged, not rejected)
HU_CLINICAL_RANGE = (-1024, 3071)

# int16 storage range
HU_STORAGE_RANGE = (-32768, 32767)

# Slice interval after z-normalization (mm)
TARGET_Z_MM = 2.0

# In-plane resize target (long side, pixels)
RESIZE_LONG_SIDE = 800

# Allowed 3D-context sizes (slices stacked as channels)
VALID_N_CTX = (3, 9)


# =============================================================================
# WINDOW CONFIGURATION
# =============================================================================

# Clustered views as (level, width): soft tissue, lung, bone/brain/mediastinum
DEFAULT_WINDOWS = (
    (50.0, 449.0),
    (-505.0, 1980.0),
    (446.0, 1960.0),
)

# Wide single window of the single-view baseline, as (level, width)
SINGLE_WINDOW = (1024.0, 4096.0)


# =============================================================================
# POSITION CONFIGURATION
# =============================================================================

# Discrete body zones along z, in class-index order
POSITION_CLASSES = ("chest", "abdomen", "pelvis")

# Upper boundaries of the zones on the normalized z axis (last one is 1.0)
ZONE_BOUNDARIES = (1.0 / 3.0, 2.0 / 3.0, 1.0)


# =============================================================================
# DETECTION CONFIGURATION
# =============================================================================

ANCHOR_SCALES = (16, 32, 64, 128, 256)
ASPECT_RATIOS = (0.5, 1.0, 2.0)

# Anchor assignment thresholds
POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3

# Post-processing
SCORE_THRESH = 0.05
NMS_IOU = 0.5
MAX_DETECTIONS = 100

# Clamp for exp() of size deltas when decoding boxes
MAX_LOG_SCALE = 4.135166556742356  # log(1000 / 16)

# Prior probability used to initialize the objectness bias
OBJECTNESS_PRIOR = 0.01


# =============================================================================
# EVALUATION CONFIGURATION
# =============================================================================

REPORT_RATES = (0.5, 1.0, 2.0, 3.0, 4.0)
EVAL_IOU = 0.5


# =============================================================================
# VISUALIZATION CONFIGURATION
# =============================================================================

# FROC chart line colors, cycled per method
CHART_COLORS = ("#8b5cf6", "#22c55e", "#f59e0b", "#ef4444", "#3b82f6")

# Case-study overlays: ground truth green, predictions red
OVERLAY_COLORS = {
    "ground_truth": (34, 197, 94),
    "prediction": (239, 68, 68),
}

# Upscaling factor for PNG previews of small images
PREVIEW_UPSCALE = 4


# =============================================================================
# CLI CONFIGURATION
# =============================================================================

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

EFFECTIVE_CONFIG_FILENAME = "effective_config.txt"

# Phantom spec shipped with the repository
DEFAULT_PHANTOM_SPEC = Path(__file__).parent / "assets" / "phantom_default.conf"


# =============================================================================
# DEVELOPMENT/DEBUG SETTINGS
# =============================================================================

# Enable debug mode (DEBUG level logging)
DEBUG_MODE = False

# Enable verbose logging (INFO level logging)
VERBOSE_LOGGING = True

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# =============================================================================
# RUN CONFIGURATION (every tunable, with its default)
# =============================================================================

RUN_CONFIG_DEFAULTS: Dict[str, Any] = {
    # seeding / schedule
    "seed": 0,
    "epochs": 13,
    "batch_size": 8,
    "learning_rate": 0.002,
    "momentum": 0.9,
    "decay_epochs": (10, 12),
    "decay_factor": 0.1,
    "precision": "fast",
    # loss weights
    "lambda_pos": 1.0,
    "lambda_reg": 1.0,
    # ablation axes
    "views": "multi",
    "attention": "cbam",
    "position": "on",
    "n_ctx": 3,
    # backbone
    "reduction": 4,
    "stages": (8, 16, 32),
    "stage_stride": 2,
    "pyramid_channels": 32,
    "pyramid_levels": 2,
    # anchors / matching
    "anchor_scales": ANCHOR_SCALES,
    "aspect_ratios": ASPECT_RATIOS,
    "positive_iou": POSITIVE_IOU,
    "negative_iou": NEGATIVE_IOU,
    # preprocessing / augmentation
    "target_z_mm": TARGET_Z_MM,
    "resize_long_side": 64,
    "flip_prob": 0.5,
    # post-processing / evaluation
    "score_thresh": SCORE_THRESH,
    "nms_iou": NMS_IOU,
    "max_detections": MAX_DETECTIONS,
    "eval_iou": EVAL_IOU,
    "report_rates": REPORT_RATES,
    # window clustering
    "kmeans_k": 3,
    "kmeans_max_iter": 300,
    "kmeans_tol": 1e-6,
}


# =============================================================================
# HELPER FUNCTIONS
# =============================================================================

def parse_key_value_text(text: str, source: str = "<text>") -> Dict[str, str]:
    """
    Parse `key = value` lines

    Args:
        text: File content (UTF-8 decoded)
        source: Name used in error messages

    Returns:
        Dictionary of raw (string) values in file order

    Raises:
        ConfigError: On a line without '=' or a duplicated key
    """
    values: Dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def parse_key_value_file(path) -> Dict[str, str]:
    """Read and parse a `key = value` file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    return parse_key_value_text(path.read_text(encoding="utf-8"), source=str(path))


def coerce_value(key: str, raw: Any, default: Any) -> Any:
    """
    Convert a raw value to the type of its default

    Tuples accept comma-separated text; elements take the type of the
    default's first element.
    """
    if not isinstance(raw, str):
        if isinstance(default, tuple):
            return tuple(raw)
        return raw
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            element_type = type(default[0]) if default else float
            items = [item.strip() for item in raw.strip("()[] ").split(",") if item.strip()]
            return tuple(element_type(item) for item in items)
        return raw
    except ValueError:
        raise ConfigError(f"Invalid value for {key!r}: {raw!r} (expected {type(default).__name__})")


def format_value(value: Any) -> str:
    """Render a config value the way it is read back"""
    if isinstance(value, tuple):
        return ", ".join(format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Validated run configuration (defaults merged with file and CLI values)"""
    values: Dict[str, Any] = field(default_factory=lambda: dict(RUN_CONFIG_DEFAULTS))

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def get(self, key: str) -> Any:
        return self.values[key]

    def echo(self) -> str:
        """Effective config as sorted `key = value` lines"""
        return "".join(f"{key} = {format_value(self.values[key])}\n" for key in sorted(self.values))

    def write_echo(self, directory) -> Path:
        """Write the effective config into an output directory"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        target = directory / EFFECTIVE_CONFIG_FILENAME
        target.write_text(self.echo(), encoding="utf-8")
        return target


def build_run_config(file_values: Optional[Dict[str, str]] = None,
                     overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Merge defaults, file values and overrides, then validate everything

    Args:
        file_values: Raw values parsed from a config file
        overrides: Values from CLI flags (None values are ignored)

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: Unknown key or invalid value
    """
    from utils.validators import validate_run_config_value

    values = dict(RUN_CONFIG_DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in RUN_CONFIG_DEFAULTS:
                raise ConfigError(f"Unknown config key: {key!r}")
            values[key] = coerce_value(key, raw, RUN_CONFIG_DEFAULTS[key])

    for key, value in values.items():
        is_valid, message = validate_run_config_value(key, value)
        if not is_valid:
            raise ConfigError(f"Invalid config value {key} = {format_value(value)}: {message}")

    return RunConfig(values=values)


def load_run_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load a RunConfig from an optional file plus CLI overrides"""
    file_values = parse_key_value_file(path) if path else None
    return build_run_config(file_values, overrides)


def position_class_for(p: float, boundaries: Iterable[float] = ZONE_BOUNDARIES) -> int:
    """
    Map a normalized z coordinate to its discrete body zone

    Args:
        p: Continuous position in [0, 1]

    Returns:
        Class index (0=chest, 1=abdomen, 2=pelvis)
    """
    for index, upper in enumerate(boundaries):
        if p < upper:
            return index
    return len(tuple(boundaries)) - 1
