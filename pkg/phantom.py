"""
Phantom - deterministic synthetic CT with known lesions

Each volume is an axial stack through a simplified body: an ellipse of soft
tissue in air, lungs and a spine in the chest zone, a spine in the abdomen,
iliac bones in the pelvis. Lesions are disks (shrinking away from their center
slice) placed inside the tissue of their zone with a HU offset that shows up
in exactly one of the default windows and stays faint in the wide window:

    chest   -> inside lung,  lung window
    abdomen -> soft tissue,  soft-tissue window
    pelvis  -> inside bone,  bone window

Volume i is generated from its own generator seeded with (seed + i).
"""

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import binary_erosion

from config import (
    DEFAULT_WINDOWS,
    EFFECTIVE_CONFIG_FILENAME,
    POSITION_CLASSES,
    SINGLE_WINDOW,
    ZONE_BOUNDARIES,
    coerce_value,
    format_value,
    parse_key_value_file,
    position_class_for,
)
from detect_post import Box, format_gt_lines, read_gt_file
from errors import ConfigError, DataError, PlacementError
from mvp_model import PositionLabel
from utils.id_generator import generate_image_id, generate_volume_id, parse_image_id
from volume_io import HuVolume, load_volume, save_volume
from windowing import WindowSpec, apply_window

logger = logging.getLogger(__name__)

# Tissue labels of the body model
AIR, LUNG, SOFT, BONE = 0, 1, 2, 3

# Window index (into DEFAULT_WINDOWS) and host tissue per zone
ZONE_WINDOW = (1, 0, 2)
ZONE_TISSUE = (LUNG, SOFT, BONE)

# Geometry is laid out on a 64-pixel reference grid and scaled to image_size
_REFERENCE_SIZE = 64.0

PHANTOM_SPEC_DEFAULTS: Dict[str, Any] = {
    "n_volumes": 80,
    "n_test": 20,
    "slices": 24,
    "image_size": 64,
    "slice_spacing_mm": 2.0,
    "pixel_spacing_mm": 0.8,
    "zone_boundaries": ZONE_BOUNDARIES,
    "air_hu": -1000.0,
    "lung_hu": -700.0,
    "soft_hu": 40.0,
    "bone_hu": 700.0,
    "lung_noise": 20.0,
    "soft_noise": 12.0,
    "bone_noise": 20.0,
    "lesion_count_min": 1,
    "lesion_count_max": 3,
    "lesion_radius_min": 4,
    "lesion_radius_max": 8,
    "lesion_half_extent_min": 1,
    "lesion_half_extent_max": 2,
    "lung_lesion_delta": 195.0,
    "soft_lesion_delta": 120.0,
    "bone_lesion_delta": 195.0,
    "visible_contrast_min": 0.09,
    "wide_contrast_max": 0.05,
    "max_retries": 200,
}


@dataclass(frozen=True)
class PhantomSpec:
    """Generator parameters; see assets/phantom_default.conf for the shipped values"""
    n_volumes: int = 80
    n_test: int = 20
    slices: int = 24
    image_size: int = 64
    slice_spacing_mm: float = 2.0
    pixel_spacing_mm: float = 0.8
    zone_boundaries: Tuple[float, ...] = ZONE_BOUNDARIES
    air_hu: float = -1000.0
    lung_hu: float = -700.0
    soft_hu: float = 40.0
    bone_hu: float = 700.0
    lung_noise: float = 20.0
    soft_noise: float = 12.0
    bone_noise: float = 20.0
    lesion_count_min: int = 1
    lesion_count_max: int = 3
    lesion_radius_min: int = 4
    lesion_radius_max: int = 8
    lesion_half_extent_min: int = 1
    lesion_half_extent_max: int = 2
    lung_lesion_delta: float = 195.0
    soft_lesion_delta: float = 120.0
    bone_lesion_delta: float = 195.0
    visible_contrast_min: float = 0.09
    wide_contrast_max: float = 0.05
    max_retries: int = 200

    def __post_init__(self):
        if self.n_volumes < 0 or not 0 <= self.n_test <= self.n_volumes:
            raise ConfigError(f"Need 0 <= n_test <= n_volumes, got {self.n_test}, {self.n_volumes}")
        if self.slices < 1 or self.image_size < 8:
            raise ConfigError(f"Need slices >= 1 and image_size >= 8, got {self.slices}, {self.image_size}")
        boundaries = tuple(float(b) for b in self.zone_boundaries)
        if (len(boundaries) != len(POSITION_CLASSES) or boundaries[-1] != 1.0
                or any(b <= a for a, b in zip((0.0,) + boundaries, boundaries))):
            raise ConfigError(f"Zone boundaries must increase to 1.0 over {len(POSITION_CLASSES)} zones, got {boundaries}")
        object.__setattr__(self, "zone_boundaries", boundaries)
        if not 0 <= self.lesion_count_min <= self.lesion_count_max:
            raise ConfigError("Need 0 <= lesion_count_min <= lesion_count_max")
        if not 1 <= self.lesion_radius_min <= self.lesion_radius_max:
            raise ConfigError("Need 1 <= lesion_radius_min <= lesion_radius_max")
        if not 0 <= self.lesion_half_extent_min <= self.lesion_half_extent_max:
            raise ConfigError("Need 0 <= lesion_half_extent_min <= lesion_half_extent_max")
        for zone in range(len(POSITION_CLASSES)):
            designated, wide = self.zone_contrast(zone)
            if designated < self.visible_contrast_min or wide >= self.wide_contrast_max:
                raise ConfigError(
                    f"{POSITION_CLASSES[zone]} lesions: contrast {designated:.4f} in their window "
                    f"(min {self.visible_contrast_min}) and {wide:.4f} in the wide window "
                    f"(max {self.wide_contrast_max})"
                )

    def tissue_hu(self, tissue: int) -> float:
        return (self.air_hu, self.lung_hu, self.soft_hu, self.bone_hu)[tissue]

    def tissue_noise(self, tissue: int) -> float:
        return (0.0, self.lung_noise, self.soft_noise, self.bone_noise)[tissue]

    def lesion_delta(self, zone: int) -> float:
        return (self.lung_lesion_delta, self.soft_lesion_delta, self.bone_lesion_delta)[zone]

    def zone_contrast(self, zone: int) -> Tuple[float, float]:
        """(designated-window contrast, wide-window contrast) of a zone's lesions"""
        background = self.tissue_hu(ZONE_TISSUE[zone])
        delta = self.lesion_delta(zone)
        return (
            lesion_contrast(background, delta, WindowSpec(*DEFAULT_WINDOWS[ZONE_WINDOW[zone]])),
            lesion_contrast(background, delta, WindowSpec(*SINGLE_WINDOW)),
        )

    def echo(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in sorted(fields(self), key=lambda f: f.name))


@dataclass(frozen=True)
class Lesion:
    lesion_index: int
    zone: int
    center_slice: int
    cx: int
    cy: int
    radius: int
    half_extent: int
    hu_delta: float

    @property
    def slice_range(self) -> Tuple[int, int]:
        return self.center_slice - self.half_extent, self.center_slice + self.half_extent

    def radius_at(self, slice_index: int) -> float:
        offset = abs(slice_index - self.center_slice)
        return self.radius * float(np.sqrt(1.0 - (offset / (self.half_extent + 1.0)) ** 2))


@dataclass
class PhantomVolume:
    """
    One generated volume with its labels

    Attributes:
        boxes: Ground-truth boxes per slice index (slices with lesions only)
        positions: One PositionLabel per slice
    """
    volume_id: str
    volume: HuVolume
    split: str
    lesions: List[Lesion] = field(default_factory=list)
    boxes: Dict[int, List[Box]] = field(default_factory=dict)
    positions: List[PositionLabel] = field(default_factory=list)

    @property
    def key_slices(self) -> List[int]:
        return sorted({lesion.center_slice for lesion in self.lesions})


@dataclass
class PhantomDataset:
    volumes: List[PhantomVolume]

    def split(self, name: str) -> List[PhantomVolume]:
        return [v for v in self.volumes if v.split == name]


# =============================================================================
# SPEC FILE
# =============================================================================

def phantom_spec_from_values(raw_values: Dict[str, Any]) -> PhantomSpec:
    """Build a PhantomSpec from raw `key = value` entries"""
    values = {}
    for key, raw in raw_values.items():
        if key not in PHANTOM_SPEC_DEFAULTS:
            raise ConfigError(f"Unknown phantom spec key: {key!r}")
        values[key] = coerce_value(key, raw, PHANTOM_SPEC_DEFAULTS[key])
    return PhantomSpec(**values)


def load_phantom_spec(path) -> PhantomSpec:
    return phantom_spec_from_values(parse_key_value_file(path))


# =============================================================================
# GENERATION
# =============================================================================

def lesion_contrast(background_hu: float, delta_hu: float, window: WindowSpec) -> float:
    """Rendered contrast of a lesion against its background under a window"""
    values = apply_window(np.array([background_hu, background_hu + delta_hu]), window).pixels
    return float(abs(values[1] - values[0]))


def _ellipse(size: int, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    factor = size / _REFERENCE_SIZE
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx * factor) / (ax * factor)) ** 2 + ((yy - cy * factor) / (ay * factor)) ** 2 <= 1.0


def _disk(size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2


def zone_tissue_map(zone: int, size: int) -> np.ndarray:
    """Tissue label per pixel for a slice in the given zone"""
    tissue = np.full((size, size), AIR, dtype=np.int8)
    tissue[_ellipse(size, 32, 32, 28, 24)] = SOFT
    if zone == 0:
        tissue[_ellipse(size, 19, 30, 10, 14)] = LUNG
        tissue[_ellipse(size, 45, 30, 10, 14)] = LUNG
    elif zone == 2:
        tissue[_ellipse(size, 18, 34, 10, 12)] = BONE
        tissue[_ellipse(size, 46, 34, 10, 12)] = BONE
    tissue[_ellipse(size, 32, 50, 5, 5)] = BONE
    return tissue


def slice_positions(spec: PhantomSpec) -> List[PositionLabel]:
    """p = z / (nz - 1) with the zone from the spec's boundaries"""
    nz = spec.slices
    labels = []
    for z in range(nz):
        p = z / (nz - 1) if nz > 1 else 0.0
        labels.append(PositionLabel(position_class_for(p, spec.zone_boundaries), p))
    return labels


def _place_lesions(spec: PhantomSpec, positions: List[PositionLabel], rng: np.random.Generator,
                   volume_id: str) -> List[Lesion]:
    count = int(rng.integers(spec.lesion_count_min, spec.lesion_count_max + 1))
    zone_of_slice = [label.y for label in positions]
    lesions: List[Lesion] = []
    for lesion_index in range(count):
        for _ in range(spec.max_retries):
            zone = int(rng.integers(len(POSITION_CLASSES)))
            candidates = [z for z, y in enumerate(zone_of_slice) if y == zone]
            if not candidates:
                continue
            center = int(rng.choice(candidates))
            half_extent = int(rng.integers(spec.lesion_half_extent_min, spec.lesion_half_extent_max + 1))
            low, high = center - half_extent, center + half_extent
            if low < 0 or high >= spec.slices or any(zone_of_slice[z] != zone for z in range(low, high + 1)):
                continue
            radius = int(rng.integers(spec.lesion_radius_min, spec.lesion_radius_max + 1))
            host = zone_tissue_map(zone, spec.image_size) == ZONE_TISSUE[zone]
            fits = binary_erosion(host, structure=_disk(2 * radius + 1, radius, radius, radius), border_value=0)
            centers = np.argwhere(fits)
            if centers.size == 0:
                continue
            cy, cx = (int(v) for v in centers[rng.integers(len(centers))])
            if any(_overlaps(other, low, high, cx, cy, radius) for other in lesions):
                continue
            lesions.append(Lesion(lesion_index, zone, center, cx, cy, radius, half_extent, spec.lesion_delta(zone)))
            break
        else:
            raise PlacementError(
                f"Could not place lesion {lesion_index} in {volume_id} after {spec.max_retries} attempts"
            )
    return lesions


def _overlaps(other: Lesion, low: int, high: int, cx: int, cy: int, radius: int) -> bool:
    other_low, other_high = other.slice_range
    if high < other_low or low > other_high:
        return False
    return float(np.hypot(cx - other.cx, cy - other.cy)) <= radius + other.radius + 1


def lesion_box(lesion: Lesion, slice_index: int, size: int) -> Optional[Box]:
    """Tight box around the lesion's pixels on a slice (None when absent)"""
    mask = _disk(size, lesion.cx, lesion.cy, lesion.radius_at(slice_index))
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate_volume(spec: PhantomSpec, seed: int, index: int) -> PhantomVolume:
    """Generate volume `index` with sub-seed seed + index"""
    rng = np.random.default_rng(seed + index)
    volume_id = generate_volume_id(index)
    positions = slice_positions(spec)
    lesions = _place_lesions(spec, positions, rng, volume_id)

    size = spec.image_size
    maps = {zone: zone_tissue_map(zone, size) for zone in range(len(POSITION_CLASSES))}
    hu = np.empty((spec.slices, size, size), dtype=np.float64)
    for z, label in enumerate(positions):
        tissue = maps[label.y]
        base = np.choose(tissue, [spec.tissue_hu(t) for t in (AIR, LUNG, SOFT, BONE)])
        sigma = np.choose(tissue, [spec.tissue_noise(t) for t in (AIR, LUNG, SOFT, BONE)])
        hu[z] = base + rng.normal(0.0, 1.0, (size, size)) * sigma

    boxes: Dict[int, List[Box]] = {}
    for lesion in lesions:
        low, high = lesion.slice_range
        for z in range(low, high + 1):
            mask = _disk(size, lesion.cx, lesion.cy, lesion.radius_at(z))
            hu[z][mask] += lesion.hu_delta
            box = lesion_box(lesion, z, size)
            if box is not None:
                boxes.setdefault(z, []).append(box)

    voxels = np.clip(np.round(hu), -32768, 32767).astype(np.int16)
    volume = HuVolume(voxels, (spec.slice_spacing_mm, spec.pixel_spacing_mm, spec.pixel_spacing_mm))
    split = "test" if index >= spec.n_volumes - spec.n_test else "train"
    return PhantomVolume(volume_id, volume, split, lesions, boxes, positions)


def generate(spec: PhantomSpec, seed: int) -> PhantomDataset:
    """
    Generate the full dataset

    Raises:
        PlacementError: A lesion could not be placed within max_retries
    """
    volumes = [generate_volume(spec, seed, index) for index in range(spec.n_volumes)]
    logger.info("Generated %d phantom volumes (%d lesions)", len(volumes), sum(len(v.lesions) for v in volumes))
    return PhantomDataset(volumes)


# =============================================================================
# DIRECTORY I/O
# =============================================================================

def write_phantom(dataset: PhantomDataset, out_dir, spec: PhantomSpec, seed: int) -> Path:
    """
    Write volumes/<id>.huvol, gt.txt, positions.txt, lesions.txt, manifest.txt
    and effective_config.txt (seed plus the spec actually used)
    """
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    gt_records, position_lines, lesion_lines, manifest_lines = [], [], [], []
    for pv in dataset.volumes:
        save_volume(pv.volume, out_dir / "volumes" / f"{pv.volume_id}.huvol")
        manifest_lines.append(f"{pv.volume_id} {pv.split}\n")
        for z in sorted(pv.boxes):
            gt_records.extend((generate_image_id(pv.volume_id, z), box) for box in pv.boxes[z])
        for z, label in enumerate(pv.positions):
            position_lines.append(f"{generate_image_id(pv.volume_id, z)} {label.y} {label.p:.6f}\n")
        for lesion in pv.lesions:
            designated, wide = spec.zone_contrast(lesion.zone)
            lesion_lines.append(
                f"{pv.volume_id} {lesion.lesion_index} {POSITION_CLASSES[lesion.zone]} {lesion.center_slice} "
                f"{lesion.cx} {lesion.cy} {lesion.radius} {lesion.half_extent} {lesion.hu_delta:g} "
                f"{designated:.4f} {wide:.4f}\n"
            )
    (out_dir / "gt.txt").write_text(format_gt_lines(gt_records), encoding="utf-8")
    (out_dir / "positions.txt").write_text("".join(position_lines), encoding="utf-8")
    (out_dir / "lesions.txt").write_text("".join(lesion_lines), encoding="utf-8")
    (out_dir / "manifest.txt").write_text("".join(manifest_lines), encoding="utf-8")
    (out_dir / EFFECTIVE_CONFIG_FILENAME).write_text(f"seed = {seed}\n" + spec.echo(), encoding="utf-8")
    return out_dir


_LESION_COLUMNS = ["volume_id", "lesion_index", "zone", "center_slice", "cx", "cy", "radius",
                   "half_extent", "hu_delta", "designated_contrast", "wide_contrast"]


def _read_columns(path: Path, columns: List[str]) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"Missing phantom file: {path}")
    try:
        return pd.read_csv(path, sep=r"\s+", header=None, names=columns, dtype={columns[0]: str}, engine="python")
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)


def load_phantom_dir(data_dir) -> PhantomDataset:
    """Read a directory written by write_phantom back into a PhantomDataset"""
    data_dir = Path(data_dir)
    manifest = _read_columns(data_dir / "manifest.txt", ["volume_id", "split"])
    positions = _read_columns(data_dir / "positions.txt", ["image_id", "y", "p"])
    lesions = _read_columns(data_dir / "lesions.txt", _LESION_COLUMNS)
    gt = read_gt_file(data_dir / "gt.txt")

    position_map: Dict[Tuple[str, int], PositionLabel] = {}
    for row in positions.itertuples(index=False):
        try:
            key = parse_image_id(str(row.image_id))
        except ValueError as e:
            raise DataError(f"{data_dir / 'positions.txt'}: {e}")
        position_map[key] = PositionLabel(int(row.y), float(row.p))
    zone_index = {name: i for i, name in enumerate(POSITION_CLASSES)}
    volumes = []
    for row in manifest.itertuples(index=False):
        volume_id = str(row.volume_id)
        volume = load_volume(data_dir / "volumes" / f"{volume_id}.huvol")
        missing = [z for z in range(volume.num_slices) if (volume_id, z) not in position_map]
        if missing:
            raise DataError(f"{data_dir / 'positions.txt'}: no position labels for {volume_id} slices {missing}")
        labels = [position_map[(volume_id, z)] for z in range(volume.num_slices)]
        boxes = {z: gt[generate_image_id(volume_id, z)] for z in range(volume.num_slices)
                 if generate_image_id(volume_id, z) in gt}
        volume_lesions = [
            Lesion(int(item.lesion_index), zone_index[item.zone], int(item.center_slice), int(item.cx), int(item.cy),
                   int(item.radius), int(item.half_extent), float(item.hu_delta))
            for item in lesions[lesions.volume_id == volume_id].itertuples(index=False)
        ]
        volumes.append(PhantomVolume(volume_id, volume, str(row.split), volume_lesions, boxes, labels))
    logger.debug("Loaded %d phantom volumes from %s", len(volumes), data_dir)
    return PhantomDataset(volumes)
