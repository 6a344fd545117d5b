"""
Volume I/O and Geometry

Loads, validates, resamples and slices CT volumes stored in the HUVOL format:

    HUVOL 1
    dims z y x
    spacing z y x
    <blank line>
    raw int16 little-endian payload, z-major, row-major within each slice

The float-image interchange format written by the `window` subcommand uses
the same layout with a FIMG header and float32 payload.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy.interpolate import interp1d
from scipy.ndimage import map_coordinates

from config import FIMG_MAGIC, HUVOL_MAGIC, RESIZE_LONG_SIDE, TARGET_Z_MM
from errors import (
    InvalidSpacingError,
    MalformedHeaderError,
    ShapeError,
    SizeMismatchError,
    SlabError,
    VolumeNotFoundError,
)
from utils.validators import validate_hu_range

logger = logging.getLogger(__name__)

_HU_DTYPE = np.dtype("<i2")
_FLOAT_DTYPE = np.dtype("<f4")


class PatientAxis(Enum):
    HEAD_TO_FEET = "head_to_feet"


@dataclass(frozen=True)
class HuVolume:
    """
    CT volume in Hounsfield units

    Attributes:
        voxels: int16 array (z, y, x), read-only
        spacing_mm: (z, y, x) voxel spacing in millimeters
        patient_axis: Slice ordering convention
    """
    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float]
    patient_axis: PatientAxis = PatientAxis.HEAD_TO_FEET

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise ShapeError(f"Volume must be 3D with every axis >= 1, got shape {voxels.shape}")
        if voxels.dtype != np.int16:
            if np.issubdtype(voxels.dtype, np.floating) and not np.all(np.isfinite(voxels)):
                raise ShapeError("Volume contains non-finite values")
            if voxels.min() < -32768 or voxels.max() > 32767:
                raise ShapeError("Voxel values outside the int16 range")
            voxels = voxels.astype(np.int16)
        else:
            voxels = voxels.copy()
        voxels.setflags(write=False)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise InvalidSpacingError(f"Spacing must be three positive values, got {self.spacing_mm}")
        object.__setattr__(self, "voxels", voxels)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def num_slices(self) -> int:
        return self.voxels.shape[0]

    def validation_warnings(self) -> List[str]:
        """Non-fatal findings (values outside the clinical HU range)"""
        is_valid, message = validate_hu_range(self.voxels)
        return [] if is_valid else [message]


@dataclass(frozen=True)
class SliceStack:
    """
    Consecutive axial slices centered on one slice of a volume

    Attributes:
        slices: array (n_ctx, y, x) of HU values
        center_index: Index of the center slice in the source volume
        z_spacing_mm: Slice interval of the source volume
        source_indices: Source index of every slice (after clamping)
    """
    slices: np.ndarray
    center_index: int
    z_spacing_mm: float
    source_indices: Tuple[int, ...] = ()

    @property
    def n_ctx(self) -> int:
        return self.slices.shape[0]


@dataclass(frozen=True)
class ResizedImage:
    """Resized 2D image plus the scale used (new long side / old long side)"""
    pixels: np.ndarray
    scale: float


# =============================================================================
# HUVOL FILES
# =============================================================================

def _read_header(handle, magic: str, path: Path) -> Tuple[Tuple[int, ...], List[str]]:
    lines = [handle.readline() for _ in range(4)]
    try:
        decoded = [line.decode("ascii") for line in lines]
    except UnicodeDecodeError:
        raise MalformedHeaderError(f"{path}: header is not ASCII text")
    if decoded[0].rstrip("\n") != magic:
        raise MalformedHeaderError(f"{path}: expected magic {magic!r}, got {decoded[0].strip()!r}")
    if decoded[3] != "\n":
        raise MalformedHeaderError(f"{path}: header must end with a blank line")
    dims_fields = decoded[1].split()
    if len(dims_fields) != 4 or dims_fields[0] != "dims":
        raise MalformedHeaderError(f"{path}: malformed dims line {decoded[1].strip()!r}")
    try:
        dims = tuple(int(value) for value in dims_fields[1:])
    except ValueError:
        raise MalformedHeaderError(f"{path}: non-integer dims {decoded[1].strip()!r}")
    if any(d < 1 for d in dims):
        raise MalformedHeaderError(f"{path}: dims must be >= 1, got {dims}")
    return dims, decoded[2].split()


def load_volume(path) -> HuVolume:
    """
    Load a HUVOL file

    Args:
        path: File path

    Returns:
        HuVolume with exactly the declared shape and spacing

    Raises:
        VolumeNotFoundError: Missing file
        MalformedHeaderError: Header does not parse
        SizeMismatchError: Payload length differs from dims x 2 bytes
        InvalidSpacingError: Non-positive spacing
    """
    path = Path(path)
    if not path.is_file():
        raise VolumeNotFoundError(f"Volume file not found: {path}")

    with open(path, "rb") as handle:
        dims, spacing_fields = _read_header(handle, HUVOL_MAGIC, path)
        payload = handle.read()

    if len(spacing_fields) != 4 or spacing_fields[0] != "spacing":
        raise MalformedHeaderError(f"{path}: malformed spacing line")
    try:
        spacing = tuple(float(value) for value in spacing_fields[1:])
    except ValueError:
        raise MalformedHeaderError(f"{path}: non-numeric spacing {spacing_fields[1:]}")
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise InvalidSpacingError(f"{path}: spacing must be positive, got {spacing}")

    expected = int(np.prod(dims)) * _HU_DTYPE.itemsize
    if len(payload) != expected:
        raise SizeMismatchError(f"{path}: payload has {len(payload)} bytes, dims {dims} require {expected}")

    voxels = np.frombuffer(payload, dtype=_HU_DTYPE).reshape(dims).astype(np.int16)
    volume = HuVolume(voxels=voxels, spacing_mm=spacing)
    for warning in volume.validation_warnings():
        logger.warning("%s: %s", path, warning)
    logger.debug("Loaded %s: dims=%s spacing=%s", path, dims, spacing)
    return volume


def save_volume(vol: HuVolume, path) -> None:
    """
    Write a volume as HUVOL

    Raises:
        OSError: If the file cannot be written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    z, y, x = vol.shape
    sz, sy, sx = vol.spacing_mm
    header = f"{HUVOL_MAGIC}\ndims {z} {y} {x}\nspacing {sz!r} {sy!r} {sx!r}\n\n"
    with open(path, "wb") as handle:
        handle.write(header.encode("ascii"))
        handle.write(np.ascontiguousarray(vol.voxels, dtype=_HU_DTYPE).tobytes())


def save_float_image(pixels: np.ndarray, path) -> None:
    """
    Write a float image (channels, y, x) in the FIMG format

    A 2D image is stored with one channel.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[None]
    if pixels.ndim != 3:
        raise ShapeError(f"Float image must be 2D or 3D, got shape {pixels.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c, y, x = pixels.shape
    with open(path, "wb") as handle:
        handle.write(f"{FIMG_MAGIC}\ndims {c} {y} {x}\nformat float32-le\n\n".encode("ascii"))
        handle.write(np.ascontiguousarray(pixels, dtype=_FLOAT_DTYPE).tobytes())


def load_float_image(path) -> np.ndarray:
    """Read a FIMG file back as a float32 array (channels, y, x)"""
    path = Path(path)
    if not path.is_file():
        raise VolumeNotFoundError(f"Float image not found: {path}")
    with open(path, "rb") as handle:
        dims, _ = _read_header(handle, FIMG_MAGIC, path)
        payload = handle.read()
    expected = int(np.prod(dims)) * _FLOAT_DTYPE.itemsize
    if len(payload) != expected:
        raise SizeMismatchError(f"{path}: payload has {len(payload)} bytes, dims {dims} require {expected}")
    return np.frombuffer(payload, dtype=_FLOAT_DTYPE).reshape(dims).astype(np.float32)


# =============================================================================
# RESAMPLING AND SLICING
# =============================================================================

def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero"""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def resample_z(vol: HuVolume, target_z_mm: float = TARGET_Z_MM) -> HuVolume:
    """
    Resample a volume to a new slice interval by linear interpolation

    Target slices sit at 0, t, 2t, ... within [0, (nz - 1) * spacing_z].
    Interpolated values are rounded to integer HU (ties away from zero).

    Args:
        vol: Source volume
        target_z_mm: New slice interval in millimeters

    Returns:
        Resampled HuVolume

    Raises:
        InvalidSpacingError: If target_z_mm is not positive
    """
    if not np.isfinite(target_z_mm) or target_z_mm <= 0:
        raise InvalidSpacingError(f"Target z spacing must be positive, got {target_z_mm}")

    nz = vol.num_slices
    source_z = vol.spacing_mm[0]
    new_spacing = (float(target_z_mm), vol.spacing_mm[1], vol.spacing_mm[2])
    if nz == 1:
        return HuVolume(voxels=vol.voxels, spacing_mm=new_spacing, patient_axis=vol.patient_axis)

    extent = (nz - 1) * source_z
    n_out = int(np.floor(extent / target_z_mm + 1e-9)) + 1
    source_positions = np.arange(nz, dtype=np.float64) * source_z
    target_positions = np.minimum(np.arange(n_out, dtype=np.float64) * target_z_mm, extent)

    interpolator = interp1d(source_positions, vol.voxels.astype(np.float64), axis=0,
                            kind="linear", assume_sorted=True)
    resampled = round_half_away(interpolator(target_positions))
    logger.debug("Resampled z: %d slices @ %.3f mm -> %d slices @ %.3f mm",
                 nz, source_z, n_out, target_z_mm)
    return HuVolume(voxels=resampled.astype(np.int16), spacing_mm=new_spacing,
                    patient_axis=vol.patient_axis)


def resize_xy(image: np.ndarray, target_long_side: int = RESIZE_LONG_SIDE) -> ResizedImage:
    """
    Resize a 2D image so its long side equals target_long_side

    Bilinear interpolation with corner-aligned sampling; the short side is
    rounded to the nearest integer (minimum 1).

    Args:
        image: 2D array
        target_long_side: Output long side in pixels

    Returns:
        ResizedImage with the pixels and the scale factor

    Raises:
        ShapeError: Empty or non-2D image, or target < 1
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ShapeError(f"Expected a non-empty 2D image, got shape {image.shape}")
    if target_long_side < 1:
        raise ShapeError(f"Target long side must be >= 1, got {target_long_side}")

    height, width = image.shape
    scale = target_long_side / max(height, width)
    if height >= width:
        out_h = int(target_long_side)
        out_w = max(1, int(round_half_away(width * scale)))
    else:
        out_w = int(target_long_side)
        out_h = max(1, int(round_half_away(height * scale)))

    if (out_h, out_w) == (height, width):
        return ResizedImage(pixels=image.copy(), scale=float(scale))

    rows = np.linspace(0.0, height - 1, out_h) if out_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, width - 1, out_w) if out_w > 1 else np.zeros(1)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    pixels = map_coordinates(image, [grid_r, grid_c], order=1, mode="nearest")
    return ResizedImage(pixels=pixels, scale=float(scale))


def extract_slab(vol: HuVolume, center_index: int, n_ctx: int) -> SliceStack:
    """
    Take n_ctx consecutive slices centered at center_index

    Indices beyond the volume replicate the boundary slice.

    Raises:
        SlabError: Even n_ctx or center out of range
    """
    if n_ctx < 1 or n_ctx % 2 == 0:
        raise SlabError(f"n_ctx must be a positive odd number, got {n_ctx}")
    nz = vol.num_slices
    if not (0 <= center_index < nz):
        raise SlabError(f"Center index {center_index} out of range [0, {nz})")

    half = n_ctx // 2
    indices = np.clip(np.arange(center_index - half, center_index + half + 1), 0, nz - 1)
    return SliceStack(
        slices=vol.voxels[indices].copy(),
        center_index=int(center_index),
        z_spacing_mm=vol.spacing_mm[0],
        source_indices=tuple(int(i) for i in indices),
    )
