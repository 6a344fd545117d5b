"""
ID Generation Utilities

Generates deterministic IDs for phantom volumes and evaluation images.
"""

from typing import Tuple


def generate_volume_id(index: int) -> str:
    """
    Generate a volume ID from its index in a dataset

    Format: volNNNN
    Example: vol0003

    Args:
        index: Zero-based volume index

    Returns:
        Volume ID string

    Raises:
        ValueError: If index is negative
    """
    if index < 0:
        raise ValueError(f"Volume index must be non-negative, got {index}")
    return f"vol{index:04d}"


def generate_image_id(volume_id: str, slice_index: int) -> str:
    """
    Generate an image ID for one axial slice of a volume

    Format: <volume_id>_sNNN
    Example: vol0003_s012

    Args:
        volume_id: Volume ID (e.g., "vol0003")
        slice_index: Zero-based slice index

    Returns:
        Image ID string
    """
    if slice_index < 0:
        raise ValueError(f"Slice index must be non-negative, got {slice_index}")
    return f"{volume_id}_s{slice_index:03d}"


def parse_image_id(image_id: str) -> Tuple[str, int]:
    """
    Split an image ID into (volume_id, slice_index)

    Raises:
        ValueError: If the ID does not follow the <volume_id>_sNNN format
    """
    volume_id, sep, slice_part = image_id.rpartition("_s")
    if not sep or not volume_id or not slice_part.isdigit():
        raise ValueError(f"Invalid image ID: {image_id!r}")
    return volume_id, int(slice_part)
