"""
Windowing - render HU images into normalized views

A view is the same CT data rendered under one (level, width) window:

    out = clamp((p - (level - width / 2)) / width, 0, 1)
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from config import DEFAULT_WINDOWS, SINGLE_WINDOW
from errors import InvalidWindowError
from volume_io import SliceStack


@dataclass(frozen=True)
class WindowSpec:
    """Rendering window in HU"""
    level: float
    width: float

    def __post_init__(self):
        if not np.isfinite(self.level) or not np.isfinite(self.width):
            raise InvalidWindowError(f"Window values must be finite, got ({self.level}, {self.width})")
        if self.width <= 0:
            raise InvalidWindowError(f"Window width must be positive, got {self.width}")

    @property
    def lower(self) -> float:
        return self.level - self.width / 2.0

    @property
    def upper(self) -> float:
        return self.level + self.width / 2.0

    def __str__(self):
        return f"{self.level:g}:{self.width:g}"


@dataclass(frozen=True)
class ViewSet:
    """Ordered windows; order defines channel/pathway order"""
    windows: Tuple[WindowSpec, ...]

    def __post_init__(self):
        windows = tuple(self.windows)
        if not windows:
            raise InvalidWindowError("A view set needs at least one window")
        object.__setattr__(self, "windows", windows)

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


@dataclass(frozen=True)
class RenderedView:
    """Pixels in [0, 1]; 2D for a single slice, (n_ctx, y, x) for a slab"""
    pixels: np.ndarray
    window: WindowSpec


@dataclass(frozen=True)
class MultiViewInput:
    """One rendered slab per window, in view order"""
    views: Tuple[RenderedView, ...]

    def to_array(self) -> np.ndarray:
        """Stack as (k, n_ctx, y, x)"""
        return np.stack([view.pixels for view in self.views])


def apply_window(img: np.ndarray, w: WindowSpec) -> RenderedView:
    """
    Render an HU image under one window

    Args:
        img: HU values (any shape)
        w: Window

    Returns:
        RenderedView with values in [0, 1]

    Raises:
        InvalidWindowError: Non-positive width
    """
    if w.width <= 0:
        raise InvalidWindowError(f"Window width must be positive, got {w.width}")
    pixels = np.asarray(img, dtype=np.float64)
    rendered = np.clip((pixels - w.lower) / w.width, 0.0, 1.0)
    return RenderedView(pixels=rendered, window=w)


def default_views() -> ViewSet:
    """The three clustered windows: soft tissue, lung, bone"""
    return ViewSet(tuple(WindowSpec(level, width) for level, width in DEFAULT_WINDOWS))


def single_window() -> ViewSet:
    """Wide single window of the single-view baseline"""
    return ViewSet((WindowSpec(*SINGLE_WINDOW),))


def render_views(slab: SliceStack, views: ViewSet) -> MultiViewInput:
    """
    Render a slab under every window of a view set

    Returns:
        MultiViewInput with view i rendered under window i
    """
    return MultiViewInput(tuple(apply_window(slab.slices, window) for window in views))


def parse_windows(text: str) -> ViewSet:
    """
    Parse a comma-separated `level:width` list

    Example: "50:449,-505:1980,446:1960"
    """
    windows: List[WindowSpec] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        level, sep, width = item.partition(":")
        if not sep:
            raise InvalidWindowError(f"Expected 'level:width', got {item!r}")
        try:
            windows.append(WindowSpec(float(level), float(width)))
        except ValueError:
            raise InvalidWindowError(f"Non-numeric window {item!r}")
    return ViewSet(tuple(windows))
