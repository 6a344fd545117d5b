"""
Visualization helpers

FROC curves as standalone plotly HTML, rendered views as PNG previews, and
case-study overlays (ground truth green, predictions red) drawn with Pillow.
"""

import logging
from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import plotly.graph_objects as go
from PIL import Image, ImageDraw

from config import CHART_COLORS, OVERLAY_COLORS, PREVIEW_UPSCALE, REPORT_RATES
from detect_post import Box, Detection
from eval_froc import FrocCurve

logger = logging.getLogger(__name__)


def froc_figure(curves: Dict[str, FrocCurve]) -> go.Figure:
    """Sensitivity (%) against FPs per image, one step trace per method"""
    fig = go.Figure()
    for index, (name, curve) in enumerate(curves.items()):
        color = CHART_COLORS[index % len(CHART_COLORS)]
        fig.add_trace(
            go.Scatter(
                x=curve.fps_per_image,
                y=curve.sensitivity * 100.0,
                name=name,
                mode="lines+markers",
                line=dict(color=color, width=3, shape="hv"),
                marker=dict(size=6, color=color),
                hovertemplate="<b>%{y:.2f}%</b> at %{x:.2f} FPs/image<extra></extra>",
            )
        )

    fig.update_xaxes(title_text="FPs per image", range=[0, max(REPORT_RATES)])
    fig.update_yaxes(title_text="Sensitivity (%)", range=[0, 100])
    fig.update_layout(
        height=450,
        legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
        paper_bgcolor="rgba(0,0,0,0)",
        plot_bgcolor="rgba(250,250,250,1)",
        font={"family": "Inter, sans-serif"},
    )
    return fig


def write_froc_html(curves: Dict[str, FrocCurve], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    froc_figure(curves).write_html(str(path), include_plotlyjs="cdn", full_html=True)
    logger.debug("Wrote FROC figure to %s", path)
    return path


def to_grayscale_image(pixels: np.ndarray, upscale: int = PREVIEW_UPSCALE) -> Image.Image:
    """[0, 1] pixels to an 8-bit image, nearest-neighbor upscaled"""
    data = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    image = Image.fromarray(np.round(data * 255.0).astype(np.uint8))
    if upscale > 1:
        image = image.resize((image.width * upscale, image.height * upscale), Image.Resampling.NEAREST)
    return image


def save_view_png(pixels: np.ndarray, path, upscale: int = PREVIEW_UPSCALE) -> Path:
    """PNG preview of one rendered 2D view"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_grayscale_image(pixels, upscale).save(path, format="PNG")
    return path


def render_case_study(pixels: np.ndarray, gt_boxes: Sequence[Box], detections: Sequence[Detection],
                      upscale: int = PREVIEW_UPSCALE) -> Image.Image:
    """
    Overlay boxes on a rendered view

    Args:
        pixels: 2D view in [0, 1], in the same pixel space as the boxes
        gt_boxes: Drawn green
        detections: Drawn red, labeled with their score
    """
    image = to_grayscale_image(pixels, upscale).convert("RGB")
    draw = ImageDraw.Draw(image)

    def scaled(box: Box):
        x1, y1 = box.x1 * upscale, box.y1 * upscale
        return [x1, y1, max(x1, box.x2 * upscale - 1), max(y1, box.y2 * upscale - 1)]

    for box in gt_boxes:
        draw.rectangle(scaled(box), outline=OVERLAY_COLORS["ground_truth"], width=2)
    for det in detections:
        draw.rectangle(scaled(det.box), outline=OVERLAY_COLORS["prediction"], width=1)
        draw.text((det.box.x1 * upscale + 2, det.box.y1 * upscale + 1), f"{det.score:.2f}",
                  fill=OVERLAY_COLORS["prediction"])
    return image


def save_case_study(pixels: np.ndarray, gt_boxes: Sequence[Box], detections: Sequence[Detection], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    render_case_study(pixels, gt_boxes, detections).save(path, format="PNG")
    return path
