"""Tests for :mod:`visualization`"""

import numpy as np
from PIL import Image

from config import OVERLAY_COLORS
from detect_post import Box, Detection
from eval_froc import EvalCase, froc
from visualization import froc_figure, render_case_study, save_view_png, to_grayscale_image, write_froc_html


def _curve():
    curve, _ = froc([EvalCase("a", [Box(0, 0, 4, 4)], [Detection(Box(0, 0, 4, 4), 0.9),
                                                        Detection(Box(8, 8, 12, 12), 0.4)])])
    return curve


def test_froc_figure_has_one_trace_per_method():
    fig = froc_figure({"single_view": _curve(), "full": _curve()})
    assert [trace.name for trace in fig.data] == ["single_view", "full"]
    np.testing.assert_array_equal(fig.data[0].y, [100.0, 100.0])
    np.testing.assert_array_equal(fig.data[0].x, [0.0, 1.0])


def test_write_froc_html(tmp_path):
    path = write_froc_html({"model": _curve()}, tmp_path / "plots" / "froc.html")
    assert "FPs per image" in path.read_text(encoding="utf-8")


def test_grayscale_conversion():
    image = to_grayscale_image(np.array([[0.0, 0.5], [1.0, 2.0]]), upscale=3)
    assert image.size == (6, 6)
    pixels = np.asarray(image)
    assert pixels[0, 0] == 0 and pixels[0, 3] == 128 and pixels[3, 0] == 255 and pixels[5, 5] == 255


def test_save_view_png(tmp_path):
    path = save_view_png(np.full((5, 7), 0.25), tmp_path / "view0.png", upscale=1)
    with Image.open(path) as image:
        assert image.size == (7, 5)
        assert image.mode == "L"


def test_case_study_colors():
    image = render_case_study(np.zeros((16, 16)), [Box(2, 2, 8, 8)], [Detection(Box(9, 9, 15, 15), 0.7)], upscale=2)
    pixels = np.asarray(image)
    assert tuple(pixels[4, 4]) == OVERLAY_COLORS["ground_truth"]
    assert tuple(pixels[29, 29]) == OVERLAY_COLORS["prediction"]
    assert tuple(pixels[10, 10]) == (0, 0, 0)
