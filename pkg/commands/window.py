"""
Window - render a slab of a volume under each view window
"""

import logging
from pathlib import Path

from config import EXIT_OK, load_run_config
from visualization import save_view_png
from volume_io import extract_slab, load_volume, save_float_image
from windowing import default_views, parse_windows, render_views, single_window

logger = logging.getLogger(__name__)

NAME = "window"


def add_parser(subparsers):
    parser = subparsers.add_parser(NAME, help="Render a slab under the view windows (float-image output)")
    parser.add_argument("--input", required=True, help="HUVOL file")
    parser.add_argument("--slice", type=int, required=True, dest="slice_index", help="Center slice index")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--config", help="Run config file (key = value)")
    parser.add_argument("--n-ctx", type=int, dest="n_ctx", help="Context slices, 3 or 9 (default 3)")
    parser.add_argument("--windows", help="Comma-separated level:width list "
                                          "(default: the three clustered windows 50:449,-505:1980,446:1960)")
    parser.add_argument("--single", action="store_true", help="Use the wide single window 1024:4096")
    parser.add_argument("--png", action="store_true", help="Also write a PNG preview of each view's center slice")
    parser.set_defaults(run=run)
    return parser


def run(args) -> int:
    config = load_run_config(args.config, {"n_ctx": args.n_ctx})
    if args.windows:
        views = parse_windows(args.windows)
    else:
        views = single_window() if args.single else default_views()

    volume = load_volume(args.input)
    slab = extract_slab(volume, args.slice_index, config.n_ctx)
    rendered = render_views(slab, views)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    center = slab.n_ctx // 2
    lines = []
    for index, view in enumerate(rendered.views):
        target = out / f"view{index}.fimg"
        save_float_image(view.pixels, target)
        if args.png:
            save_view_png(view.pixels[center], out / f"view{index}.png")
        lines.append(f"view{index} {view.window}\n")
        print(f"{target.name}: window {view.window}, slices {list(slab.source_indices)}")
    (out / "windows.txt").write_text("".join(lines), encoding="utf-8")
    config.write_echo(out)
    return EXIT_OK
