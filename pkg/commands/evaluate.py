"""
Eval - sensitivity at fixed FPs per image from gt and detection files
"""

import logging

from config import EXIT_OK, load_run_config
from eval_froc import froc, fps_at_sensitivity, load_cases, report, write_curve_csv
from visualization import write_froc_html

logger = logging.getLogger(__name__)

NAME = "eval"


def add_parser(subparsers):
    parser = subparsers.add_parser(NAME, help="FROC evaluation (sensitivity at 0.5, 1, 2, 3, 4 FPs per image)")
    parser.add_argument("--gt", required=True, help="Ground truth: image_id x1 y1 x2 y2 lines")
    parser.add_argument("--detections", required=True, help="Detections: image_id score x1 y1 x2 y2 lines")
    parser.add_argument("--config", help="Run config file (key = value)")
    parser.add_argument("--iou", type=float, dest="eval_iou", help="IoU for a true positive (default 0.5)")
    parser.add_argument("--rates", dest="report_rates", help="Comma-separated FP rates (default 0.5,1,2,3,4)")
    parser.add_argument("--name", default="model", help="Row label in the table (default model)")
    parser.add_argument("--csv", help="Write the full curve as CSV")
    parser.add_argument("--plot", help="Write the curve as an HTML figure")
    parser.add_argument("--target-sensitivity", type=float, dest="target_sensitivity",
                        help="Also print the FP rate needed to reach this sensitivity (fraction)")
    parser.set_defaults(run=run)
    return parser


def run(args) -> int:
    config = load_run_config(args.config, {"eval_iou": args.eval_iou, "report_rates": args.report_rates})
    cases = load_cases(args.gt, args.detections)
    curve, sensitivities = froc(cases, config.report_rates, config.eval_iou)
    print(report({args.name: sensitivities}, config.report_rates), end="")

    if args.target_sensitivity is not None:
        needed = fps_at_sensitivity(curve, args.target_sensitivity)
        reached = f"{needed:.2f}" if needed is not None else "not reached"
        print(f"FPs per image at sensitivity {args.target_sensitivity:.2%}: {reached}")
    if args.csv:
        write_curve_csv(curve, args.csv)
    if args.plot:
        write_froc_html({args.name: curve}, args.plot)
    return EXIT_OK
