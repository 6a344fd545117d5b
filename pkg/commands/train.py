"""
Train - fit the detector on a phantom dataset, then detect and evaluate on its test split
"""

import logging
from pathlib import Path

import pandas as pd

from config import EXIT_OK, load_run_config
from detect_post import Box, Detection, format_detection_lines, format_gt_lines
from errors import EmptyDatasetError, UsageError
from eval_froc import build_cases, froc, report, write_curve_csv
from phantom import load_phantom_dir
from trainer import ABLATION_PRESETS, build_samples, gt_records, predict, save_checkpoint, train
from visualization import save_case_study

logger = logging.getLogger(__name__)

NAME = "train"


def add_parser(subparsers):
    parser = subparsers.add_parser(NAME, help="Train on a phantom dataset and evaluate on its test split")
    parser.add_argument("--data", required=True, help="Phantom directory written by phantom-gen")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--config", help="Run config file (key = value)")
    parser.add_argument("--preset", choices=sorted(ABLATION_PRESETS),
                        help="Ablation row to run; explicit flags still override it")
    parser.add_argument("--seed", type=int, help="Seed for initialization, shuffling and flips (default 0)")
    parser.add_argument("--epochs", type=int, help="SGD epochs (default 13; lr decays after epochs 10 and 12)")
    parser.add_argument("--views", choices=["single", "multi"],
                        help="Wide single window or the three clustered windows (default multi)")
    parser.add_argument("--attention", choices=["concat", "cbam"],
                        help="Plain concatenation or channel attention over views (default cbam)")
    parser.add_argument("--position", choices=["on", "off"], help="Position-aware auxiliary loss (default on)")
    parser.add_argument("--n-ctx", type=int, choices=[3, 9], dest="n_ctx", help="Context slices (default 3)")
    parser.add_argument("--case-study", type=int, default=0, dest="case_study",
                        help="Write overlays for the first N test images (default 0)")
    parser.set_defaults(run=run)
    return parser


def run(args) -> int:
    overrides = dict(ABLATION_PRESETS[args.preset]) if args.preset else {}
    for key in ("seed", "epochs", "views", "attention", "position", "n_ctx"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    config = load_run_config(args.config, overrides)
    if args.case_study < 0:
        raise UsageError(f"--case-study must be >= 0, got {args.case_study}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config.write_echo(out)

    dataset = load_phantom_dir(args.data)
    train_samples = build_samples(dataset.split("train"), config)
    test_samples = build_samples(dataset.split("test"), config)
    if not train_samples:
        raise EmptyDatasetError(f"{args.data} has no training key slices")
    logger.info("Training on %d key slices, testing on %d", len(train_samples), len(test_samples))

    result = train(train_samples, config)
    save_checkpoint(result.model, config, out / "checkpoint.mvp")
    pd.DataFrame([vars(entry) for entry in result.log]).to_csv(out / "train_log.csv", index=False,
                                                               float_format="%.6f")

    if not test_samples:
        logger.warning("No test key slices in %s; skipping evaluation", args.data)
        return EXIT_OK

    detections = predict(result.model, test_samples, config)
    ground_truth = gt_records(test_samples)
    (out / "test_gt.txt").write_text(format_gt_lines(ground_truth), encoding="utf-8")
    (out / "detections.txt").write_text(format_detection_lines(detections), encoding="utf-8")

    gt_by_image, det_by_image = {}, {}
    for image_id, box in ground_truth:
        gt_by_image.setdefault(image_id, []).append(box)
    for image_id, det in detections:
        det_by_image.setdefault(image_id, []).append(det)
    for sample in test_samples:
        gt_by_image.setdefault(sample.image_id, [])

    curve, sensitivities = froc(build_cases(gt_by_image, det_by_image), config.report_rates, config.eval_iou)
    table = report({args.preset or "model": sensitivities}, config.report_rates)
    (out / "report.txt").write_text(table, encoding="utf-8")
    write_curve_csv(curve, out / "froc_curve.csv")
    print(table, end="")

    for sample in test_samples[:args.case_study]:
        scaled_gt = [Box.from_row(row) for row in sample.gt_boxes]
        scaled_dets = [Detection(Box.from_row(d.box.to_row() * sample.scale), d.score)
                       for d in det_by_image.get(sample.image_id, [])]
        center = sample.views.shape[1] // 2
        save_case_study(sample.views[0, center], scaled_gt, scaled_dets,
                        out / "case_study" / f"{sample.image_id}.png")
    return EXIT_OK
