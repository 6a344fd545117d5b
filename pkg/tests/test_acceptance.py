"""End-to-end ablation trend on the shipped phantom (run with --runslow)"""

import logging

import pytest

from config import DEFAULT_PHANTOM_SPEC, build_run_config
from eval_froc import build_cases, froc
from phantom import generate, load_phantom_spec
from trainer import ABLATION_PRESETS, build_samples, gt_records, predict, train

logger = logging.getLogger(__name__)

ROWS = ["single_view", "multi_view_concat", "multi_view_attention", "multi_view_attention_position"]
SEEDS = [0, 1, 2, 3, 4]


def _sensitivity_at_one(preset, dataset, seed):
    config = build_run_config(overrides=ABLATION_PRESETS[preset])
    train_samples = build_samples(dataset.split("train"), config)
    test_samples = build_samples(dataset.split("test"), config)
    model = train(train_samples, config, seed=seed).model

    gt, dets = {s.image_id: [] for s in test_samples}, {}
    for image_id, box in gt_records(test_samples):
        gt[image_id].append(box)
    for image_id, det in predict(model, test_samples, config):
        dets.setdefault(image_id, []).append(det)
    curve, _ = froc(build_cases(gt, dets))
    return curve.sensitivity_at(1.0)


@pytest.mark.slow
def test_ablation_trend():
    dataset = generate(load_phantom_spec(DEFAULT_PHANTOM_SPEC), seed=7)
    assert len(dataset.split("test")) == 20

    passing = 0
    for seed in SEEDS:
        values = [_sensitivity_at_one(row, dataset, seed) for row in ROWS]
        logger.info("seed %d: %s", seed, ", ".join(f"{v * 100:.2f}" for v in values))
        ordered = all(b >= a for a, b in zip(values, values[1:]))
        if ordered and values[-1] - values[0] >= 0.10:
            passing += 1
    assert passing >= 4
