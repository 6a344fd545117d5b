"""Tests for :mod:`mvp_model`"""

import math

import numpy as np
import pytest

import autodiff as ad
from config import build_run_config
from detect_post import AnchorSet, Box, encode_boxes, flip_boxes_horizontal, generate_anchors, iou
from errors import LabelError, ShapeError
from mvp_model import (
    AttentionFusion,
    BackboneConfig,
    ModelConfig,
    PositionLabel,
    attention_fuse,
    create_model,
    detection_loss,
    detection_targets,
    forward_backbone,
    model_config_from_run,
    position_loss,
    total_loss,
)


def _small_config(**overrides):
    values = dict(
        num_views=3,
        n_ctx=3,
        backbone=BackboneConfig(stages=(4, 8, 8), stage_stride=2, pyramid_channels=4, pyramid_levels=2),
        attention="cbam",
        reduction=2,
        position=True,
        anchor_set=AnchorSet((8.0, 16.0), (0.5, 1.0, 2.0)),
        head_channels=4,
        position_hidden=4,
    )
    values.update(overrides)
    return ModelConfig(**values)


def _attention_oracle(features, w0, b0, w1, b1):
    n, c, h, w = features.shape
    out = np.zeros_like(features)
    weights = np.zeros((n, c))
    for ni in range(n):
        pooled = []
        for ci in range(c):
            values = [features[ni, ci, y, x] for y in range(h) for x in range(w)]
            pooled.append(sum(values) / len(values) + max(values))
        hidden = [max(0.0, b0[j] + sum(w0[j, ci] * pooled[ci] for ci in range(c))) for j in range(len(b0))]
        for ci in range(c):
            z = b1[ci] + sum(w1[ci, j] * hidden[j] for j in range(len(hidden)))
            weights[ni, ci] = 1.0 / (1.0 + math.exp(-z))
            out[ni, ci] = features[ni, ci] * weights[ni, ci]
    return out, weights


def _fusion(rng, channels=6, reduction=2):
    params = {}
    return AttentionFusion(params, channels, reduction, "cbam", rng), params


# =============================================================================
# BACKBONE
# =============================================================================

def test_identical_views_give_identical_pyramids():
    model = create_model(_small_config(), seed=1)
    view = np.random.default_rng(0).random((2, 3, 16, 16))
    outputs = model.forward(np.stack([view, view, view], axis=1))
    for level in range(2):
        np.testing.assert_array_equal(outputs.per_view[0][level].data, outputs.per_view[1][level].data)
        np.testing.assert_array_equal(outputs.per_view[0][level].data, outputs.per_view[2][level].data)


def test_zero_input_with_zero_biases_gives_zero_pyramid():
    model = create_model(_small_config(), seed=2)
    for level in forward_backbone(model.backbone, ad.Tensor(np.zeros((1, 3, 16, 16)))):
        np.testing.assert_array_equal(level.data, 0.0)


def test_pyramid_shapes_halve_per_level():
    model = create_model(_small_config(), seed=3)
    pyramid = forward_backbone(model.backbone, ad.Tensor(np.random.default_rng(1).random((2, 3, 32, 32))))
    assert [level.shape for level in pyramid] == [(2, 4, 8, 8), (2, 4, 4, 4)]
    assert all(np.all(np.isfinite(level.data)) for level in pyramid)
    assert model.config.backbone.level_strides() == [4, 8]


def test_forward_output_shapes():
    config = _small_config()
    model = create_model(config, seed=4)
    outputs = model.forward(np.random.default_rng(2).random((2, 3, 3, 16, 16)))
    n_anchors = (4 * 4 + 2 * 2) * 3
    assert outputs.anchors.shape == (n_anchors, 4)
    assert outputs.objectness.shape == (2, n_anchors)
    assert outputs.deltas.shape == (2, n_anchors, 4)
    assert outputs.position_logits.shape == (2, 3)
    assert outputs.position_regression.shape == (2, 1)
    assert outputs.image_size == (16, 16)


def test_forward_rejects_wrong_view_count():
    model = create_model(_small_config(), seed=5)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 2, 3, 16, 16)))


def test_single_view_without_position_head():
    model = create_model(_small_config(num_views=1, attention="concat", position=False), seed=6)
    outputs = model.forward(np.random.default_rng(3).random((1, 1, 3, 16, 16)))
    assert outputs.position_logits is None
    assert not any(name.startswith(("attention.", "position.")) for name in model.params)


# =============================================================================
# ATTENTION FUSION
# =============================================================================

def test_zero_theta_gives_half_weights():
    rng = np.random.default_rng(7)
    fusion, params = _fusion(rng)
    for tensor in params.values():
        tensor.data[...] = 0.0
    views = [ad.Tensor(rng.normal(size=(2, 3, 4, 4))) for _ in range(2)]
    fused = fusion(views)
    concatenated = np.concatenate([v.data for v in views], axis=1)
    np.testing.assert_array_equal(fusion.weights(ad.Tensor(concatenated)).data, 0.5)
    np.testing.assert_array_equal(fused.data, 0.5 * concatenated)


def test_zero_features_stay_zero():
    fusion, params = _fusion(np.random.default_rng(8))
    fused = fusion([ad.Tensor(np.zeros((1, 3, 4, 4))), ad.Tensor(np.zeros((1, 3, 4, 4)))])
    np.testing.assert_array_equal(fused.data, 0.0)


def test_fusion_matches_scalar_oracle():
    rng = np.random.default_rng(9)
    for _ in range(50):
        fusion, params = _fusion(rng)
        for tensor in params.values():
            tensor.data[...] = rng.normal(size=tensor.shape)
        views = [rng.normal(size=(2, 3, 3, 4)) for _ in range(2)]
        fused = fusion([ad.Tensor(v) for v in views]).data
        expected, weights = _attention_oracle(
            np.concatenate(views, axis=1),
            params["attention.theta0.weight"].data, params["attention.theta0.bias"].data,
            params["attention.theta1.weight"].data, params["attention.theta1.bias"].data,
        )
        assert np.max(np.abs(fused - expected)) <= 1e-10 * max(1.0, np.max(np.abs(expected)))
        assert np.all((weights > 0) & (weights < 1))


def test_weights_ignore_spatial_permutation():
    rng = np.random.default_rng(10)
    fusion, _ = _fusion(rng)
    # multiples of 1/8 keep every pooled sum exact under any summation order
    features = rng.integers(-16, 16, size=(2, 6, 4, 4)) / 8.0
    permutation = rng.permutation(16)
    shuffled = features.reshape(2, 6, 16)[:, :, permutation].reshape(2, 6, 4, 4)
    original = fusion.weights(ad.Tensor(features)).data
    np.testing.assert_array_equal(original, fusion.weights(ad.Tensor(shuffled)).data)
    assert np.all((original > 0) & (original < 1))


def test_theta_is_shared_across_levels():
    model = create_model(_small_config(), seed=11)
    theta_names = [name for name in model.params if name.startswith("attention.")]
    assert theta_names == ["attention.theta0.weight", "attention.theta0.bias",
                           "attention.theta1.weight", "attention.theta1.bias"]
    rng = np.random.default_rng(11)
    per_view = [[ad.Tensor(rng.random((1, 4, 4, 4))), ad.Tensor(rng.random((1, 4, 2, 2)))] for _ in range(3)]
    assert [level.shape for level in attention_fuse(model.fusion, per_view)] == [(1, 12, 4, 4), (1, 12, 2, 2)]


# =============================================================================
# POSITION LOSS
# =============================================================================

def test_position_loss_perfect_prediction():
    labels = [PositionLabel(0, 0.1), PositionLabel(2, 0.9)]
    logits = ad.Tensor([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]])
    loss = position_loss(logits, ad.Tensor([[0.1], [0.9]]), labels)
    assert loss.item() < 1e-20


def test_position_loss_uniform_is_ln3():
    labels = [PositionLabel(1, 0.5)]
    loss = position_loss(ad.Tensor(np.zeros((1, 3))), ad.Tensor([[0.5]]), labels)
    assert loss.item() == pytest.approx(math.log(3), abs=1e-9)


def test_position_loss_matches_scalar_oracle():
    rng = np.random.default_rng(12)
    for trial in range(20):
        logits = rng.normal(size=(4, 3))
        regression = rng.normal(size=(4, 1))
        labels = [PositionLabel(int(rng.integers(3)), float(rng.random())) for _ in range(4)]
        total = 0.0
        for i, label in enumerate(labels):
            log_sum = math.log(sum(math.exp(v) for v in logits[i]))
            total += (log_sum - logits[i, label.y]) / 4
            total += (regression[i, 0] - label.p) ** 2 / 4
        loss = position_loss(ad.Tensor(logits), ad.Tensor(regression), labels)
        assert loss.item() == pytest.approx(total, rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("y, p", [(3, 0.5), (-1, 0.5), (0, 1.5)])
def test_invalid_position_labels(y, p):
    with pytest.raises(LabelError):
        PositionLabel(y, p)


# =============================================================================
# DETECTION LOSS
# =============================================================================

def _scalar_labels(anchors, gt, pos, neg):
    labels, matched = [], []
    for a in anchors:
        overlaps = [iou(Box.from_row(a), Box.from_row(g)) for g in gt]
        best = max(overlaps) if overlaps else 0.0
        labels.append(1 if best >= pos else (0 if best < neg else -1))
        matched.append(overlaps.index(best) if overlaps else -1)
    for g in range(len(gt)):
        column = [iou(Box.from_row(a), Box.from_row(gt[g])) for a in anchors]
        top = max(column)
        if top > 0:
            for index, value in enumerate(column):
                if value == top:
                    labels[index], matched[index] = 1, g
    return labels, matched


def _softplus(z):
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def _smooth_l1(d):
    return 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5


def test_detection_loss_matches_per_anchor_oracle():
    rng = np.random.default_rng(13)
    anchors = generate_anchors([(4, 4), (2, 2)], AnchorSet((8.0, 16.0), (0.5, 1.0, 2.0)), [4, 8])
    gt_boxes = [np.array([[2.0, 3.0, 10.0, 9.0], [8.0, 8.0, 15.0, 16.0]]), np.zeros((0, 4)),
                np.array([[0.0, 4.0, 6.0, 13.0]])]
    objectness = rng.normal(size=(3, anchors.shape[0]))
    deltas = rng.normal(0, 0.7, size=(3, anchors.shape[0], 4))

    bce_sum, counted, reg_sum, positives = 0.0, 0, 0.0, 0
    for i, gt in enumerate(gt_boxes):
        labels, matched = _scalar_labels(anchors, gt, 0.5, 0.3)
        for a, label in enumerate(labels):
            if label < 0:
                continue
            z = objectness[i, a]
            bce_sum += _softplus(-z) if label == 1 else _softplus(z)
            counted += 1
            if label == 1:
                target = encode_boxes(anchors[a:a + 1], gt[matched[a]:matched[a] + 1])[0]
                reg_sum += sum(_smooth_l1(deltas[i, a, k] - target[k]) for k in range(4))
                positives += 1
    expected = bce_sum / counted + 2.0 * reg_sum / positives

    loss = detection_loss(ad.Tensor(objectness), ad.Tensor(deltas), gt_boxes, anchors, lambda_reg=2.0)
    assert loss.item() == pytest.approx(expected, rel=1e-10)


def test_no_gt_and_confident_background_gives_zero_loss():
    anchors = generate_anchors([(2, 2)], AnchorSet((8.0,), (1.0,)), [8])
    loss = detection_loss(ad.Tensor(np.full((1, 4), -50.0)), ad.Tensor(np.zeros((1, 4, 4))), [np.zeros((0, 4))], anchors)
    assert loss.item() < 1e-20


def test_perfect_deltas_leave_only_objectness():
    anchors = generate_anchors([(4, 4)], AnchorSet((8.0,), (1.0, 2.0)), [4])
    gt = [np.array([[1.0, 2.0, 9.0, 11.0]])]
    targets = detection_targets(anchors, gt)
    assert targets.num_positive > 0
    objectness = ad.Tensor(np.random.default_rng(14).normal(size=(1, anchors.shape[0])))
    loss = detection_loss(objectness, ad.Tensor(targets.deltas), gt, anchors)
    bce = ad.binary_cross_entropy_with_logits(objectness, targets.objectness, targets.objectness_mask)
    assert loss.item() == pytest.approx(bce.item(), rel=1e-14)


def test_total_loss_linearity():
    det, pos = ad.Tensor(1.25), ad.Tensor(0.75)
    assert total_loss(det, pos, 0.0).item() == 1.25
    assert total_loss(det, pos, 2.0).item() - 1.25 == pytest.approx(2 * (total_loss(det, pos, 1.0).item() - 1.25))
    assert total_loss(det, pos, 1.0).item() == pytest.approx(det.item() + pos.item(), abs=1e-12)
    assert total_loss(det, None, 1.0) is det


def test_compute_losses_parts_add_up():
    model = create_model(_small_config(), seed=15)
    views = np.random.default_rng(15).random((2, 3, 3, 16, 16))
    boxes = [np.array([[3.0, 3.0, 11.0, 10.0]]), np.zeros((0, 4))]
    labels = [PositionLabel(0, 0.2), PositionLabel(1, 0.5)]
    losses = model.compute_losses(views, boxes, labels).as_floats()
    assert losses["total"] == pytest.approx(losses["detection"] + losses["position"], abs=1e-12)
    assert all(math.isfinite(v) for v in losses.values())


def test_flip_consistency_with_bias_only_weights():
    model = create_model(_small_config(), seed=16)
    for name, tensor in model.params.items():
        if not name.endswith(".bias"):
            tensor.data[...] = 0.0
    views = np.random.default_rng(16).random((2, 3, 3, 16, 16))
    boxes = [np.array([[3.0, 3.0, 11.0, 10.0]]), np.array([[1.0, 6.0, 6.0, 15.0], [9.0, 0.0, 16.0, 5.0]])]
    flipped = [flip_boxes_horizontal(b, 16.0) for b in boxes]

    original = model.compute_losses(views, boxes).as_floats()["detection"]
    mirrored = model.compute_losses(views[..., ::-1].copy(), flipped).as_floats()["detection"]
    assert original > 0.0
    assert mirrored == pytest.approx(original, rel=1e-12)


def test_model_config_from_run():
    config = model_config_from_run(build_run_config(overrides={"views": "single", "position": "off"}))
    assert config.num_views == 1
    assert config.position is False
    assert config.fused_channels == config.backbone.pyramid_channels
