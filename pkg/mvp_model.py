"""
MVP Model - multi-view, position-aware lesion detector at toy scale

Graph:
    views (k, each n_ctx slices) -> shared FPN-lite backbone per view
    -> per level: channel concat of views -> channel attention (theta shared
       across levels) -> fused pyramid
    -> detection head (shared across levels): objectness + 4 box deltas per anchor
    -> position head on the coarsest fused level: zone classifier (phi) and
       continuous z regressor (psi)

The single-stage head stands in for a two-stage proposal/classifier detector.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from config import NEGATIVE_IOU, OBJECTNESS_PRIOR, POSITION_CLASSES, POSITIVE_IOU, RunConfig
from detect_post import AnchorSet, assign_anchors, encode_boxes, generate_anchors
from errors import AnchorError, LabelError, ShapeError
from utils.validators import validate_position_label

logger = logging.getLogger(__name__)


# =============================================================================
# CONFIGURATION TYPES
# =============================================================================

@dataclass(frozen=True)
class BackboneConfig:
    """
    Conv stages (3x3, ReLU) and the pyramid built on the last stages

    Attributes:
        stages: Output channels per stage
        stage_stride: Stride of every stage
        pyramid_channels: Channels of every pyramid level
        pyramid_levels: Number of levels taken from the last stages
    """
    stages: Tuple[int, ...] = (8, 16, 32)
    stage_stride: int = 2
    pyramid_channels: int = 32
    pyramid_levels: int = 2

    def __post_init__(self):
        if not self.stages:
            raise ShapeError("Backbone needs at least one stage")
        if not 1 <= self.pyramid_levels <= len(self.stages):
            raise ShapeError(f"pyramid_levels must be in [1, {len(self.stages)}], got {self.pyramid_levels}")

    def level_strides(self) -> List[int]:
        first = len(self.stages) - self.pyramid_levels
        return [self.stage_stride ** (i + 1) for i in range(first, len(self.stages))]


@dataclass(frozen=True)
class LossWeights:
    lambda_pos: float = 1.0
    lambda_reg: float = 1.0

    def __post_init__(self):
        if self.lambda_pos < 0 or self.lambda_reg < 0:
            raise ValueError(f"Loss weights must be nonnegative, got {self.lambda_pos}, {self.lambda_reg}")


@dataclass(frozen=True)
class ModelConfig:
    """Everything that shapes the graph"""
    num_views: int = 3
    n_ctx: int = 3
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: str = "cbam"
    reduction: int = 4
    position: bool = True
    anchor_set: AnchorSet = field(default_factory=AnchorSet)
    head_channels: int = 32
    position_hidden: int = 16
    positive_iou: float = POSITIVE_IOU
    negative_iou: float = NEGATIVE_IOU
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def fused_channels(self) -> int:
        return self.num_views * self.backbone.pyramid_channels


@dataclass(frozen=True)
class PositionLabel:
    """Discrete zone (0=chest, 1=abdomen, 2=pelvis) and continuous z in [0, 1]"""
    y: int
    p: float

    def __post_init__(self):
        is_valid, message = validate_position_label(self.y, self.p)
        if not is_valid:
            raise LabelError(message)


def model_config_from_run(config: RunConfig) -> ModelConfig:
    """Translate a RunConfig into a ModelConfig"""
    return ModelConfig(
        num_views=1 if config.views == "single" else 3,
        n_ctx=config.n_ctx,
        backbone=BackboneConfig(
            stages=tuple(config.stages),
            stage_stride=config.stage_stride,
            pyramid_channels=config.pyramid_channels,
            pyramid_levels=config.pyramid_levels,
        ),
        attention=config.attention,
        reduction=config.reduction,
        position=config.position == "on",
        anchor_set=AnchorSet(tuple(config.anchor_scales), tuple(config.aspect_ratios)),
        positive_iou=config.positive_iou,
        negative_iou=config.negative_iou,
        weights=LossWeights(config.lambda_pos, config.lambda_reg),
    )


# =============================================================================
# LAYERS
# =============================================================================

class Conv2d:
    def __init__(self, params: Dict[str, Tensor], name: str, in_channels: int, out_channels: int,
                 kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel * kernel
        self.weight = ad.parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel, kernel)),
                                   name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros(out_channels), name=f"{name}.bias")
        self.stride = stride
        self.padding = padding
        params[self.weight.name] = self.weight
        params[self.bias.name] = self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear:
    def __init__(self, params: Dict[str, Tensor], name: str, in_features: int, out_features: int,
                 rng: np.random.Generator):
        self.weight = ad.parameter(rng.normal(0.0, math.sqrt(1.0 / in_features), (out_features, in_features)),
                                   name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros(out_features), name=f"{name}.bias")
        params[self.weight.name] = self.weight
        params[self.bias.name] = self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return ad.fully_connected(x, self.weight, self.bias)


# =============================================================================
# BACKBONE, FUSION AND HEADS
# =============================================================================

class Backbone:
    """Strided conv stages plus a top-down pyramid with 1x1 laterals"""

    def __init__(self, params: Dict[str, Tensor], config: BackboneConfig, in_channels: int,
                 rng: np.random.Generator):
        self.config = config
        self.in_channels = in_channels
        self.stages: List[Conv2d] = []
        channels = in_channels
        for index, out_channels in enumerate(config.stages):
            self.stages.append(Conv2d(params, f"backbone.stage{index}", channels, out_channels, 3, rng,
                                      stride=config.stage_stride, padding=1))
            channels = out_channels
        first = len(config.stages) - config.pyramid_levels
        self.laterals = [
            Conv2d(params, f"backbone.lateral{level}", config.stages[first + level], config.pyramid_channels, 1, rng)
            for level in range(config.pyramid_levels)
        ]

    def __call__(self, x: Tensor) -> List[Tensor]:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Backbone expects (N, {self.in_channels}, H, W), got {x.shape}")
        features = []
        for stage in self.stages:
            x = ad.relu(stage(x))
            features.append(x)
        first = len(self.stages) - self.config.pyramid_levels
        laterals = [lateral(f) for lateral, f in zip(self.laterals, features[first:])]

        pyramid = [laterals[-1]]
        for lateral in reversed(laterals[:-1]):
            top = ad.upsample_nearest(pyramid[0], self.config.stage_stride)
            if top.shape != lateral.shape:
                top = ad.getitem(top, (slice(None), slice(None), slice(0, lateral.shape[2]), slice(0, lateral.shape[3])))
            pyramid.insert(0, ad.add(lateral, top))
        return pyramid


class AttentionFusion:
    """
    Channel attention over concatenated views: w = sigmoid(theta(avg(F) + max(F))),
    F_c = F * w. theta is a two-layer bottleneck (reduction r) shared by all levels.
    With mode "concat" the concatenated features pass through unchanged.
    """

    def __init__(self, params: Dict[str, Tensor], channels: int, reduction: int, mode: str,
                 rng: np.random.Generator):
        if mode not in ("cbam", "concat"):
            raise ValueError(f"Unknown attention mode {mode!r}")
        self.mode = mode
        self.channels = channels
        self.theta: List[Linear] = []
        if mode == "cbam":
            hidden = max(1, channels // reduction)
            self.theta = [
                Linear(params, "attention.theta0", channels, hidden, rng),
                Linear(params, "attention.theta1", hidden, channels, rng),
            ]

    def weights(self, fused: Tensor) -> Tensor:
        """Per-channel weights (N, C) strictly inside (0, 1)"""
        pooled = ad.add(ad.global_avg_pool(fused), ad.global_max_pool(fused))
        hidden = ad.relu(self.theta[0](pooled))
        return ad.sigmoid(self.theta[1](hidden))

    def __call__(self, per_view: Sequence[Tensor]) -> Tensor:
        fused = per_view[0] if len(per_view) == 1 else ad.concat(per_view, axis=1)
        if fused.shape[1] != self.channels:
            raise ShapeError(f"Fusion expects {self.channels} channels, got {fused.shape[1]}")
        if self.mode == "concat":
            return fused
        return ad.elementwise_mul(fused, self.weights(fused))


class PositionHead:
    """phi: conv + gap + fc over the zone classes; psi: conv + gap + fc to a scalar"""

    def __init__(self, params: Dict[str, Tensor], channels: int, hidden: int, rng: np.random.Generator):
        self.phi_conv = Conv2d(params, "position.phi_conv", channels, hidden, 3, rng, padding=1)
        self.phi_fc = Linear(params, "position.phi_fc", hidden, len(POSITION_CLASSES), rng)
        self.psi_conv = Conv2d(params, "position.psi_conv", channels, hidden, 3, rng, padding=1)
        self.psi_fc = Linear(params, "position.psi_fc", hidden, 1, rng)

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        logits = self.phi_fc(ad.global_avg_pool(ad.relu(self.phi_conv(x))))
        regression = self.psi_fc(ad.global_avg_pool(ad.relu(self.psi_conv(x))))
        return logits, regression


class DetectionHead:
    """conv3x3 + relu + conv1x1 emitting (objectness, dx, dy, dw, dh) per anchor"""

    def __init__(self, params: Dict[str, Tensor], channels: int, hidden: int, anchors_per_position: int,
                 rng: np.random.Generator):
        self.anchors_per_position = anchors_per_position
        self.conv = Conv2d(params, "detection.conv", channels, hidden, 3, rng, padding=1)
        self.out = Conv2d(params, "detection.out", hidden, anchors_per_position * 5, 1, rng)
        self.out.weight.data *= 0.1
        prior_bias = -math.log((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR)
        self.out.bias.data[0::5] = prior_bias

    def __call__(self, level: Tensor) -> Tensor:
        """(N, C, H, W) -> (N, H * W * A, 5)"""
        n, _, h, w = level.shape
        raw = self.out(ad.relu(self.conv(level)))
        return ad.reshape(ad.transpose(raw, (0, 2, 3, 1)), (n, h * w * self.anchors_per_position, 5))


@dataclass
class ModelOutputs:
    """
    Attributes:
        objectness: (N, A_total) logits
        deltas: (N, A_total, 4)
        position_logits: (N, 3) or None
        position_regression: (N, 1) or None
        per_view: Pyramid features per view
        fused: Fused pyramid levels
        anchors: (A_total, 4)
        image_size: (height, width) of the input
    """
    objectness: Tensor
    deltas: Tensor
    position_logits: Optional[Tensor]
    position_regression: Optional[Tensor]
    per_view: List[List[Tensor]]
    fused: List[Tensor]
    anchors: np.ndarray
    image_size: Tuple[int, int]


@dataclass
class LossBreakdown:
    total: Tensor
    detection: Tensor
    position: Optional[Tensor]

    def as_floats(self) -> Dict[str, float]:
        return {
            "total": self.total.item(),
            "detection": self.detection.item(),
            "position": self.position.item() if self.position is not None else 0.0,
        }


class MvpModel:
    """The multi-view detector; parameters live in one name-ordered registry"""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        self.backbone = Backbone(self.params, config.backbone, config.n_ctx, rng)
        self.fusion = AttentionFusion(self.params, config.fused_channels, config.reduction, config.attention, rng)
        self.detection_head = DetectionHead(self.params, config.fused_channels, config.head_channels,
                                            config.anchor_set.anchors_per_position, rng)
        self.position_head = (
            PositionHead(self.params, config.fused_channels, config.position_hidden, rng) if config.position else None
        )
        self._anchor_cache: Dict[Tuple, np.ndarray] = {}

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def anchors_for(self, feature_shapes: Sequence[Tuple[int, int]]) -> np.ndarray:
        key = tuple(feature_shapes)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(feature_shapes, self.config.anchor_set,
                                                       self.config.backbone.level_strides())
        return self._anchor_cache[key]

    def forward(self, views: np.ndarray) -> ModelOutputs:
        """
        Run the graph on a batch

        Args:
            views: (N, k, n_ctx, H, W) rendered slabs, view order = window order

        Returns:
            ModelOutputs
        """
        views = np.asarray(views)
        if views.ndim != 5 or views.shape[1] != self.config.num_views:
            raise ShapeError(f"Expected (N, {self.config.num_views}, n_ctx, H, W) views, got {views.shape}")
        per_view = [forward_backbone(self.backbone, Tensor(views[:, v])) for v in range(views.shape[1])]
        fused = attention_fuse(self.fusion, per_view)

        head_outputs = [self.detection_head(level) for level in fused]
        combined = head_outputs[0] if len(head_outputs) == 1 else ad.concat(head_outputs, axis=1)
        objectness = ad.getitem(combined, (slice(None), slice(None), 0))
        deltas = ad.getitem(combined, (slice(None), slice(None), slice(1, 5)))

        logits = regression = None
        if self.position_head is not None:
            logits, regression = self.position_head(fused[-1])

        anchors = self.anchors_for([level.shape[2:] for level in fused])
        return ModelOutputs(objectness, deltas, logits, regression, per_view, fused, anchors,
                            (views.shape[3], views.shape[4]))

    def compute_losses(self, views: np.ndarray, gt_boxes: Sequence[np.ndarray],
                       labels: Optional[Sequence[PositionLabel]] = None) -> LossBreakdown:
        """Forward pass plus detection and (when enabled) position loss"""
        outputs = self.forward(views)
        det = detection_loss(outputs.objectness, outputs.deltas, gt_boxes, outputs.anchors,
                             lambda_reg=self.config.weights.lambda_reg,
                             positive_iou=self.config.positive_iou, negative_iou=self.config.negative_iou)
        pos = None
        if outputs.position_logits is not None and labels is not None:
            pos = position_loss(outputs.position_logits, outputs.position_regression, labels)
        return LossBreakdown(total_loss(det, pos, self.config.weights.lambda_pos), det, pos)


def create_model(config: Optional[ModelConfig] = None, seed: int = 0) -> MvpModel:
    """Factory function for an MvpModel (parameters in the current precision)"""
    return MvpModel(config or ModelConfig(), seed)


# =============================================================================
# GRAPH OPERATIONS
# =============================================================================

def forward_backbone(backbone: Backbone, view: Tensor) -> List[Tensor]:
    """Pyramid features of one view; every view goes through the same parameters"""
    return backbone(view)


def attention_fuse(fusion: AttentionFusion, per_view_features: Sequence[Sequence[Tensor]]) -> List[Tensor]:
    """
    Fuse per-view pyramids level by level with the same fusion parameters

    Raises:
        ShapeError: No views, or shapes differ across views at a level
    """
    if not per_view_features:
        raise ShapeError("attention_fuse needs at least one view")
    n_levels = len(per_view_features[0])
    fused = []
    for level in range(n_levels):
        maps = [features[level] for features in per_view_features]
        if any(m.shape != maps[0].shape for m in maps):
            raise ShapeError(f"View feature shapes differ at level {level}: {[m.shape for m in maps]}")
        fused.append(fusion(maps))
    return fused


def position_targets(labels: Sequence[PositionLabel]) -> Tuple[np.ndarray, np.ndarray]:
    """One-hot zone targets (N, 3) and continuous targets (N, 1)"""
    one_hot = np.zeros((len(labels), len(POSITION_CLASSES)))
    for i, label in enumerate(labels):
        if not 0 <= label.y < len(POSITION_CLASSES):
            raise LabelError(f"Position class must be in [0, {len(POSITION_CLASSES) - 1}], got {label.y}")
        one_hot[i, label.y] = 1.0
    return one_hot, np.array([[label.p] for label in labels], dtype=np.float64)


def position_loss(logits: Tensor, regression: Tensor, labels: Sequence[PositionLabel]) -> Tensor:
    """
    Batch-mean cross-entropy of the zone classifier plus batch-mean squared
    error of the continuous regressor

    Raises:
        LabelError: Class index out of range or p outside [0, 1]
    """
    if len(labels) != logits.shape[0]:
        raise ShapeError(f"{len(labels)} labels for a batch of {logits.shape[0]}")
    one_hot, continuous = position_targets(labels)
    return ad.add(ad.softmax_cross_entropy(logits, one_hot), ad.mse(regression, continuous))


@dataclass
class DetectionTargets:
    objectness: np.ndarray
    objectness_mask: np.ndarray
    deltas: np.ndarray
    deltas_mask: np.ndarray
    num_positive: int


def detection_targets(anchors: np.ndarray, gt_boxes: Sequence[np.ndarray],
                      positive_iou: float = POSITIVE_IOU, negative_iou: float = NEGATIVE_IOU) -> DetectionTargets:
    """Per-image anchor assignment stacked into (N, A) / (N, A, 4) target arrays"""
    if anchors.shape[0] == 0:
        raise AnchorError("Detection loss needs anchors")
    n, a = len(gt_boxes), anchors.shape[0]
    obj = np.zeros((n, a))
    obj_mask = np.zeros((n, a))
    deltas = np.zeros((n, a, 4))
    deltas_mask = np.zeros((n, a, 4))
    for i, boxes in enumerate(gt_boxes):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        assignment = assign_anchors(anchors, boxes, positive_iou, negative_iou)
        positive = assignment.labels == 1
        obj[i, positive] = 1.0
        obj_mask[i, assignment.labels >= 0] = 1.0
        if positive.any():
            deltas[i, positive] = encode_boxes(anchors[positive], boxes[assignment.matched_gt[positive]])
            deltas_mask[i, positive] = 1.0
    return DetectionTargets(obj, obj_mask, deltas, deltas_mask, int(deltas_mask[..., 0].sum()))


def detection_loss(objectness: Tensor, deltas: Tensor, gt_boxes: Sequence[np.ndarray], anchors: np.ndarray,
                   lambda_reg: float = 1.0, positive_iou: float = POSITIVE_IOU,
                   negative_iou: float = NEGATIVE_IOU) -> Tensor:
    """
    Objectness BCE over non-ignored anchors (averaged over their count) plus
    lambda_reg times smooth-L1 on positive-anchor deltas (averaged over the
    positive count). Images without positives add only the objectness term.

    Args:
        objectness: (N, A) logits
        deltas: (N, A, 4)
        gt_boxes: Per image (M_i, 4) boxes in input pixel space
        anchors: (A, 4)
    """
    if len(gt_boxes) != objectness.shape[0]:
        raise ShapeError(f"{len(gt_boxes)} gt lists for a batch of {objectness.shape[0]}")
    if objectness.shape[1] != anchors.shape[0]:
        raise ShapeError(f"{objectness.shape[1]} predictions for {anchors.shape[0]} anchors")
    targets = detection_targets(anchors, gt_boxes, positive_iou, negative_iou)
    classification = ad.binary_cross_entropy_with_logits(objectness, targets.objectness, targets.objectness_mask)
    regression = ad.smooth_l1(deltas, targets.deltas, targets.deltas_mask, normalizer=max(targets.num_positive, 1))
    return ad.add(classification, ad.scale(regression, lambda_reg))


def total_loss(detection: Tensor, position: Optional[Tensor], lambda_pos: float = 1.0) -> Tensor:
    """detection + lambda_pos * position"""
    if position is None:
        return detection
    return ad.add(detection, ad.scale(position, lambda_pos))
