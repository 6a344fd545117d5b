"""
Training Service

Turns phantom volumes into training samples (key slices rendered under the
configured views), runs the SGD loop, produces detections, and stores/loads
checkpoints.

Checkpoint container:

    MVPCKPT 1
    {"config": {...}, "params": [{"name": ..., "offset": ..., "shape": [...]}, ...]}
    <blank line>
    little-endian float64 payload, parameters in table order
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from config import RunConfig, build_run_config, format_value
from detect_post import Box, Detection, decode_boxes, flip_boxes_horizontal, nms_indices
from errors import CheckpointError, DivergenceError, EmptyDatasetError, NonFiniteError
from mvp_model import MvpModel, PositionLabel, create_model, model_config_from_run
from phantom import PhantomVolume
from utils.id_generator import generate_image_id
from volume_io import extract_slab, resample_z, resize_xy, round_half_away
from windowing import ViewSet, default_views, render_views, single_window

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "MVPCKPT 1"

# The ablation rows, from the single-view baseline to the full model with 9 slices
ABLATION_PRESETS: Dict[str, Dict[str, object]] = {
    "single_view": {"views": "single", "attention": "concat", "position": "off", "n_ctx": 3},
    "multi_view_concat": {"views": "multi", "attention": "concat", "position": "off", "n_ctx": 3},
    "multi_view_attention": {"views": "multi", "attention": "cbam", "position": "off", "n_ctx": 3},
    "multi_view_attention_position": {"views": "multi", "attention": "cbam", "position": "on", "n_ctx": 3},
    "full_9_slices": {"views": "multi", "attention": "cbam", "position": "on", "n_ctx": 9},
}


@dataclass
class TrainingSample:
    """
    One key slice ready for the model

    Attributes:
        image_id: `<volume_id>_s<slice>` of the key slice (original indexing)
        views: (k, n_ctx, H, W) rendered, resized slab
        gt_boxes: (M, 4) boxes in resized pixel space
        position: Position label of the key slice
        scale: Resize factor (resized / original)
    """
    image_id: str
    views: np.ndarray
    gt_boxes: np.ndarray
    position: PositionLabel
    scale: float


@dataclass
class EpochLog:
    epoch: int
    learning_rate: float
    total: float
    detection: float
    position: float
    batches: int


@dataclass
class TrainResult:
    model: MvpModel
    log: List[EpochLog] = field(default_factory=list)


def views_for(config: RunConfig) -> ViewSet:
    return single_window() if config.views == "single" else default_views()


def build_samples(volumes: Sequence[PhantomVolume], config: RunConfig) -> List[TrainingSample]:
    """
    Key-slice samples: z-normalize, take the slab around each lesion center
    slice, render every view, resize in-plane
    """
    view_set = views_for(config)
    samples: List[TrainingSample] = []
    for pv in volumes:
        volume = resample_z(pv.volume, config.target_z_mm)
        ratio = pv.volume.spacing_mm[0] / volume.spacing_mm[0]
        for z in pv.key_slices:
            center = int(min(round_half_away(z * ratio), volume.num_slices - 1))
            slab = extract_slab(volume, center, config.n_ctx)
            rendered = render_views(slab, view_set).to_array()
            resized, scale = [], 1.0
            for view in rendered:
                channels = []
                for image in view:
                    result = resize_xy(image, config.resize_long_side)
                    channels.append(result.pixels)
                    scale = result.scale
                resized.append(np.stack(channels))
            boxes = np.array([b.to_row() for b in pv.boxes.get(z, [])], dtype=np.float64).reshape(-1, 4) * scale
            samples.append(TrainingSample(generate_image_id(pv.volume_id, z), np.stack(resized), boxes,
                                          pv.positions[z], scale))
    logger.debug("Built %d samples from %d volumes", len(samples), len(volumes))
    return samples


def _batch(samples: Sequence[TrainingSample], flips: Optional[np.ndarray] = None):
    views = np.stack([s.views for s in samples])
    boxes = [s.gt_boxes for s in samples]
    if flips is not None:
        width = views.shape[-1]
        views = views.copy()
        for i, flip in enumerate(flips):
            if flip:
                views[i] = views[i][..., ::-1]
                boxes[i] = flip_boxes_horizontal(boxes[i], width)
    return views, boxes, [s.position for s in samples]


def train(samples: Sequence[TrainingSample], config: RunConfig, seed: Optional[int] = None) -> TrainResult:
    """
    SGD training with horizontal-flip augmentation

    Model initialization and the shuffle/flip stream come from independent
    children of one SeedSequence, so a fixed seed fixes the whole run.

    Raises:
        EmptyDatasetError: No samples
        DivergenceError: Loss became NaN/Inf (reports the epoch)
    """
    if not samples:
        raise EmptyDatasetError("Cannot train on an empty dataset")
    seed = config.seed if seed is None else seed
    init_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    sgd_config = ad.SgdConfig(config.learning_rate, config.momentum, tuple(config.decay_epochs), config.decay_factor)

    with ad.precision(config.precision):
        model = create_model(model_config_from_run(config), seed=int(init_seq.generate_state(1)[0]))
        optimizer = ad.create_optimizer(model.parameters(), sgd_config)
        rng = np.random.default_rng(data_seq)
        result = TrainResult(model)
        for epoch in range(config.epochs):
            order = rng.permutation(len(samples))
            sums = {"total": 0.0, "detection": 0.0, "position": 0.0}
            batches = 0
            for start in range(0, len(order), config.batch_size):
                batch = [samples[i] for i in order[start:start + config.batch_size]]
                flips = rng.random(len(batch)) < config.flip_prob
                views, boxes, labels = _batch(batch, flips)
                try:
                    with ad.Tape() as tape:
                        losses = model.compute_losses(views, boxes, labels)
                        values = losses.as_floats()
                        if not math.isfinite(values["total"]):
                            raise DivergenceError(epoch, values["total"])
                        grads = tape.backward(losses.total)
                except NonFiniteError:
                    raise DivergenceError(epoch, float("nan"))
                optimizer.step(grads, epoch)
                for key in sums:
                    sums[key] += values[key]
                batches += 1

            entry = EpochLog(epoch, ad.learning_rate_at(sgd_config, epoch), sums["total"] / batches,
                             sums["detection"] / batches, sums["position"] / batches, batches)
            result.log.append(entry)
            logger.info("epoch %d lr %.6g loss %.6f (detection %.6f, position %.6f)",
                        entry.epoch, entry.learning_rate, entry.total, entry.detection, entry.position)
    return result


def predict(model: MvpModel, samples: Sequence[TrainingSample], config: RunConfig,
            batch_size: Optional[int] = None) -> List[Tuple[str, Detection]]:
    """
    Detections per sample in original (pre-resize) pixel coordinates

    Scores below score_thresh are dropped before NMS; at most max_detections
    survive per image.
    """
    batch_size = batch_size or config.batch_size
    records: List[Tuple[str, Detection]] = []
    with ad.precision(config.precision), ad.no_tape():
        for start in range(0, len(samples), batch_size):
            batch = list(samples[start:start + batch_size])
            views, _, _ = _batch(batch)
            outputs = model.forward(views)
            scores = 1.0 / (1.0 + np.exp(-outputs.objectness.data.astype(np.float64)))
            for i, sample in enumerate(batch):
                boxes = decode_boxes(outputs.anchors, outputs.deltas.data[i].astype(np.float64), outputs.image_size)
                keep = np.flatnonzero(scores[i] >= config.score_thresh)
                kept = nms_indices(boxes[keep], scores[i][keep], config.nms_iou)[:config.max_detections]
                for index in keep[kept]:
                    row = boxes[index] / sample.scale
                    records.append((sample.image_id, Detection(Box.from_row(row), float(scores[i][index]))))
    return records


def gt_records(samples: Sequence[TrainingSample]) -> List[Tuple[str, Box]]:
    """Ground truth of the samples in original pixel coordinates"""
    return [(s.image_id, Box.from_row(row / s.scale)) for s in samples for row in s.gt_boxes]


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(model: MvpModel, config: RunConfig, path) -> Path:
    """Write the model; identical models give byte-identical files"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, payload, offset = [], [], 0
    for name, tensor in model.params.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        table.append({"name": name, "offset": offset, "shape": list(data.shape)})
        payload.append(data.tobytes())
        offset += data.size
    header = json.dumps({"config": {k: format_value(v) for k, v in config.values.items()}, "params": table},
                        sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as handle:
        handle.write(f"{CHECKPOINT_MAGIC}\n{header}\n\n".encode("utf-8"))
        for chunk in payload:
            handle.write(chunk)
    return path


def load_checkpoint(path) -> Tuple[MvpModel, RunConfig]:
    """
    Rebuild a model and its config from a checkpoint

    Raises:
        CheckpointError: Missing file, bad header, or parameters that do not fit the model
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].decode("utf-8", "replace") != CHECKPOINT_MAGIC or parts[2] != b"":
        raise CheckpointError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    try:
        header = json.loads(parts[1].decode("utf-8"))
        config = build_run_config(file_values=header["config"])
        table = header["params"]
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})")
    values = np.frombuffer(parts[3], dtype="<f8")

    with ad.precision(config.precision):
        model = create_model(model_config_from_run(config), seed=0)
    if sorted(entry["name"] for entry in table) != sorted(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the configured model")
    for entry in table:
        tensor = model.params[entry["name"]]
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        if shape != tensor.shape or start + size > values.size:
            raise CheckpointError(f"{path}: parameter {entry['name']} has shape {shape}, expected {tensor.shape}")
        tensor.data = values[start:start + size].reshape(shape).astype(tensor.data.dtype)
    return model, config
