"""Tests for :mod:`trainer`"""

import numpy as np
import pytest

from config import build_run_config
from errors import CheckpointError, EmptyDatasetError
from mvp_model import create_model, model_config_from_run
from phantom import PhantomSpec, generate
from trainer import (
    ABLATION_PRESETS,
    build_samples,
    gt_records,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from utils.id_generator import parse_image_id


def _config(**overrides):
    values = {
        "stages": "4, 8, 8",
        "pyramid_channels": 4,
        "anchor_scales": "8, 16",
        "resize_long_side": 32,
        "epochs": 1,
        "batch_size": 4,
        "precision": "test",
    }
    values.update(overrides)
    return build_run_config(overrides=values)


@pytest.fixture(scope="module")
def dataset():
    return generate(PhantomSpec(n_volumes=3, n_test=1), seed=11)


@pytest.fixture(scope="module")
def samples(dataset):
    return build_samples(dataset.split("train"), _config())


def _params(model):
    return {name: tensor.data.copy() for name, tensor in model.params.items()}


# =============================================================================
# SAMPLES
# =============================================================================

def test_one_sample_per_key_slice(dataset, samples):
    train_volumes = dataset.split("train")
    assert len(samples) == sum(len(v.key_slices) for v in train_volumes)
    expected = [(v.volume_id, z) for v in train_volumes for z in v.key_slices]
    assert [parse_image_id(s.image_id) for s in samples] == expected


def test_sample_shapes_and_scale(samples):
    for sample in samples:
        assert sample.views.shape == (3, 3, 32, 32)
        assert sample.scale == 0.5
        assert np.all((sample.views >= 0.0) & (sample.views <= 1.0))


def test_single_view_samples(dataset):
    (sample, *_) = build_samples(dataset.split("train"), _config(views="single", n_ctx=9))
    assert sample.views.shape == (1, 9, 32, 32)


def test_gt_records_are_in_original_pixels(dataset, samples):
    by_id = {}
    for image_id, box in gt_records(samples):
        by_id.setdefault(image_id, []).append(box.to_row())
    for volume in dataset.split("train"):
        for z in volume.key_slices:
            image_id = f"{volume.volume_id}_s{z:03d}"
            expected = [b.to_row() for b in volume.boxes[z]]
            np.testing.assert_allclose(by_id[image_id], expected, rtol=1e-12)


def test_presets_are_valid_configs():
    for name, preset in ABLATION_PRESETS.items():
        config = build_run_config(overrides=preset)
        assert config.n_ctx in (3, 9), name


# =============================================================================
# TRAINING
# =============================================================================

def test_zero_learning_rate_leaves_parameters_unchanged(samples):
    config = _config(learning_rate=0.0)
    init_seq, _ = np.random.SeedSequence(config.seed).spawn(2)
    initial = create_model(model_config_from_run(config), seed=int(init_seq.generate_state(1)[0]))
    result = train(samples, config)
    for name, data in _params(initial).items():
        np.testing.assert_array_equal(result.model.params[name].data, data)


def test_training_is_deterministic(samples):
    a = train(samples, _config(), seed=5)
    b = train(samples, _config(), seed=5)
    for name, data in _params(a.model).items():
        np.testing.assert_array_equal(b.model.params[name].data, data)
    assert a.log == b.log


def test_epoch_log(samples):
    result = train(samples, _config(epochs=2))
    assert [entry.epoch for entry in result.log] == [0, 1]
    assert all(entry.batches == -(-len(samples) // 4) for entry in result.log)
    assert all(np.isfinite(entry.total) for entry in result.log)


def test_empty_dataset():
    with pytest.raises(EmptyDatasetError):
        train([], _config())


@pytest.mark.slow
def test_loss_decreases(samples):
    result = train(samples, _config(epochs=6, learning_rate=0.01, decay_epochs="100"))
    assert result.log[-1].total < result.log[0].total


# =============================================================================
# PREDICTION
# =============================================================================

def test_predictions_in_original_coordinates(dataset, samples):
    config = _config(score_thresh=0.0, max_detections=5)
    model = train(samples, config).model
    records = predict(model, samples, config)
    ids = {s.image_id for s in samples}
    counts = {}
    for image_id, det in records:
        assert image_id in ids
        assert 0.0 <= det.box.x1 <= det.box.x2 <= 64.0
        assert 0.0 <= det.box.y1 <= det.box.y2 <= 64.0
        assert 0.0 <= det.score <= 1.0
        counts[image_id] = counts.get(image_id, 0) + 1
    assert counts and max(counts.values()) <= 5


# =============================================================================
# CHECKPOINTS
# =============================================================================

def test_checkpoint_round_trip(samples, tmp_path):
    config = _config()
    model = train(samples, config).model
    first = save_checkpoint(model, config, tmp_path / "a.mvp")
    second = save_checkpoint(model, config, tmp_path / "b.mvp")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes().startswith(b"MVPCKPT 1\n{")

    loaded, loaded_config = load_checkpoint(first)
    assert loaded_config.echo() == config.echo()
    for name, data in _params(model).items():
        np.testing.assert_array_equal(loaded.params[name].data, data)


def test_bad_checkpoints(samples, tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.mvp")

    garbage = tmp_path / "garbage.mvp"
    garbage.write_bytes(b"not a checkpoint\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(garbage)

    config = _config()
    path = save_checkpoint(create_model(model_config_from_run(config), seed=0), config, tmp_path / "ok.mvp")
    truncated = tmp_path / "truncated.mvp"
    truncated.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)
