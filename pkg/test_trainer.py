"""
Tests for the joint model, its losses, checkpoints and the training loop
"""

import numpy as np
import pytest

from modules.audio import AudioClip
from modules.checkpoint import Checkpoint
from modules.config import merge
from modules.dataset import GeneratedExamples
from modules.error_handler import CheckpointError, SampleRateError, ShapeError, TrainingDivergedError
from modules.monitoring import read_training_log
from modules.scene_gen import AssetBank, generate_example
from modules.tensor import Tape, Tensor, precision
from modules.trainer import (
    Points2SoundModel,
    best_val_loss,
    configs_from_checkpoint,
    loss_diff,
    loss_full,
    output_width,
    recover_channels,
    train,
    validation_loss,
)


@pytest.fixture
def sources(tiny_train_config):
    bank = AssetBank(tiny_train_config.scene)
    return (GeneratedExamples(bank, "train", 0, 6),
            GeneratedExamples(bank, "val", 0, tiny_train_config.val_size))


def test_loss_full_is_mean_absolute_error():
    target = AudioClip(np.ones((2, 4)), 8000)
    assert loss_full(Tensor(np.zeros((2, 4))), target).item() == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        loss_full(Tensor(np.zeros((1, 4))), target)


def test_loss_diff_targets_left_minus_right():
    target = np.stack([np.full(4, 3.0), np.full(4, 1.0)])
    assert loss_diff(Tensor(np.full((1, 4), 2.0)), target).item() == pytest.approx(0.0)
    assert loss_diff(Tensor(np.zeros((1, 4))), target).item() == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        loss_diff(Tensor(np.zeros((2, 4))), target)


def test_recover_channels_round_trip(rng):
    binaural = rng.normal(size=(2, 500))
    left, right = binaural
    recovered = recover_channels(left + right, left - right)
    assert np.max(np.abs(recovered - binaural)) <= 1e-12
    clip = recover_channels(AudioClip(left + right, 8000), AudioClip(left - right, 8000))
    assert isinstance(clip, AudioClip) and clip.sample_rate == 8000
    with pytest.raises(ShapeError):
        recover_channels(np.zeros(4), np.zeros(5))


def test_prediction_shapes_per_loss_mode(tiny_train_config):
    example = generate_example(1, AssetBank(tiny_train_config.scene), tiny_train_config.scene, "val")
    for mode, width in (("full", 2), ("diff", 1)):
        config = merge(tiny_train_config, {"loss_mode": mode}).resolve()
        model = Points2SoundModel.initialize(config)
        assert model.output_channels == width
        estimate = model.predict(example.scene, example.s_m)
        assert estimate.samples.shape == (2, example.s_m.length)
    with pytest.raises(ShapeError):
        model.predict(example.scene, example.s_b)
    with pytest.raises(SampleRateError):
        model.predict(example.scene, AudioClip(example.s_m.samples, 16000))


def test_checkpoint_restores_model(tiny_train_config, tmp_path):
    model = Points2SoundModel.initialize(tiny_train_config)
    path = tmp_path / "model.p2sc"
    model.to_checkpoint().save(path)
    restored = Points2SoundModel.from_checkpoint(Checkpoint.load(path))
    example = generate_example(2, AssetBank(tiny_train_config.scene), tiny_train_config.scene, "test")
    a = model.predict(example.scene, example.s_m)
    b = restored.predict(example.scene, example.s_m)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert restored.feature_mode == "rgb-depth"


def test_checkpoint_mismatch_is_reported(tiny_train_config):
    ckpt = Points2SoundModel.initialize(tiny_train_config).to_checkpoint()
    del ckpt.tensors["audio.decoder.1.conv2.bias"]
    with pytest.raises(CheckpointError):
        Points2SoundModel.from_checkpoint(ckpt)
    with pytest.raises(CheckpointError):
        configs_from_checkpoint(Checkpoint({}))


def test_warm_start_skips_mismatched_arrays(tiny_train_config):
    donor = Points2SoundModel.initialize(merge(tiny_train_config, {"loss_mode": "diff"}).resolve())
    model = Points2SoundModel.initialize(merge(tiny_train_config, {"seed": 9}).resolve())
    loaded = model.load_matching(donor.to_checkpoint())
    assert 0 < loaded < len(model.parameters()) + len(model.vision.buffers)
    name = "stem.conv.weight"
    assert model.vision.tensors[name].data.tobytes() == donor.vision.tensors[name].data.tobytes()


def test_training_writes_log_and_best_checkpoint(tiny_train_config, sources, tmp_path):
    log_path = tmp_path / "run.log.jsonl"
    ckpt = train(tiny_train_config, *sources, log_path=log_path)
    records = read_training_log(log_path)
    assert [r["iter"] for r in records] == [1, 2, 3, 4]
    assert [r["iter"] for r in records if "val_loss" in r] == [2, 4]
    best = min(r["val_loss"] for r in records if "val_loss" in r)
    assert best_val_loss(ckpt) == pytest.approx(best)
    assert output_width(ckpt) == 2
    assert ckpt.adam is not None and ckpt.adam.step in (2, 4)


def test_training_is_deterministic(tiny_train_config, sources):
    a = train(tiny_train_config, *sources)
    b = train(tiny_train_config, *sources)
    assert set(a.tensors) == set(b.tensors)
    for name in a.tensors:
        assert a.tensors[name].tobytes() == b.tensors[name].tobytes()


def test_diff_training_has_one_output_channel(tiny_train_config, sources):
    config = merge(tiny_train_config, {"loss_mode": "diff", "iterations": 2}).resolve()
    assert output_width(train(config, *sources)) == 1


def test_overfits_a_single_scene(tiny_train_config):
    config = merge(tiny_train_config, {"iterations": 50, "eval_every": 10, "lr": 3e-3, "batch_size": 1,
                                       "val_size": 1}).resolve()
    bank = AssetBank(config.scene)
    single = GeneratedExamples(bank, "train", 4, 1, augment=False)
    initial = validation_loss(Points2SoundModel.initialize(config), [single.get(0)], 1)
    ckpt = train(config, single, single)
    assert best_val_loss(ckpt) < initial


def test_non_finite_loss_aborts(tiny_train_config, sources, monkeypatch):
    monkeypatch.setattr(Points2SoundModel, "batch_loss",
                        lambda self, examples, training: Tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_train_config, *sources)
    assert info.value.iteration == 1


@pytest.fixture
def float64_model(tiny_train_config):
    config = merge(tiny_train_config, {"scene": {"min_sources": 1, "max_sources": 1}}).resolve()
    example = generate_example(5, AssetBank(config.scene), config.scene, "val")
    with precision(np.float64):
        model = Points2SoundModel.initialize(config)
        with Tape() as tape:
            tape.backward(model.batch_loss([example], training=False))
    grads = {name: tape.grad(tensor) for name, tensor in model.parameters().items()}
    return model, example, grads


def test_every_parameter_receives_a_gradient(float64_model):
    model, _, grads = float64_model
    assert len(grads) == len(model.audio.tensors) + len(model.vision.tensors)
    silent = [name for name, grad in grads.items() if grad is None or not np.any(grad != 0)]
    assert silent == []


def test_sampled_gradients_match_finite_differences(float64_model):
    model, example, grads = float64_model
    sampler = np.random.default_rng(0)
    eps = 1e-7
    mismatched = []
    with precision(np.float64):
        for name, tensor in model.parameters().items():
            for i in sampler.choice(tensor.data.size, size=min(2, tensor.data.size), replace=False):
                original = tensor.data.flat[i]
                tensor.data.flat[i] = original + eps
                plus = model.batch_loss([example], training=False).item()
                tensor.data.flat[i] = original - eps
                minus = model.batch_loss([example], training=False).item()
                tensor.data.flat[i] = original
                numeric, analytic = (plus - minus) / (2 * eps), grads[name].flat[i]
                if abs(numeric - analytic) > 1e-6 + 1e-3 * max(abs(numeric), abs(analytic)):
                    mismatched.append((name, int(i), numeric, analytic))
    assert mismatched == []
