"""
End-to-end tests of the points2sound command line
"""

import json

import numpy as np
import pytest
from scipy.io import wavfile

import points2sound
from modules.audio import AudioClip, read_wav, write_wav
from modules.error_handler import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE
from modules.monitoring import read_training_log
from modules.pointcloud import write_cloud
from modules.scene_gen import AssetBank, generate_example
from modules.trainer import Points2SoundModel

TINY = {
    "seed": 3,
    "iterations": 2,
    "batch_size": 2,
    "eval_every": 1,
    "val_size": 2,
    "vision": {"stage_channels": [4, 4, 4, 4], "head_channels": 4, "voxel_size": 0.1},
    "audio": {"depth": 2, "initial_channels": 2},
    "scene": {
        "instruments": ["cello", "violin"],
        "clip_seconds": 0.25,
        "eval_clip_seconds": 0.25,
        "identities_per_instrument": 6,
        "bank_clips_per_instrument": 2,
    },
}


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for var in ("P2S_PRESET", "P2S_SEED", "P2S_THREADS", "LOG_FILE"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def gen(out, split, count, config_file, seed=5):
    return points2sound.main(["gen-data", "--out", str(out), "--count", str(count), "--seed", str(seed),
                              "--split", split, "--config", config_file, "--threads", "1"])


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def checkpoint_path(tiny_train_config, tmp_path):
    path = tmp_path / "model.p2sc"
    Points2SoundModel.initialize(tiny_train_config).to_checkpoint().save(path)
    return str(path)


@pytest.fixture
def scene_files(tiny_train_config, tmp_path):
    example = generate_example(21, AssetBank(tiny_train_config.scene), tiny_train_config.scene, "test")
    scene, mono = tmp_path / "scene.p2s-cloud", tmp_path / "mono.wav"
    write_cloud(scene, example.scene)
    write_wav(mono, example.s_m)
    return str(scene), str(mono), example.s_m.length


def test_gen_data_is_reproducible(tmp_path, config_file):
    assert gen(tmp_path / "a", "test", 3, config_file) == EXIT_OK
    assert gen(tmp_path / "b", "test", 3, config_file) == EXIT_OK
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    info = json.loads((tmp_path / "a" / "test" / "dataset.json").read_text())
    assert info["augmentation"] is False
    assert info["scene"]["instruments"] == ["cello", "violin"]


def test_gen_data_rejects_bad_count(tmp_path, config_file):
    assert gen(tmp_path, "train", 0, config_file) == EXIT_USAGE


def test_train_requires_data(tmp_path, config_file):
    with pytest.raises(SystemExit) as info:
        points2sound.main(["train", "--out", str(tmp_path / "m.p2sc")])
    assert info.value.code == 2
    missing = points2sound.main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "m.p2sc"),
                                 "--config", config_file])
    assert missing == EXIT_USAGE


def test_train_writes_checkpoint_and_log(tmp_path, config_file):
    data = tmp_path / "data"
    assert gen(data, "train", 4, config_file) == EXIT_OK
    assert gen(data, "val", 2, config_file) == EXIT_OK
    out = tmp_path / "model.p2sc"
    code = points2sound.main(["train", "--data", str(data), "--out", str(out), "--config", config_file,
                              "--threads", "1"])
    assert code == EXIT_OK
    assert out.is_file()
    records = read_training_log(f"{out}.log.jsonl")
    assert [r["iter"] for r in records] == [1, 2]
    assert all("val_loss" in r for r in records)


def test_train_rejects_rate_mismatch(tmp_path, config_file):
    data = tmp_path / "data"
    assert gen(data, "train", 2, config_file) == EXIT_OK
    code = points2sound.main(["train", "--data", str(data), "--out", str(tmp_path / "m.p2sc"),
                              "--config", config_file, "--sample-rate", "16000", "--threads", "1"])
    assert code == EXIT_USAGE


def test_binauralize(tmp_path, checkpoint_path, scene_files):
    scene, mono, length = scene_files
    outputs = []
    for name, extra in (("a.wav", []), ("b.wav", []), ("rotated.wav", ["--rotate"])):
        out = tmp_path / name
        code = points2sound.main(["binauralize", "--ckpt", checkpoint_path, "--scene", scene, "--mono", mono,
                                  "--out", str(out), *extra])
        assert code == EXIT_OK
        outputs.append(out)
    a, b, rotated = (read_wav(p) for p in outputs)
    assert a.channels == 2 and a.length == length and a.sample_rate == 8000
    assert outputs[0].read_bytes() == outputs[1].read_bytes()
    assert not np.array_equal(a.samples, rotated.samples)


def test_binauralize_rejects_stereo_input(tmp_path, checkpoint_path, scene_files):
    scene, _, _ = scene_files
    stereo = tmp_path / "stereo.wav"
    write_wav(stereo, AudioClip(np.zeros((2, 400)), 8000))
    code = points2sound.main(["binauralize", "--ckpt", checkpoint_path, "--scene", scene, "--mono", str(stereo),
                              "--out", str(tmp_path / "out.wav")])
    assert code == EXIT_RUNTIME


def test_evaluate_writes_report(tmp_path, checkpoint_path, config_file):
    data = tmp_path / "data"
    assert gen(data, "test", 4, config_file) == EXIT_OK
    out = tmp_path / "report.json"
    assert points2sound.main(["evaluate", "--ckpt", checkpoint_path, "--data", str(data), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert set(report["methods"]) == {"model", "mono-mono", "rotated-visual"}
    for method in report["methods"].values():
        for metric in ("env", "stft"):
            assert set(method[metric]) == {"1", "2", "3", "avg"}
    assert report["size"] == 4


def test_pcm16_wav_round_trip(tmp_path, rng):
    samples = rng.uniform(-0.9, 0.9, size=(2, 300))
    samples[0, 0], samples[1, 0] = 1.0, -1.0
    path = tmp_path / "pcm.wav"
    write_wav(path, AudioClip(samples, 8000), fmt="pcm16")
    rate, raw = wavfile.read(str(path))
    assert rate == 8000
    assert raw.dtype == np.int16 and raw.shape == (300, 2)
    clip = read_wav(path)
    assert clip.channels == 2
    assert clip.samples[0, 0] == 32767 / 32768
    assert clip.samples[1, 0] == -1.0
    assert np.max(np.abs(clip.samples[:, 1:] - samples[:, 1:])) <= 0.5 / 32768 + 1e-12
    with pytest.raises(ValueError):
        write_wav(path, AudioClip(samples, 8000), fmt="pcm24")
