"""
Tests for model evaluation against baselines
"""

from types import SimpleNamespace

import pytest

from modules.binaural import SceneSpec
from modules.config import merge
from modules.dataset import GeneratedExamples
from modules.error_handler import CheckpointError, ConfigError
from modules.evaluation import BASELINES, evaluate, is_same_side, mono_mono
from modules.scene_gen import AssetBank
from modules.trainer import Points2SoundModel


@pytest.fixture
def model(tiny_train_config):
    return Points2SoundModel.initialize(tiny_train_config)


@pytest.fixture
def eval_set(tiny_train_config):
    return GeneratedExamples(AssetBank(tiny_train_config.scene), "test", 11, 4)


def test_report_rows_and_counts(model, eval_set):
    report = evaluate(model, eval_set, include_oracle=True)
    assert set(report.scores) == {"model", "oracle", *BASELINES}
    oracle = report.means("oracle")
    assert oracle["env"]["avg"] == 0.0
    assert oracle["stft"]["avg"] == 0.0
    mono = report.means("mono-mono")
    assert mono["env"]["avg"] > 0.0
    assert mono["stft"]["avg"] > 0.0
    assert sum(report.counts().values()) == report.size == 4


def test_report_dict(model, eval_set, tmp_path):
    report = evaluate(model.to_checkpoint(), eval_set, baselines=("mono-mono",))
    data = report.to_dict()
    assert set(data) == {"methods", "counts", "size", "quartiles", "two_source_sides"}
    assert set(data["methods"]) == {"model", "mono-mono"}
    assert set(data["methods"]["model"]["env"]) == {"1", "2", "3", "avg"}
    empty = [b for b, n in data["counts"].items() if n == 0]
    for bucket in empty:
        assert data["methods"]["model"]["stft"][bucket] is None
    report.save(tmp_path / "out" / "report.json")
    assert (tmp_path / "out" / "report.json").is_file()


def test_unknown_baseline(model, eval_set):
    with pytest.raises(ConfigError):
        evaluate(model, eval_set, baselines=("mono-mono", "stereo-panning"))


def test_sample_rate_mismatch(model, small_scene_config):
    config = merge(small_scene_config, {"sample_rate": 16000})
    other_rate = GeneratedExamples(AssetBank(config), "test", 0, 1)
    with pytest.raises(CheckpointError):
        evaluate(model, other_rate)


def test_mono_mono_copies_mixture(eval_set):
    example = eval_set.get(0)
    estimate = mono_mono(example)
    assert estimate.channels == 2
    assert (estimate.samples[0] == example.s_m.samples[0]).all()
    assert (estimate.samples[1] == example.s_m.samples[0]).all()


@pytest.mark.parametrize("indices,expected", [
    ((1, 3), True),
    ((5, 7), True),
    ((1, 7), False),
    ((0, 2), False),
    ((4, 6), False),
])
def test_is_same_side(indices, expected):
    spec = SceneSpec([("cello", k, 1.5) for k in indices], 0.25)
    assert is_same_side(SimpleNamespace(spec=spec)) is expected


def test_mono_mono_row_is_independent_of_checkpoint(tiny_train_config, eval_set):
    first = evaluate(Points2SoundModel.initialize(tiny_train_config), eval_set, baselines=("mono-mono",))
    other_config = merge(tiny_train_config, {"seed": tiny_train_config.seed + 5}).resolve()
    second = evaluate(Points2SoundModel.initialize(other_config), eval_set, baselines=("mono-mono",))
    assert first.to_dict()["methods"]["mono-mono"] == second.to_dict()["methods"]["mono-mono"]
    assert first.to_dict()["methods"]["model"] != second.to_dict()["methods"]["model"]
