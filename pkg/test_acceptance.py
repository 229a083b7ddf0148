"""
Desk-scale acceptance run: train on two instruments, then compare against the
baselines on held-out scenes. Takes a long time; set P2S_RUN_SLOW=1 to run.
"""

import os

import pytest

from modules.config import TrainConfig
from modules.dataset import GeneratedExamples
from modules.evaluation import evaluate
from modules.scene_gen import AssetBank
from modules.trainer import output_width, train

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.getenv("P2S_RUN_SLOW") != "1", reason="set P2S_RUN_SLOW=1 for the desk run"),
]


@pytest.mark.parametrize("loss_mode", ["full", "diff"])
def test_desk_model_beats_baselines(loss_mode, tmp_path):
    config = TrainConfig.desk(scene={"instruments": ["cello", "violin"]}, loss_mode=loss_mode, threads=1).resolve()
    bank = AssetBank(config.scene)
    source = GeneratedExamples(bank, "train", config.seed, 4096)
    val_source = GeneratedExamples(bank, "val", config.seed, config.val_size)
    checkpoint = train(config, source, val_source, log_path=tmp_path / "desk.log.jsonl")
    assert output_width(checkpoint) == (2 if loss_mode == "full" else 1)

    report = evaluate(checkpoint, GeneratedExamples(bank, "test", config.seed, 96))
    report.save(tmp_path / "desk_report.json")
    model = report.means("model")
    mono = report.means("mono-mono")
    rotated = report.means("rotated-visual")
    for metric in ("env", "stft"):
        assert model[metric]["avg"] < mono[metric]["avg"]
        assert model[metric]["avg"] < rotated[metric]["avg"]
