"""
Shared pytest fixtures: seeded RNGs, small configurations and the
central finite-difference gradient check.
"""

import logging
from typing import Callable, List, Sequence

import numpy as np
import pytest

from modules.config import AudioNetConfig, SceneConfig, TrainConfig, VisionConfig
from modules.tensor import Tape, Tensor, precision

logging.basicConfig(format='%(asctime)s - %(name)s - %(levelname)s - %(message)s', level=logging.INFO)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (opt in with P2S_RUN_SLOW=1)")


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def finite_difference_check(build: Callable[[List[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                            eps: float = 1e-6) -> List[float]:
    """Relative errors between tape gradients and central differences, one per input (64-bit)"""
    with precision(np.float64):
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = build(tensors)
            tape.backward(loss)
        errors = []
        for tensor in tensors:
            analytic = tape.grad(tensor)
            if analytic is None:
                analytic = np.zeros_like(tensor.data)
            numeric = np.zeros_like(tensor.data)
            for idx in np.ndindex(tensor.shape):
                original = tensor.data[idx]
                tensor.data[idx] = original + eps
                plus = build(tensors).item()
                tensor.data[idx] = original - eps
                minus = build(tensors).item()
                tensor.data[idx] = original
                numeric[idx] = (plus - minus) / (2 * eps)
            errors.append(relative_error(analytic, numeric))
        return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gradient_check():
    return finite_difference_check


@pytest.fixture
def small_scene_config():
    return SceneConfig(instruments=("cello", "violin"), clip_seconds=0.25, eval_clip_seconds=0.25,
                       identities_per_instrument=6, bank_clips_per_instrument=2)


@pytest.fixture
def tiny_train_config(small_scene_config):
    return TrainConfig(
        iterations=4,
        batch_size=2,
        lr=1e-3,
        seed=3,
        eval_every=2,
        val_size=2,
        log_every=1,
        threads=1,
        vision=VisionConfig(stage_channels=(4, 4, 4, 4), head_channels=4, voxel_size=0.1),
        audio=AudioNetConfig(depth=2, initial_channels=2),
        scene=small_scene_config,
    ).resolve()
