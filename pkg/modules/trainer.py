"""
Trainer Module
The joint vision/audio model, its losses, checkpoint conversion and the
training loop with validation-based checkpoint selection.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.audio import AudioClip
from modules.audio_net import AudioNetParams, audionet_forward
from modules.checkpoint import Checkpoint
from modules.config import FEATURE_MODES, AudioNetConfig, TrainConfig, VisionConfig, to_dict
from modules.dataset import ExampleSource
from modules.error_handler import CheckpointError, SampleRateError, ShapeError, TrainingDivergedError
from modules.monitoring import MonitoringManager
from modules.performance import performance
from modules.pointcloud import PointCloud
from modules.scene_gen import TrainingExample, derive_seed
from modules.sparse import sparse_collate, voxelize
from modules.tensor import (
    AdamState,
    Tape,
    Tensor,
    abs_,
    adam_step,
    mean,
    stack_mean,
    sub,
    take_row,
)
from modules.vision_net import VisionParams, vision_forward

logger = logging.getLogger(__name__)

VISION_PREFIX = "vision."
AUDIO_PREFIX = "audio."
CONFIG_PREFIX = "config."
TRAIN_PREFIX = "train."
BUFFER_SUFFIXES = (".running_mean", ".running_var")


# -- losses --------------------------------------------------------------------

def _target_array(target: Union[AudioClip, np.ndarray]) -> np.ndarray:
    return target.samples if isinstance(target, AudioClip) else np.asarray(target, dtype=np.float64)


def loss_full(estimate: Tensor, s_b: Union[AudioClip, np.ndarray]) -> Tensor:
    """Mean absolute error over both channels"""
    target = _target_array(s_b)
    if estimate.shape != target.shape or estimate.shape[0] != 2:
        raise ShapeError(f"loss_full expects two matching [2, T] signals, got {estimate.shape} and {target.shape}")
    return mean(abs_(sub(estimate, target)))


def loss_diff(estimate_diff: Tensor, s_b: Union[AudioClip, np.ndarray]) -> Tensor:
    """Mean absolute error against the difference channel L - R"""
    target = _target_array(s_b)
    if target.ndim != 2 or target.shape[0] != 2:
        raise ShapeError(f"loss_diff needs a binaural target, got shape {target.shape}")
    diff = target[0:1] - target[1:2]
    if estimate_diff.shape != diff.shape:
        raise ShapeError(f"loss_diff expects estimate of shape {diff.shape}, got {estimate_diff.shape}")
    return mean(abs_(sub(estimate_diff, diff)))


def recover_channels(s_m: Union[AudioClip, np.ndarray],
                     s_diff: Union[AudioClip, np.ndarray]) -> Union[AudioClip, np.ndarray]:
    """L = (s_m + diff) / 2 and R = (s_m - diff) / 2"""
    mono = _target_array(s_m).reshape(-1)
    diff = _target_array(s_diff).reshape(-1)
    if mono.shape != diff.shape:
        raise ShapeError(f"Mono length {mono.shape[0]} != difference length {diff.shape[0]}")
    binaural = np.stack([(mono + diff) / 2.0, (mono - diff) / 2.0])
    if isinstance(s_m, AudioClip):
        return AudioClip(binaural, s_m.sample_rate)
    return binaural


# -- model ---------------------------------------------------------------------

@dataclass
class Points2SoundModel:
    vision: VisionParams
    audio: AudioNetParams
    feature_mode: str = "rgb-depth"

    @classmethod
    def initialize(cls, config: TrainConfig) -> "Points2SoundModel":
        return cls(
            vision=VisionParams.initialize(config.vision, seed=config.seed),
            audio=AudioNetParams.initialize(config.audio, seed=config.seed + 1),
            feature_mode=config.feature_mode,
        )

    @property
    def output_channels(self) -> int:
        return self.audio.config.output_channels

    @property
    def loss_mode(self) -> str:
        return "full" if self.output_channels == 2 else "diff"

    @property
    def sample_rate(self) -> int:
        return self.audio.config.sample_rate

    def parameters(self) -> Dict[str, Tensor]:
        params = {VISION_PREFIX + name: t for name, t in self.vision.named_tensors()}
        params.update({AUDIO_PREFIX + name: t for name, t in self.audio.named_tensors()})
        return params

    def encode_scenes(self, clouds: Sequence[PointCloud], training: bool = False,
                      rotation: float = 0.0) -> Tensor:
        """Conditioning vectors [B, K] for a batch of scenes"""
        if rotation:
            clouds = [cloud.rotated_y(rotation) for cloud in clouds]
        voxels = [voxelize(cloud, self.vision.config.voxel_size, self.feature_mode) for cloud in clouds]
        return vision_forward(sparse_collate(voxels), self.vision, training)

    def forward(self, clouds: Sequence[PointCloud], monos: Sequence[AudioClip], training: bool = False,
                rotation: float = 0.0) -> List[Tensor]:
        if len(clouds) != len(monos):
            raise ShapeError(f"{len(clouds)} scenes for {len(monos)} mono clips")
        for mono in monos:
            if mono.sample_rate != self.sample_rate:
                raise SampleRateError(f"Mono clip at {mono.sample_rate} Hz, model expects {self.sample_rate} Hz")
        h = self.encode_scenes(clouds, training, rotation)
        return [audionet_forward(mono, take_row(h, b), self.audio) for b, mono in enumerate(monos)]

    def example_loss(self, output: Tensor, example: TrainingExample) -> Tensor:
        if self.loss_mode == "full":
            return loss_full(output, example.s_b)
        return loss_diff(output, example.s_b)

    def batch_loss(self, examples: Sequence[TrainingExample], training: bool) -> Tensor:
        outputs = self.forward([e.scene for e in examples], [e.s_m for e in examples], training)
        return stack_mean([self.example_loss(out, e) for out, e in zip(outputs, examples)])

    def predict(self, cloud: PointCloud, mono: AudioClip, rotation: float = 0.0) -> AudioClip:
        """Binaural estimate for one scene; difference outputs are turned back into L/R"""
        if not mono.is_mono:
            raise ShapeError(f"Input must be mono, got {mono.channels} channels")
        output = self.forward([cloud], [mono], training=False, rotation=rotation)[0]
        samples = output.data.astype(np.float64)
        if self.output_channels == 1:
            return recover_channels(mono, AudioClip(samples, mono.sample_rate))
        return AudioClip(samples, mono.sample_rate)

    # -- checkpoints --

    def config_records(self) -> Dict[str, np.ndarray]:
        values = {
            "vision.head_channels": self.vision.config.head_channels,
            "vision.voxel_size": self.vision.config.voxel_size,
            "feature_mode": FEATURE_MODES.index(self.feature_mode),
        }
        for i, channels in enumerate(self.vision.config.stage_channels):
            values[f"vision.stage_channels.{i}"] = channels
        audio = to_dict(self.audio.config)
        values.update({f"audio.{key}": value for key, value in audio.items()})
        return {CONFIG_PREFIX + key: np.asarray(float(value), dtype=np.float64) for key, value in values.items()}

    def to_checkpoint(self, adam: Optional[AdamState] = None) -> Checkpoint:
        tensors = {name: t.data.copy() for name, t in self.parameters().items()}
        tensors.update({VISION_PREFIX + name: buf.copy() for name, buf in self.vision.buffers.items()})
        tensors.update(self.config_records())
        snapshot = None
        if adam is not None:
            snapshot = AdamState(lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2, eps=adam.eps, step=adam.step,
                                 m={k: v.copy() for k, v in adam.m.items()},
                                 v={k: v.copy() for k, v in adam.v.items()})
        return Checkpoint(tensors=tensors, adam=snapshot)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "Points2SoundModel":
        vision_config, audio_config, feature_mode = configs_from_checkpoint(checkpoint)
        model = cls(VisionParams.initialize(vision_config), AudioNetParams.initialize(audio_config), feature_mode)
        loaded = model.load_matching(checkpoint, strict=True)
        logger.debug(f"Loaded {loaded} arrays from checkpoint")
        return model

    def load_matching(self, checkpoint: Checkpoint, strict: bool = False) -> int:
        """Copy checkpoint arrays whose name and shape match; strict mode requires all of them"""
        loaded, problems = 0, []
        targets: Dict[str, Tuple[str, object]] = {}
        for name in self.vision.tensors:
            targets[VISION_PREFIX + name] = ("vision", name)
        for name in self.vision.buffers:
            targets[VISION_PREFIX + name] = ("buffer", name)
        for name in self.audio.tensors:
            targets[AUDIO_PREFIX + name] = ("audio", name)

        for full_name, (kind, name) in targets.items():
            value = checkpoint.tensors.get(full_name)
            if kind == "buffer":
                current = self.vision.buffers[name]
            else:
                current = (self.vision.tensors if kind == "vision" else self.audio.tensors)[name].data
            if value is None or value.shape != current.shape:
                problems.append(full_name)
                continue
            if kind == "buffer":
                self.vision.buffers[name] = value.astype(np.float64)
            else:
                tensor = (self.vision.tensors if kind == "vision" else self.audio.tensors)[name]
                tensor.data = np.ascontiguousarray(value, dtype=tensor.data.dtype)
            loaded += 1
        if strict and problems:
            raise CheckpointError(f"Checkpoint does not match the model: {problems[:5]} ({len(problems)} total)")
        if problems:
            logger.info(f"Warm start skipped {len(problems)} unmatched arrays")
        return loaded


def configs_from_checkpoint(checkpoint: Checkpoint) -> Tuple[VisionConfig, AudioNetConfig, str]:
    records = checkpoint.tensors

    def scalar(key: str) -> float:
        value = records.get(CONFIG_PREFIX + key)
        if value is None:
            raise CheckpointError(f"Checkpoint lacks {CONFIG_PREFIX + key}")
        return float(np.asarray(value).reshape(-1)[0])

    vision = VisionConfig(
        stage_channels=tuple(int(scalar(f"vision.stage_channels.{i}")) for i in range(4)),
        head_channels=int(scalar("vision.head_channels")),
        voxel_size=scalar("vision.voxel_size"),
    )
    audio = AudioNetConfig(**{
        name: int(scalar(f"audio.{name}"))
        for name in ("depth", "initial_channels", "kernel", "stride", "cond_dim", "output_channels", "sample_rate")
    })
    mode = int(scalar("feature_mode"))
    if not 0 <= mode < len(FEATURE_MODES):
        raise CheckpointError(f"Unknown feature mode index {mode}")
    if audio.cond_dim != vision.head_channels:
        raise CheckpointError(f"Audio conditioning width {audio.cond_dim} != vision output {vision.head_channels}")
    return vision, audio, FEATURE_MODES[mode]


def output_width(checkpoint: Checkpoint) -> int:
    return configs_from_checkpoint(checkpoint)[1].output_channels


def best_val_loss(checkpoint: Checkpoint) -> Optional[float]:
    value = checkpoint.tensors.get(TRAIN_PREFIX + "best_val_loss")
    return None if value is None else float(np.asarray(value).reshape(-1)[0])


# -- training ------------------------------------------------------------------

def validation_loss(model: Points2SoundModel, examples: Sequence[TrainingExample], batch_size: int) -> float:
    """Mean training loss over held-out examples in inference mode"""
    total = 0.0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        total += model.batch_loss(chunk, training=False).item() * len(chunk)
    return total / len(examples)


@performance.measure_time("train")
def train(config: TrainConfig, source: ExampleSource, val_source: ExampleSource,
          log_path: Optional[Union[str, Path]] = None, warm_start: Optional[Checkpoint] = None) -> Checkpoint:
    """Jointly train both networks and return the checkpoint with the lowest validation loss"""
    model = Points2SoundModel.initialize(config)
    if warm_start is not None:
        loaded = model.load_matching(warm_start)
        logger.info(f"Warm start: {loaded} arrays copied from the initial checkpoint")

    params = model.parameters()
    adam = AdamState(lr=config.lr)
    threads = 1 if config.deterministic else config.threads
    val_examples = val_source.take(list(range(min(config.val_size, len(val_source)))), threads)
    logger.info(f"Training {config.iterations} iterations on {len(source)} {source.split} examples, "
                f"{len(val_examples)} validation examples, loss {config.loss_mode}")

    best: Optional[Checkpoint] = None
    best_loss = math.inf
    with MonitoringManager(log_path) as monitor:
        for iteration in range(1, config.iterations + 1):
            batch_seed = derive_seed(config.seed, "batch", iteration)
            batch = source.batch(batch_seed, config.batch_size, threads)
            with Tape() as tape:
                loss = model.batch_loss(batch, training=True)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise TrainingDivergedError(iteration, adam.lr, batch_seed, loss_value)
                tape.backward(loss)
            grads = {}
            for name, tensor in params.items():
                grad = tape.grad(tensor)
                if grad is not None:
                    grads[name] = grad
            adam_step(params, grads, adam)

            val_loss = None
            if iteration % config.eval_every == 0 or iteration == config.iterations:
                val_loss = validation_loss(model, val_examples, config.batch_size)
                monitor.log_system_metrics(iteration)
                if val_loss < best_loss:
                    best_loss = val_loss
                    best = model.to_checkpoint(adam)
                    best.tensors[TRAIN_PREFIX + "best_val_loss"] = np.asarray(val_loss, dtype=np.float64)
                    best.tensors[TRAIN_PREFIX + "best_iteration"] = np.asarray(float(iteration), dtype=np.float64)
                logger.info(f"Iteration {iteration}: train loss {loss_value:.6f}, val loss {val_loss:.6f}")
            if val_loss is not None or iteration % config.log_every == 0 or iteration == 1:
                monitor.log_step(iteration, loss_value, val_loss)

        logger.info(f"Training finished: {monitor.summary()}")

    if best is None:
        # every validation loss was NaN
        raise TrainingDivergedError(config.iterations, adam.lr, 0, float("nan"))
    return best
