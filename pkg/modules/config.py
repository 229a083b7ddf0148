"""
Configuration Module
Dataclass configuration for every stage of the pipeline, with the small
"desk" preset and the full-size "full" preset. Defaults can be overridden from
the environment (.env is loaded on import), then from a JSON config file, then
from command-line flags.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import psutil
from dotenv import load_dotenv

from modules.error_handler import ConfigError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

INSTRUMENTS = ("cello", "doublebass", "guitar", "saxophone", "violin")
LOSS_MODES = ("full", "diff")
FEATURE_MODES = ("rgb-depth", "depth")
PRESETS = ("desk", "full")
SPLITS = ("train", "val", "test")


def default_threads() -> int:
    value = os.getenv("P2S_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ConfigError(f"P2S_THREADS must be an integer, got {value!r}")
    return psutil.cpu_count(logical=True) or 1


@dataclass
class VisionConfig:
    stage_channels: Tuple[int, int, int, int] = (16, 32, 64, 128)
    head_channels: int = 16
    voxel_size: float = 0.02

    def validate(self) -> None:
        if len(self.stage_channels) != 4:
            raise ConfigError(f"Vision network needs exactly 4 stages, got {len(self.stage_channels)}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("Stage channel counts must be positive")
        if self.head_channels < 1:
            raise ConfigError("head_channels (K) must be >= 1")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")

    @classmethod
    def full(cls) -> "VisionConfig":
        return cls(stage_channels=(64, 128, 256, 512))


@dataclass
class AudioNetConfig:
    depth: int = 6
    initial_channels: int = 8
    kernel: int = 8
    stride: int = 4
    cond_dim: int = 16
    output_channels: int = 2
    sample_rate: int = 8000

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("Audio network depth must be >= 1")
        if self.output_channels not in (1, 2):
            raise ConfigError("output_channels must be 1 (diff) or 2 (full)")
        if self.initial_channels < 1 or self.kernel < 1 or self.stride < 1:
            raise ConfigError("initial_channels, kernel and stride must be >= 1")
        if self.cond_dim < 1:
            raise ConfigError("cond_dim must be >= 1")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")

    def channels(self, level: int) -> int:
        """Width of encoder level ``level`` (1-based); level 0 is the mono input"""
        if level == 0:
            return 1
        return self.initial_channels * 2 ** (level - 1)

    @classmethod
    def full(cls) -> "AudioNetConfig":
        return cls(initial_channels=64, sample_rate=44100)


@dataclass
class SceneConfig:
    instruments: Tuple[str, ...] = INSTRUMENTS
    sample_rate: int = 8000
    clip_seconds: float = 1.0
    eval_clip_seconds: float = 2.0
    min_sources: int = 1
    max_sources: int = 3
    min_distance: float = 1.0
    max_distance: float = 3.0
    identities_per_instrument: int = 20
    bank_clips_per_instrument: int = 4

    def validate(self) -> None:
        unknown = [i for i in self.instruments if i not in INSTRUMENTS]
        if unknown or not self.instruments:
            raise ConfigError(f"Unknown instrument classes: {unknown}")
        if not 1 <= self.min_sources <= self.max_sources <= 3:
            raise ConfigError("Source count range must lie within 1..3")
        if self.clip_seconds <= 0 or self.eval_clip_seconds <= 0:
            raise ConfigError("Clip lengths must be positive")
        if not 0 < self.min_distance <= self.max_distance:
            raise ConfigError("Distance range must be positive and ordered")
        if self.identities_per_instrument < 3:
            raise ConfigError("Need at least 3 identities per instrument to split train/val/test")

    @property
    def bank_clip_seconds(self) -> float:
        return 2.0 * max(self.clip_seconds, self.eval_clip_seconds)

    @classmethod
    def full(cls) -> "SceneConfig":
        return cls(sample_rate=44100, clip_seconds=3.0, eval_clip_seconds=10.0)


@dataclass
class TrainConfig:
    loss_mode: str = "full"
    feature_mode: str = "rgb-depth"
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 100
    val_size: int = 64
    log_every: int = 10
    preset: str = "desk"
    threads: int = field(default_factory=default_threads)
    vision: VisionConfig = field(default_factory=VisionConfig)
    audio: AudioNetConfig = field(default_factory=AudioNetConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    @property
    def deterministic(self) -> bool:
        return self.threads == 1

    def resolve(self) -> "TrainConfig":
        """Tie dependent fields together and validate"""
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.batch_size < 1 or self.iterations < 1 or self.eval_every < 1 or self.log_every < 1:
            raise ConfigError("batch_size, iterations, eval_every and log_every must be >= 1")
        if self.val_size < 1:
            raise ConfigError("val_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        # merge() shares untouched sections between copies; rebind instead of mutating
        self.audio = replace(self.audio, output_channels=2 if self.loss_mode == "full" else 1,
                             cond_dim=self.vision.head_channels)
        if self.audio.sample_rate != self.scene.sample_rate:
            raise ConfigError(
                f"Audio network rate {self.audio.sample_rate} Hz != scene rate {self.scene.sample_rate} Hz"
            )
        self.vision.validate()
        self.audio.validate()
        self.scene.validate()
        return self

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return from_dict(cls, overrides) if overrides else cls()

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        base = cls(iterations=120_000, batch_size=40, preset="full",
                   vision=VisionConfig.full(), audio=AudioNetConfig.full(), scene=SceneConfig.full())
        return merge(base, overrides)

    @classmethod
    def preset_named(cls, name: Optional[str] = None) -> "TrainConfig":
        name = name or os.getenv("P2S_PRESET", "desk")
        if name == "desk":
            return cls.desk()
        if name == "full":
            return cls.full()
        raise ConfigError(f"Unknown preset {name!r}")


def to_dict(config: Any) -> Dict[str, Any]:
    return json.loads(json.dumps(asdict(config)))


def _coerce(current: Any, value: Any) -> Any:
    if isinstance(current, tuple):
        return tuple(value)
    if isinstance(current, bool):
        return bool(value)
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"Expected an integer, got {value}")
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def merge(config: Any, overrides: Dict[str, Any]) -> Any:
    """Return a copy of a (nested) config dataclass with ``overrides`` applied"""
    known = {f.name: f for f in fields(config)}
    changes = {}
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"Unknown config field {key!r} for {type(config).__name__}")
        current = getattr(config, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"Config section {key!r} must be an object")
            changes[key] = merge(current, value)
        elif value is not None:
            try:
                changes[key] = _coerce(current, value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Bad value for {key!r}: {value!r}") from e
    return replace(config, **changes)


def from_dict(cls, data: Dict[str, Any]) -> Any:
    return merge(cls(), data)


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")
    return data


def resolve_train_config(file_values: Optional[Dict[str, Any]] = None,
                         flag_values: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """Preset defaults < environment < config file < flags"""
    file_values = dict(file_values or {})
    flag_values = {k: v for k, v in (flag_values or {}).items() if v is not None}
    preset = flag_values.get("preset") or file_values.get("preset")
    config = TrainConfig.preset_named(preset)
    seed_env = os.getenv("P2S_SEED")
    if seed_env:
        config = merge(config, {"seed": int(seed_env)})
    config = merge(config, file_values)
    config = merge(config, flag_values)
    return config.resolve()


@dataclass
class RunConfig:
    """Fully resolved options of one command invocation"""

    command: str
    options: Dict[str, Any] = field(default_factory=dict)
    train: Optional[TrainConfig] = None

    def to_json(self) -> str:
        data: Dict[str, Any] = {"command": self.command, "options": self.options}
        if self.train is not None:
            data["train"] = to_dict(self.train)
        return json.dumps(data, sort_keys=True, default=str)
