"""
Audio Module
Mono / binaural sample buffers and WAV input/output.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.io import wavfile

from modules.error_handler import DataFormatError, SampleRateError, ShapeError

logger = logging.getLogger(__name__)

WAV_FORMATS = ("float32", "pcm16")


@dataclass
class AudioClip:
    samples: np.ndarray   # [channels, T]
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2 or samples.shape[0] not in (1, 2):
            raise ShapeError(f"AudioClip needs 1 or 2 channels, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataFormatError("AudioClip samples must be finite")
        if self.sample_rate <= 0:
            raise ShapeError(f"Sample rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    @property
    def is_mono(self) -> bool:
        return self.channels == 1

    @property
    def left(self) -> np.ndarray:
        return self.samples[0]

    @property
    def right(self) -> np.ndarray:
        return self.samples[-1]

    def sliced(self, start: int, length: int) -> "AudioClip":
        if start < 0 or start + length > self.length:
            raise ShapeError(f"Slice [{start}, {start + length}) outside clip of length {self.length}")
        return AudioClip(self.samples[:, start:start + length].copy(), self.sample_rate)

    @classmethod
    def silence(cls, channels: int, length: int, sample_rate: int) -> "AudioClip":
        return cls(np.zeros((channels, length)), sample_rate)


def check_same_rate(*clips: AudioClip) -> int:
    rates = {clip.sample_rate for clip in clips}
    if len(rates) > 1:
        raise SampleRateError(f"Sample rates differ: {sorted(rates)}")
    return rates.pop()


def read_wav(path: Union[str, Path]) -> AudioClip:
    """Read PCM-16 or 32-bit float WAV, mono or stereo"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"WAV file not found: {path}")
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as e:
        raise DataFormatError(f"{path}: unreadable WAV ({e})") from e

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataFormatError(f"{path}: unsupported sample format {data.dtype}")
    samples = samples.T if samples.ndim == 2 else samples[None, :]
    if samples.shape[0] not in (1, 2):
        raise DataFormatError(f"{path}: {samples.shape[0]} channels; only mono and stereo are supported")
    return AudioClip(samples, rate)


def write_wav(path: Union[str, Path], clip: AudioClip, fmt: str = "float32") -> None:
    if fmt not in WAV_FORMATS:
        raise ValueError(f"Unknown WAV format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = clip.samples.T if clip.channels == 2 else clip.samples[0]
    if fmt == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(str(path), clip.sample_rate, data)
