"""
Metrics Module
STFT and Hilbert-envelope distances between binaural clips.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as scipy_signal

from modules.audio import AudioClip
from modules.error_handler import SampleRateError, ShapeError

logger = logging.getLogger(__name__)

WINDOW_SECONDS = 0.023
HOP_SECONDS = 0.010


@dataclass
class Spectrogram:
    frames: np.ndarray   # complex [bins, frames]
    window_len: int
    hop: int
    sample_rate: Optional[int] = None

    @property
    def bins(self) -> int:
        return self.frames.shape[0]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]


def default_framing(sample_rate: int) -> Tuple[int, int]:
    """(window_len, hop) for a 23 ms Hann window and 10 ms hop"""
    return int(round(WINDOW_SECONDS * sample_rate)), int(round(HOP_SECONDS * sample_rate))


def stft(x: np.ndarray, window_len: int, hop: int, sample_rate: Optional[int] = None) -> Spectrogram:
    """One-sided Hann-windowed STFT without centering; a trailing partial frame is dropped"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"stft expects a 1-D signal, got shape {x.shape}")
    if window_len < 1 or hop < 1:
        raise ShapeError("window_len and hop must be >= 1")
    if len(x) < window_len:
        raise ShapeError(f"Signal of {len(x)} samples is shorter than the {window_len}-sample window")
    window = scipy_signal.get_window("hann", window_len)
    frames = sliding_window_view(x, window_len)[::hop] * window
    return Spectrogram(np.fft.rfft(frames, axis=-1).T, window_len, hop, sample_rate)


def _check_pair(reference: AudioClip, estimate: AudioClip) -> None:
    if reference.sample_rate != estimate.sample_rate:
        raise SampleRateError(f"Sample rates differ: {reference.sample_rate} vs {estimate.sample_rate}")
    if reference.samples.shape != estimate.samples.shape:
        raise ShapeError(f"Clip shapes differ: {reference.samples.shape} vs {estimate.samples.shape}")


def stft_distance(s_b: AudioClip, estimate: AudioClip, window_len: Optional[int] = None,
                  hop: Optional[int] = None) -> float:
    """Frobenius norm of the complex spectrogram difference, summed over channels"""
    _check_pair(s_b, estimate)
    default_window, default_hop = default_framing(s_b.sample_rate)
    window_len = window_len or default_window
    hop = hop or default_hop
    total = 0.0
    for channel in range(s_b.channels):
        # STFT is linear, so the difference can be transformed once
        diff = stft(s_b.samples[channel] - estimate.samples[channel], window_len, hop)
        total += float(np.linalg.norm(diff.frames))
    return total


def envelope(x: np.ndarray) -> np.ndarray:
    """Magnitude of the analytic signal"""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("Cannot take the envelope of an empty signal")
    return np.abs(scipy_signal.hilbert(x))


def envelope_distance(s_b: AudioClip, estimate: AudioClip) -> float:
    _check_pair(s_b, estimate)
    return float(sum(
        np.linalg.norm(envelope(s_b.samples[c]) - envelope(estimate.samples[c]))
        for c in range(s_b.channels)
    ))
