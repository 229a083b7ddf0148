"""
Binaural Module
Ground-truth binaural rendering from HRIR sets, a parametric spherical-head
fallback, and scene mixing.

Azimuth is counterclockwise-positive seen from above: +pi/2 is the listener's
left. Only the horizontal plane (elevation 0) is modeled and source distance
does not change the rendering.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import signal as scipy_signal

from modules.audio import AudioClip, check_same_rate, read_wav, write_wav
from modules.error_handler import DataFormatError, SampleRateError, ShapeError

logger = logging.getLogger(__name__)

NUM_AZIMUTHS = 8
HEAD_RADIUS = 0.0875   # m
SPEED_OF_SOUND = 343.0  # m/s
SINC_TAPS = 32
MAX_SHADOW = 0.25      # pole of the contralateral one-pole low-pass at 90 degrees


def azimuth_of(index: int) -> float:
    """Azimuth in radians of grid position k (k * pi / 4)"""
    return index * np.pi / 4.0


@dataclass
class SceneSpec:
    sources: List[Tuple[str, int, float]]   # (instrument, azimuth index, distance m)
    clip_length: float                      # seconds

    def __post_init__(self):
        self.sources = [(str(i), int(k), float(d)) for i, k, d in self.sources]
        if not 1 <= len(self.sources) <= 3:
            raise ShapeError(f"A scene holds 1 to 3 sources, got {len(self.sources)}")
        indices = [k for _, k, _ in self.sources]
        if len(set(indices)) != len(indices):
            raise ShapeError(f"Azimuth indices must be distinct, got {indices}")
        if any(not 0 <= k < NUM_AZIMUTHS for k in indices):
            raise ShapeError(f"Azimuth indices must lie in 0..7, got {indices}")

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def to_dict(self) -> Dict:
        return {
            "sources": [{"instrument": i, "azimuth_index": k, "distance": d} for i, k, d in self.sources],
            "clip_length": self.clip_length,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneSpec":
        try:
            sources = [(s["instrument"], s["azimuth_index"], s["distance"]) for s in data["sources"]]
            return cls(sources, float(data["clip_length"]))
        except (KeyError, TypeError) as e:
            raise DataFormatError(f"Malformed scene spec: {e}") from e


@dataclass
class HRIRSet:
    sample_rate: int
    entries: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        missing = [k for k in range(NUM_AZIMUTHS) if k not in self.entries]
        if missing:
            raise DataFormatError(f"HRIR set lacks azimuth indices {missing}")
        lengths = {len(ir) for pair in self.entries.values() for ir in pair}
        if len(lengths) != 1:
            raise DataFormatError(f"HRIRs must share one length, got {sorted(lengths)}")

    def pair(self, azimuth_index: int) -> Tuple[np.ndarray, np.ndarray]:
        if azimuth_index not in self.entries:
            raise KeyError(f"Unknown azimuth index {azimuth_index}")
        return self.entries[azimuth_index]

    @classmethod
    def spherical_head(cls, sample_rate: int, head_radius: float = HEAD_RADIUS,
                       speed_of_sound: float = SPEED_OF_SOUND) -> "HRIRSet":
        entries = {
            k: spherical_head_hrir(azimuth_of(k), sample_rate, head_radius, speed_of_sound)
            for k in range(NUM_AZIMUTHS)
        }
        return cls(sample_rate, entries, name="spherical-head")


def woodworth_itd(azimuth: float, head_radius: float = HEAD_RADIUS,
                  speed_of_sound: float = SPEED_OF_SOUND) -> float:
    """Interaural time difference in seconds, folded to the front quadrant"""
    folded = _fold_lateral(azimuth)
    return head_radius / speed_of_sound * (folded + np.sin(folded))


def _fold_lateral(azimuth: float) -> float:
    wrapped = np.angle(np.exp(1j * azimuth))   # (-pi, pi]
    folded = abs(wrapped)
    if folded > np.pi / 2:
        folded = np.pi - folded
    return float(folded)


def _fractional_delay(delay: float, length: int) -> np.ndarray:
    """Hann-windowed sinc impulse delayed by ``delay`` samples"""
    n = np.arange(length, dtype=np.float64)
    offset = n - delay
    half = SINC_TAPS / 2.0
    window = np.where(np.abs(offset) < half, 0.5 * (1.0 + np.cos(np.pi * offset / half)), 0.0)
    return np.sinc(offset) * window


def spherical_head_hrir(azimuth: float, fs: float, head_radius: float = HEAD_RADIUS,
                        speed_of_sound: float = SPEED_OF_SOUND) -> Tuple[np.ndarray, np.ndarray]:
    """(left, right) impulse responses of a rigid spherical head.

    The contralateral ear receives the Woodworth ITD as a fractional delay and
    a first-order (one-pole) low-pass for head shadow. The sinc delay is
    shortened by the filter's low-frequency group delay pole / (1 - pole), so
    the total delay at low frequencies equals the ITD.
    """
    if fs <= 0:
        raise ValueError(f"Sample rate must be positive, got {fs}")
    bulk = SINC_TAPS // 2
    max_itd = head_radius / speed_of_sound * (np.pi / 2 + 1.0) * fs
    length = bulk + int(np.ceil(max_itd)) + SINC_TAPS // 2 + 2

    folded = _fold_lateral(azimuth)
    itd = head_radius / speed_of_sound * (folded + np.sin(folded)) * fs
    ipsilateral = _fractional_delay(bulk, length)
    pole = MAX_SHADOW * np.sin(folded)
    contralateral = _fractional_delay(bulk + itd - pole / (1.0 - pole), length)
    if pole > 0:
        contralateral = scipy_signal.lfilter([1.0 - pole], [1.0, -pole], contralateral)

    wrapped = float(np.angle(np.exp(1j * azimuth)))
    if wrapped > 0 and wrapped < np.pi:
        return ipsilateral, contralateral
    if wrapped < 0:
        return contralateral, ipsilateral
    return ipsilateral, ipsilateral.copy()


def render_binaural(source: AudioClip, azimuth_k: int, hrirs: HRIRSet) -> AudioClip:
    """Convolve a mono source with the HRIR pair, truncated to the source length"""
    if not source.is_mono:
        raise ShapeError(f"Source must be mono, got {source.channels} channels")
    if source.sample_rate != hrirs.sample_rate:
        raise SampleRateError(f"Source at {source.sample_rate} Hz, HRIRs at {hrirs.sample_rate} Hz")
    left_ir, right_ir = hrirs.pair(azimuth_k)
    x = source.samples[0]
    left = scipy_signal.convolve(x, left_ir, mode="full", method="direct")[:len(x)]
    right = scipy_signal.convolve(x, right_ir, mode="full", method="direct")[:len(x)]
    return AudioClip(np.stack([left, right]), source.sample_rate)


def mix_scene(sources: Sequence[AudioClip], spec: SceneSpec, hrirs: HRIRSet) -> Tuple[AudioClip, AudioClip]:
    """Binaural mixture and its mono downmix s_m = L + R"""
    if len(sources) != spec.num_sources:
        raise ShapeError(f"{len(sources)} clips for {spec.num_sources} scene sources")
    if not 1 <= len(sources) <= 3:
        raise ShapeError(f"A scene holds 1 to 3 sources, got {len(sources)}")
    rate = check_same_rate(*sources)
    lengths = {clip.length for clip in sources}
    if len(lengths) != 1:
        raise ShapeError(f"Source clips differ in length: {sorted(lengths)}")

    binaural = np.zeros((2, lengths.pop()))
    for clip, (_, azimuth_k, _) in zip(sources, spec.sources):
        binaural += render_binaural(clip, azimuth_k, hrirs).samples
    mono = binaural[0] + binaural[1]
    return AudioClip(mono[None, :], rate), AudioClip(binaural, rate)


def load_hrir_set(directory: Union[str, Path]) -> HRIRSet:
    """Read a directory with index.json mapping azimuth degrees to stereo WAV files"""
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise FileNotFoundError(f"HRIR index not found: {index_path}")
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{index_path}: invalid JSON ({e})") from e

    entries, rates = {}, set()
    for k in range(NUM_AZIMUTHS):
        key = str(k * 45)
        if key not in index:
            raise DataFormatError(f"{index_path}: missing azimuth {key} degrees")
        clip = read_wav(directory / index[key])
        if clip.channels != 2:
            raise DataFormatError(f"HRIR for {key} degrees must be stereo")
        rates.add(clip.sample_rate)
        entries[k] = (clip.left.copy(), clip.right.copy())
    if len(rates) != 1:
        raise SampleRateError(f"HRIR files disagree on sample rate: {sorted(rates)}")
    return HRIRSet(rates.pop(), entries, name=str(directory))


def save_hrir_set(directory: Union[str, Path], hrirs: HRIRSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for k in range(NUM_AZIMUTHS):
        filename = f"azimuth_{k * 45:03d}.wav"
        left, right = hrirs.pair(k)
        write_wav(directory / filename, AudioClip(np.stack([left, right]), hrirs.sample_rate))
        index[str(k * 45)] = filename
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True), encoding="utf-8")
