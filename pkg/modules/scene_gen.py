"""
Scene Generation Module
Procedural audio-visual training examples: musician point clouds, instrument
tones, the training-time augmentations, scene composition and binaural mixing.
"""

import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib import colors as mcolors
from scipy import signal as scipy_signal

from modules.audio import AudioClip
from modules.binaural import NUM_AZIMUTHS, HRIRSet, SceneSpec, azimuth_of, mix_scene
from modules.config import INSTRUMENTS, SPLITS, SceneConfig
from modules.error_handler import ConfigError, DataFormatError, ShapeError
from modules.pointcloud import PointCloud, rotation_y

logger = logging.getLogger(__name__)

MIN_POINTS = 2000
MAX_POINTS = 5000
BODY_FRACTION = 0.7

SHEAR_STD = 0.1
TRANSLATION_STD = 0.2
COLOR_NOISE_STD = 0.05
VALUE_SHIFT = 0.2
SATURATION_SHIFT = 0.15

SPLIT_FRACTIONS = (0.75, 0.15, 0.10)
# spawn keys of the per-split seed streams; "batch" and "augment" feed the training loop
SEED_STREAMS = {"train": 0, "val": 1, "test": 2, "batch": 3, "assets": 4, "augment": 5}


@dataclass(frozen=True)
class InstrumentShape:
    center: Tuple[float, float, float]   # relative to the performer's feet, +z is the front
    radii: Tuple[float, float, float]
    color: Tuple[float, float, float]


INSTRUMENT_SHAPES: Dict[str, InstrumentShape] = {
    "cello": InstrumentShape((0.00, 0.65, 0.35), (0.22, 0.40, 0.12), (0.55, 0.27, 0.07)),
    "doublebass": InstrumentShape((0.00, 0.90, 0.40), (0.30, 0.70, 0.16), (0.30, 0.15, 0.05)),
    "guitar": InstrumentShape((0.05, 1.00, 0.20), (0.35, 0.15, 0.06), (0.95, 0.60, 0.20)),
    "saxophone": InstrumentShape((0.00, 1.05, 0.22), (0.05, 0.30, 0.05), (0.85, 0.70, 0.10)),
    "violin": InstrumentShape((0.18, 1.40, 0.15), (0.20, 0.06, 0.07), (0.60, 0.12, 0.10)),
}


@dataclass
class TrainingExample:
    scene: PointCloud
    s_m: AudioClip
    s_b: AudioClip
    spec: SceneSpec
    seed: int
    # un-augmented performer clouds, centered, in spec.sources order
    musicians: Tuple[PointCloud, ...] = ()

    def __post_init__(self):
        if self.s_m.length != self.s_b.length:
            raise ShapeError(f"Mono length {self.s_m.length} != binaural length {self.s_b.length}")
        if len(self.scene) == 0:
            raise ShapeError("Training example has an empty scene")
        if self.musicians and len(self.musicians) != self.spec.num_sources:
            raise ShapeError(f"{len(self.musicians)} musician clouds for {self.spec.num_sources} sources")


def derive_seed(master: int, stream: str, index: int) -> int:
    """Independent 64-bit seed for item ``index`` of a named stream"""
    if stream not in SEED_STREAMS:
        raise ConfigError(f"Unknown seed stream {stream!r}")
    sequence = np.random.SeedSequence(entropy=int(master), spawn_key=(SEED_STREAMS[stream], int(index)))
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return int(high) << 32 | int(low)


def _instrument_index(instrument: str) -> int:
    if instrument not in INSTRUMENT_SHAPES:
        raise ConfigError(f"Unknown instrument {instrument!r}; expected one of {INSTRUMENTS}")
    return INSTRUMENTS.index(instrument)


def _ellipsoid_surface(rng: np.random.Generator, count: int, center, radii) -> np.ndarray:
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return np.asarray(center) + directions * np.asarray(radii)


def make_musician_cloud(instrument: str, seed: int) -> PointCloud:
    """Seated performer with an instrument in front, centered at the origin and facing +z.

    The seed picks the performer identity (body proportions and clothing);
    the instrument fixes the shape and color of the instrument primitive.
    """
    shape = INSTRUMENT_SHAPES.get(instrument)
    if shape is None:
        raise ConfigError(f"Unknown instrument {instrument!r}; expected one of {INSTRUMENTS}")
    rng = np.random.default_rng([_instrument_index(instrument), int(seed)])

    total = int(rng.integers(MIN_POINTS, MAX_POINTS + 1))
    body_count = int(total * BODY_FRACTION)
    instrument_count = total - body_count

    height = rng.uniform(0.9, 1.1)
    width = rng.uniform(0.85, 1.2)
    shirt = rng.uniform(0.1, 0.9, size=3)
    trousers = rng.uniform(0.05, 0.5, size=3)
    skin = np.array([0.80, 0.62, 0.50]) * rng.uniform(0.6, 1.1)

    # head, torso, legs
    parts = [
        ((0.0, 1.55 * height, 0.0), (0.10, 0.12, 0.10), skin, 0.15),
        ((0.0, 1.15 * height, 0.0), (0.20 * width, 0.30 * height, 0.12), shirt, 0.50),
        ((0.0, 0.45 * height, 0.10), (0.18 * width, 0.45 * height, 0.20), trousers, 0.35),
    ]
    points, colors = [], []
    remaining = body_count
    for i, (center, radii, color, fraction) in enumerate(parts):
        count = remaining if i == len(parts) - 1 else int(body_count * fraction)
        remaining -= count
        points.append(_ellipsoid_surface(rng, count, center, radii))
        colors.append(np.clip(color + rng.normal(0.0, 0.02, size=(count, 3)), 0.0, 1.0))

    center = np.array(shape.center) * np.array([1.0, height, 1.0])
    points.append(_ellipsoid_surface(rng, instrument_count, center, shape.radii))
    colors.append(np.clip(np.asarray(shape.color) + rng.normal(0.0, 0.02, size=(instrument_count, 3)), 0.0, 1.0))

    cloud = PointCloud(np.concatenate(points), np.concatenate(colors))
    return cloud.transformed(np.eye(3), -cloud.centroid())


def shear_matrix(off_diagonal: Sequence[float]) -> np.ndarray:
    """Identity with the six off-diagonal entries filled row by row"""
    matrix = np.eye(3)
    rows, cols = np.nonzero(~np.eye(3, dtype=bool))
    matrix[rows, cols] = np.asarray(off_diagonal, dtype=np.float64)
    return matrix


def augment_cloud(cloud: PointCloud, rng) -> PointCloud:
    """Random shear, vertical translation and color jitter.

    ``rng`` only needs ``normal`` and ``uniform``. Color operations are
    skipped for clouds without colors.
    """
    shear = shear_matrix(rng.normal(0.0, SHEAR_STD, size=6))
    offset = np.array([0.0, float(rng.normal(0.0, TRANSLATION_STD)), 0.0])
    points = cloud.points @ shear.T + offset
    if not cloud.has_colors:
        return PointCloud(points)

    colors = np.clip(cloud.colors + rng.normal(0.0, COLOR_NOISE_STD, size=cloud.colors.shape), 0.0, 1.0)
    hsv = mcolors.rgb_to_hsv(colors)
    hsv[:, 2] += float(rng.uniform(-VALUE_SHIFT, VALUE_SHIFT))
    hsv[:, 1] += float(rng.uniform(-SATURATION_SHIFT, SATURATION_SHIFT))
    colors = np.clip(mcolors.hsv_to_rgb(np.clip(hsv, 0.0, 1.0)), 0.0, 1.0)
    return PointCloud(points, colors)


def compose_scene(musicians: Sequence[PointCloud], spec: SceneSpec) -> PointCloud:
    """Place each musician at its azimuth and distance, turned to face the listener"""
    if len(musicians) != spec.num_sources:
        raise ShapeError(f"{len(musicians)} musicians for {spec.num_sources} scene sources")
    placed = []
    for cloud, (_, azimuth_k, distance) in zip(musicians, spec.sources):
        phi = azimuth_of(azimuth_k)
        position = (distance * np.sin(phi), 0.0, distance * np.cos(phi))
        placed.append(cloud.transformed(rotation_y(phi + np.pi), position))
    return PointCloud.merge(placed)


def reaugment(example: TrainingExample, seed: int) -> TrainingExample:
    """Same audio, with the scene rebuilt from freshly augmented musicians"""
    if not example.musicians:
        raise DataFormatError(f"Example {example.seed} has no per-musician clouds to augment")
    rng = np.random.default_rng(seed)
    clouds = [augment_cloud(cloud, rng) for cloud in example.musicians]
    return replace(example, scene=compose_scene(clouds, example.spec))


def sample_scene_spec(rng: np.random.Generator, config: SceneConfig, clip_length: float) -> SceneSpec:
    """N uniform in the configured range, distinct azimuths, uniform distances"""
    count = int(rng.integers(config.min_sources, config.max_sources + 1))
    instruments = rng.choice(len(config.instruments), size=count, replace=True)
    azimuths = rng.choice(NUM_AZIMUTHS, size=count, replace=False)
    distances = rng.uniform(config.min_distance, config.max_distance, size=count)
    sources = [(config.instruments[i], int(k), float(d)) for i, k, d in zip(instruments, azimuths, distances)]
    return SceneSpec(sources, clip_length)


# -- instrument tones ----------------------------------------------------------

def _note_sequence(rng: np.random.Generator, seconds: float, low_hz: float, high_hz: float):
    """(frequency, duration) pairs covering ``seconds`` on a equal-tempered scale"""
    low, high = 12 * np.log2(low_hz / 440.0), 12 * np.log2(high_hz / 440.0)
    elapsed, notes = 0.0, []
    while elapsed < seconds:
        semitone = int(rng.integers(int(np.ceil(low)), int(np.floor(high)) + 1))
        duration = float(rng.uniform(0.2, 0.5))
        notes.append((440.0 * 2 ** (semitone / 12), duration))
        elapsed += duration
    return notes


def _bowed(freq: float, n: int, fs: int, rng, vibrato_hz: float, brightness: float) -> np.ndarray:
    t = np.arange(n) / fs
    phase = 2 * np.pi * np.cumsum(freq * (1 + 0.006 * np.sin(2 * np.pi * vibrato_hz * t))) / fs
    tone = scipy_signal.sawtooth(phase + rng.uniform(0, 2 * np.pi))
    b, a = scipy_signal.butter(2, min(brightness * freq, 0.45 * fs) / (fs / 2))
    attack = np.minimum(1.0, t / 0.05)
    return scipy_signal.lfilter(b, a, tone) * attack


def _plucked(freq: float, n: int, fs: int, rng, decay: float) -> np.ndarray:
    """Karplus-Strong string as an IIR filter over a noise burst"""
    period = max(2, int(round(fs / freq)))
    excitation = np.zeros(n)
    burst = min(period, n)
    excitation[:burst] = rng.uniform(-1.0, 1.0, size=burst)
    denominator = np.zeros(period + 2)
    denominator[0] = 1.0
    denominator[period] = -0.5 * decay
    denominator[period + 1] = -0.5 * decay
    return scipy_signal.lfilter([1.0], denominator, excitation)


def _reed(freq: float, n: int, fs: int, rng) -> np.ndarray:
    t = np.arange(n) / fs
    tone = scipy_signal.square(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi), duty=0.4)
    high = min(2500.0, 0.45 * fs)
    b, a = scipy_signal.butter(2, [min(500.0, 0.5 * high), high], btype="bandpass", fs=fs)
    return scipy_signal.lfilter(b, a, tone) * np.minimum(1.0, t / 0.03)


TONE_RANGES = {
    "cello": (65.0, 520.0),
    "doublebass": (41.0, 200.0),
    "guitar": (82.0, 660.0),
    "saxophone": (138.0, 830.0),
    "violin": (196.0, 1760.0),
}


def synthesize_tone(instrument: str, seconds: float, sample_rate: int, seed: int) -> AudioClip:
    """Class-distinctive melody; peak amplitude 0.5"""
    if instrument not in TONE_RANGES:
        raise ConfigError(f"Unknown instrument {instrument!r}")
    rng = np.random.default_rng([_instrument_index(instrument), int(seed)])
    low, high = TONE_RANGES[instrument]
    high = min(high, 0.2 * sample_rate)
    total = int(round(seconds * sample_rate))
    pieces = []
    for freq, duration in _note_sequence(rng, seconds, low, high):
        n = max(1, int(round(duration * sample_rate)))
        if instrument == "cello":
            note = _bowed(freq, n, sample_rate, rng, vibrato_hz=4.5, brightness=6.0)
        elif instrument == "violin":
            note = _bowed(freq, n, sample_rate, rng, vibrato_hz=6.0, brightness=12.0)
        elif instrument == "saxophone":
            note = _reed(freq, n, sample_rate, rng)
        else:
            note = _plucked(freq, n, sample_rate, rng, decay=0.996 if instrument == "doublebass" else 0.99)
        pieces.append(note)
    samples = np.concatenate(pieces)[:total]
    if len(samples) < total:
        samples = np.pad(samples, (0, total - len(samples)))
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples = 0.5 * samples / peak
    return AudioClip(samples, sample_rate)


# -- asset bank ----------------------------------------------------------------

def split_identities(count: int, seed: int) -> Dict[str, List[int]]:
    """Shuffle identities and cut them 75/15/10 into train/val/test, each split non-empty"""
    if count < len(SPLITS):
        raise ConfigError(f"Need at least {len(SPLITS)} identities, got {count}")
    order = [int(i) for i in np.random.default_rng(seed).permutation(count)]
    n_val = max(1, int(round(SPLIT_FRACTIONS[1] * count)))
    n_test = max(1, int(round(SPLIT_FRACTIONS[2] * count)))
    n_train = count - n_val - n_test
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


@dataclass
class AssetBank:
    """Performer clouds and instrument recordings per class, partitioned by split"""

    config: SceneConfig
    seed: int = 0
    hrirs: Optional[HRIRSet] = None
    identities: Dict[str, Dict[str, List[int]]] = field(default_factory=dict)
    _clouds: Dict[Tuple[str, int], PointCloud] = field(default_factory=dict, repr=False)
    _clips: Dict[Tuple[str, str], List[AudioClip]] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.config.validate()
        if self.hrirs is None:
            self.hrirs = HRIRSet.spherical_head(self.config.sample_rate)
        elif self.hrirs.sample_rate != self.config.sample_rate:
            raise ConfigError(
                f"HRIR set at {self.hrirs.sample_rate} Hz, scenes at {self.config.sample_rate} Hz"
            )
        for instrument in self.config.instruments:
            self.identities[instrument] = split_identities(
                self.config.identities_per_instrument,
                derive_seed(self.seed, "assets", _instrument_index(instrument)),
            )
        logger.debug(f"Asset bank: {len(self.config.instruments)} instruments, seed {self.seed}")

    def cloud(self, instrument: str, identity: int) -> PointCloud:
        key = (instrument, identity)
        with self._lock:
            if key not in self._clouds:
                self._clouds[key] = make_musician_cloud(instrument, identity)
            return self._clouds[key]

    def clips(self, instrument: str, split: str) -> List[AudioClip]:
        if split not in SPLITS:
            raise ConfigError(f"Unknown split {split!r}")
        key = (instrument, split)
        with self._lock:
            if key not in self._clips:
                base = derive_seed(self.seed, split, _instrument_index(instrument))
                self._clips[key] = [
                    synthesize_tone(instrument, self.config.bank_clip_seconds, self.config.sample_rate, base + i)
                    for i in range(self.config.bank_clips_per_instrument)
                ]
            return self._clips[key]

    def performers(self, instrument: str, split: str) -> List[int]:
        if instrument not in self.identities:
            raise DataFormatError(f"Asset bank has no performers for {instrument!r}")
        performers = self.identities[instrument][split]
        if not performers:
            raise DataFormatError(f"Asset bank has no {split} performers for {instrument!r}")
        return performers


def clip_length_for(split: str, config: SceneConfig) -> float:
    return config.eval_clip_seconds if split == "test" else config.clip_seconds


def generate_example(seed: int, assets: AssetBank, config: SceneConfig, split: str = "train",
                     augment: Optional[bool] = None) -> TrainingExample:
    """One scene and its audio, fully determined by (seed, assets, config, split).

    Augmentation defaults to on for the train split only.
    """
    if split not in SPLITS:
        raise ConfigError(f"Unknown split {split!r}")
    if augment is None:
        augment = split == "train"
    rng = np.random.default_rng(seed)
    clip_seconds = clip_length_for(split, config)
    length = int(round(clip_seconds * config.sample_rate))
    spec = sample_scene_spec(rng, config, clip_seconds)

    canonical, musicians, sources = [], [], []
    for instrument, _, _ in spec.sources:
        performers = assets.performers(instrument, split)
        cloud = assets.cloud(instrument, performers[int(rng.integers(len(performers)))])
        canonical.append(cloud)
        if augment:
            cloud = augment_cloud(cloud, rng)
        musicians.append(cloud)

        bank = assets.clips(instrument, split)
        if not bank:
            raise DataFormatError(f"Asset bank has no {split} recordings for {instrument!r}")
        recording = bank[int(rng.integers(len(bank)))]
        if recording.length < length:
            raise DataFormatError(f"{instrument} recording shorter than a {clip_seconds} s clip")
        onset = int(rng.integers(0, recording.length - length + 1))
        sources.append(recording.sliced(onset, length))

    s_m, s_b = mix_scene(sources, spec, assets.hrirs)
    return TrainingExample(compose_scene(musicians, spec), s_m, s_b, spec, int(seed), tuple(canonical))
