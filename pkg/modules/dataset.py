"""
Dataset Module
On-disk example layout, dataset generation, and example sources for training
and evaluation.

Layout::

    DIR/<split>/dataset.json
    DIR/<split>/<index:05d>/manifest.json
    DIR/<split>/<index:05d>/scene.p2s-cloud
    DIR/<split>/<index:05d>/mono.wav
    DIR/<split>/<index:05d>/binaural.wav
    DIR/<split>/<index:05d>/source<k>.p2s-cloud   (train only)

Scenes are stored without augmentation. The train split also keeps each
performer's centered cloud so that every draw can be augmented afresh.
"""

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from modules.audio import read_wav, write_wav
from modules.binaural import SceneSpec
from modules.config import SPLITS, SceneConfig, to_dict
from modules.error_handler import ConfigError, DataFormatError, ErrorHandler
from modules.pointcloud import read_cloud, write_cloud
from modules.scene_gen import AssetBank, TrainingExample, derive_seed, generate_example, reaugment

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
DATASET_INFO = "dataset.json"
FILES = {"scene": "scene.p2s-cloud", "mono": "mono.wav", "binaural": "binaural.wav"}
DEFAULT_CACHE_SIZE = 512

T = TypeVar("T")


def _read_json(path: Path) -> Dict:
    return json.loads(path.read_text(encoding="utf-8"))


def _dump_json(path: Path, data: Dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _map(fn: Callable[..., T], items: Sequence, threads: int) -> List[T]:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_example(directory: Union[str, Path], example: TrainingExample, split: str, index: int,
                  augmentation: bool, with_sources: bool = False) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files: Dict = dict(FILES)
    write_cloud(directory / FILES["scene"], example.scene)
    write_wav(directory / FILES["mono"], example.s_m)
    write_wav(directory / FILES["binaural"], example.s_b)
    if with_sources:
        files["sources"] = [f"source{k}.p2s-cloud" for k in range(len(example.musicians))]
        for cloud, name in zip(example.musicians, files["sources"]):
            write_cloud(directory / name, cloud)
    _dump_json(directory / MANIFEST, {
        "index": index,
        "split": split,
        "seed": example.seed,
        "augmentation": augmentation,
        "sample_rate": example.s_m.sample_rate,
        "spec": example.spec.to_dict(),
        "files": files,
    })
    return directory


def read_example(directory: Union[str, Path]) -> TrainingExample:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"Example manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        files = manifest["files"]
        spec = SceneSpec.from_dict(manifest["spec"])
        seed = int(manifest["seed"])
        sources = [directory / name for name in files.get("sources", [])]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"{manifest_path}: malformed manifest ({e})") from e
    return TrainingExample(
        scene=read_cloud(directory / files["scene"]),
        s_m=read_wav(directory / files["mono"]),
        s_b=read_wav(directory / files["binaural"]),
        spec=spec,
        seed=seed,
        musicians=tuple(read_cloud(path) for path in sources),
    )


class ExampleSource:
    """Indexable collection of training examples"""

    split: str = "train"

    def __len__(self) -> int:
        raise NotImplementedError

    def get(self, index: int) -> TrainingExample:
        raise NotImplementedError

    def draw_indices(self, batch_seed: int, batch_size: int) -> List[int]:
        indices = np.random.default_rng(batch_seed).integers(0, len(self), size=batch_size)
        return [int(i) for i in indices]

    def batch(self, batch_seed: int, batch_size: int, threads: int = 1) -> List[TrainingExample]:
        """Examples for one optimizer step, drawn with replacement by ``batch_seed``"""
        return self.take(self.draw_indices(batch_seed, batch_size), threads)

    def take(self, indices: List[int], threads: int = 1) -> List[TrainingExample]:
        return _map(self.get, indices, threads)


class GeneratedExamples(ExampleSource):
    """Examples generated on demand from per-index seeds of one split's stream"""

    def __init__(self, assets: AssetBank, split: str, master_seed: int, count: int,
                 augment: Optional[bool] = None):
        if split not in SPLITS:
            raise ConfigError(f"Unknown split {split!r}")
        if count < 1:
            raise ConfigError(f"Example count must be >= 1, got {count}")
        self.assets = assets
        self.split = split
        self.master_seed = master_seed
        self.count = count
        self.augment = split == "train" if augment is None else augment

    def __len__(self) -> int:
        return self.count

    def seed_for(self, index: int) -> int:
        return derive_seed(self.master_seed, self.split, index)

    def get(self, index: int) -> TrainingExample:
        if not 0 <= index < self.count:
            raise IndexError(f"Example {index} outside 0..{self.count - 1}")
        return generate_example(self.seed_for(index), self.assets, self.assets.config, self.split, self.augment)


class DiskExamples(ExampleSource):
    """Examples of one split read from a generated dataset directory.

    The most recent ``cache_size`` reads stay in memory. With ``augment``
    (on by default for the train split) every ``get`` rebuilds the scene from
    freshly augmented performers; ``batch`` derives those draws from the
    batch seed.
    """

    def __init__(self, root: Union[str, Path], split: str, augment: Optional[bool] = None,
                 cache_size: int = DEFAULT_CACHE_SIZE, augment_seed: int = 0):
        if cache_size < 0:
            raise ConfigError(f"cache_size must be >= 0, got {cache_size}")
        self.root = Path(root)
        self.split = split
        self.augment = split == "train" if augment is None else augment
        self.augment_seed = augment_seed
        split_dir = self.root / split
        if not self.root.is_dir():
            raise FileNotFoundError(f"Dataset directory not found: {self.root}")
        if not split_dir.is_dir():
            raise FileNotFoundError(f"Dataset has no {split!r} split: {split_dir}")
        self.directories = sorted(p for p in split_dir.iterdir() if (p / MANIFEST).is_file())
        if not self.directories:
            raise DataFormatError(f"No examples found in {split_dir}")
        info_path = split_dir / DATASET_INFO
        self.info = {}
        if info_path.is_file():
            self.info = ErrorHandler.safe_execute(_read_json, info_path) or {}
        self._read = lru_cache(maxsize=cache_size)(self._read_uncached)
        self._draws = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.directories)

    def _read_uncached(self, index: int) -> TrainingExample:
        return read_example(self.directories[index])

    def stored(self, index: int) -> TrainingExample:
        """Example exactly as written to disk"""
        if not 0 <= index < len(self):
            raise IndexError(f"Example {index} outside 0..{len(self) - 1}")
        return self._read(index)

    def get(self, index: int, augment_seed: Optional[int] = None) -> TrainingExample:
        example = self.stored(index)
        if not self.augment:
            return example
        if augment_seed is None:
            with self._lock:
                draw, self._draws = self._draws, self._draws + 1
            augment_seed = derive_seed(self.augment_seed, "augment", draw)
        return reaugment(example, augment_seed)

    def batch(self, batch_seed: int, batch_size: int, threads: int = 1) -> List[TrainingExample]:
        indices = self.draw_indices(batch_seed, batch_size)
        if not self.augment:
            return self.take(indices, threads)
        draws: List[Tuple[int, int]] = [(index, derive_seed(batch_seed, "augment", position))
                                        for position, index in enumerate(indices)]
        return _map(lambda draw: self.get(*draw), draws, threads)

    def cache_info(self):
        return self._read.cache_info()

    @property
    def sample_rate(self) -> Optional[int]:
        return self.info.get("sample_rate")


def gen_data(out: Union[str, Path], count: int, seed: int, split: str, config: SceneConfig,
             threads: int = 1, assets: Optional[AssetBank] = None, asset_seed: int = 0) -> Path:
    """Write ``count`` examples of one split; output is independent of ``threads``.

    The asset bank (and with it the performer split) depends only on
    ``asset_seed``, so splits generated with different example seeds never
    share performers. Nothing is written augmented; the train split carries
    per-performer clouds for augmentation at load time.
    """
    if count < 1:
        raise ConfigError(f"--count must be >= 1, got {count}")
    if split not in SPLITS:
        raise ConfigError(f"Unknown split {split!r}")
    split_dir = Path(out) / split
    try:
        split_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create dataset directory {split_dir}: {e}") from e

    assets = assets or AssetBank(config, asset_seed)
    source = GeneratedExamples(assets, split, seed, count, augment=False)
    augment_on_load = split == "train"

    def produce(index: int) -> int:
        example = source.get(index)
        write_example(split_dir / f"{index:05d}", example, split, index, False, with_sources=augment_on_load)
        return example.spec.num_sources

    sizes = _map(produce, list(range(count)), threads)

    _dump_json(split_dir / DATASET_INFO, {
        "split": split,
        "count": count,
        "seed": seed,
        "asset_seed": assets.seed,
        "augmentation": False,
        "augment_on_load": augment_on_load,
        "sample_rate": config.sample_rate,
        "hrirs": assets.hrirs.name,
        "scene": to_dict(config),
        "sources_per_scene": {str(n): sizes.count(n) for n in (1, 2, 3)},
    })
    logger.info(f"Wrote {count} {split} examples to {split_dir}")
    return split_dir
