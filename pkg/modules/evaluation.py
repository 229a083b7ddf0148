"""
Evaluation Module
Scores a trained model against the Mono-Mono and Rotated-Visual baselines,
bucketed by the number of sources per scene.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from modules.audio import AudioClip
from modules.checkpoint import Checkpoint
from modules.dataset import ExampleSource
from modules.error_handler import CheckpointError, ConfigError
from modules.metrics import envelope_distance, stft_distance
from modules.performance import performance
from modules.scene_gen import TrainingExample
from modules.trainer import Points2SoundModel

logger = logging.getLogger(__name__)

BASELINES = ("mono-mono", "rotated-visual")
METRICS = ("env", "stft")
BUCKETS = ("1", "2", "3")
ROTATED_VISUAL_ANGLE = np.pi / 2
LEFT_SIDE = {1, 2, 3}
RIGHT_SIDE = {5, 6, 7}


def mono_mono(example: TrainingExample) -> AudioClip:
    """Copy the mono mixture to both channels"""
    mono = example.s_m.samples[0]
    return AudioClip(np.stack([mono, mono]), example.s_m.sample_rate)


def is_same_side(example: TrainingExample) -> bool:
    """Both sources strictly on one lateral half of the listener"""
    indices = {k for _, k, _ in example.spec.sources}
    return indices <= LEFT_SIDE or indices <= RIGHT_SIDE


@dataclass
class ClipScore:
    sources: int
    same_side: bool
    env: float
    stft: float


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def _quartiles(values: Sequence[float]) -> Optional[Dict[str, float]]:
    if not len(values):
        return None
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))


@dataclass
class EvalReport:
    """Per-method metric means by source count, plus score distributions"""

    scores: Dict[str, List[ClipScore]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        first = next(iter(self.scores.values()), [])
        return len(first)

    def counts(self) -> Dict[str, int]:
        first = next(iter(self.scores.values()), [])
        return {bucket: sum(1 for s in first if str(s.sources) == bucket) for bucket in BUCKETS}

    def means(self, method: str) -> Dict[str, Dict[str, Optional[float]]]:
        clips = self.scores[method]
        table = {}
        for metric in METRICS:
            row = {b: _mean([getattr(s, metric) for s in clips if str(s.sources) == b]) for b in BUCKETS}
            row["avg"] = _mean([getattr(s, metric) for s in clips])
            table[metric] = row
        return table

    def quartiles(self, method: str) -> Dict[str, Dict[str, Optional[Dict[str, float]]]]:
        clips = self.scores[method]
        table = {}
        for metric in METRICS:
            row = {b: _quartiles([getattr(s, metric) for s in clips if str(s.sources) == b]) for b in BUCKETS}
            row["all"] = _quartiles([getattr(s, metric) for s in clips])
            table[metric] = row
        return table

    def two_source_sides(self, method: str) -> Dict[str, Dict[str, Optional[float]]]:
        pairs = [s for s in self.scores[method] if s.sources == 2]
        groups = {"same-side": [s for s in pairs if s.same_side], "other": [s for s in pairs if not s.same_side]}
        return {
            name: {"count": len(group), **{m: _mean([getattr(s, m) for s in group]) for m in METRICS}}
            for name, group in groups.items()
        }

    def to_dict(self) -> Dict:
        return {
            "methods": {method: self.means(method) for method in self.scores},
            "counts": self.counts(),
            "size": self.size,
            "quartiles": {method: self.quartiles(method) for method in self.scores},
            "two_source_sides": {method: self.two_source_sides(method) for method in self.scores},
        }

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"Evaluation report written: {path}")


@performance.measure_time("evaluate")
def evaluate(checkpoint: Union[Checkpoint, Points2SoundModel], eval_set: ExampleSource,
             baselines: Sequence[str] = BASELINES, include_oracle: bool = False) -> EvalReport:
    """Score the model and the requested baselines on every clip of ``eval_set``"""
    unknown = [b for b in baselines if b not in BASELINES]
    if unknown:
        raise ConfigError(f"Unknown baselines {unknown}; expected a subset of {BASELINES}")
    model = checkpoint if isinstance(checkpoint, Points2SoundModel) else Points2SoundModel.from_checkpoint(checkpoint)

    predictors: Dict[str, Callable[[TrainingExample], AudioClip]] = {
        "model": lambda e: model.predict(e.scene, e.s_m),
    }
    if "mono-mono" in baselines:
        predictors["mono-mono"] = mono_mono
    if "rotated-visual" in baselines:
        predictors["rotated-visual"] = lambda e: model.predict(e.scene, e.s_m, rotation=ROTATED_VISUAL_ANGLE)
    if include_oracle:
        predictors["oracle"] = lambda e: e.s_b

    report = EvalReport({method: [] for method in predictors})
    for index in range(len(eval_set)):
        example = eval_set.get(index)
        if example.s_m.sample_rate != model.sample_rate:
            raise CheckpointError(
                f"Evaluation clips at {example.s_m.sample_rate} Hz, checkpoint trained at {model.sample_rate} Hz"
            )
        same_side = is_same_side(example)
        for method, predict in predictors.items():
            estimate = predict(example)
            report.scores[method].append(ClipScore(
                sources=example.spec.num_sources,
                same_side=same_side,
                env=envelope_distance(example.s_b, estimate),
                stft=stft_distance(example.s_b, estimate),
            ))
        if (index + 1) % 50 == 0:
            logger.info(f"Evaluated {index + 1}/{len(eval_set)} clips")

    for method in report.scores:
        means = report.means(method)
        logger.info(f"{method}: env avg {means['env']['avg']}, stft avg {means['stft']['avg']}")
    return report
