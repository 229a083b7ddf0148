#!/usr/bin/env python3
"""
Points2Sound
Command-line entry point: dataset generation, training, binauralization of
mono recordings from a 3D scene, and evaluation against baselines.
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional


def _apply_thread_limit(argv: List[str]) -> None:
    """Pin the BLAS/OpenMP pools before numpy is loaded"""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--threads", type=int)
    known, _ = pre.parse_known_args(argv)
    threads = known.threads or os.getenv("P2S_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


if __name__ == "__main__":
    _apply_thread_limit(sys.argv[1:])

import numpy as np  # noqa: E402

from modules.audio import read_wav, write_wav  # noqa: E402
from modules.checkpoint import Checkpoint  # noqa: E402
from modules.config import (  # noqa: E402
    FEATURE_MODES,
    LOSS_MODES,
    PRESETS,
    SPLITS,
    RunConfig,
    load_config_file,
    merge,
    resolve_train_config,
)
from modules.binaural import load_hrir_set  # noqa: E402
from modules.dataset import DiskExamples, GeneratedExamples, gen_data  # noqa: E402
from modules.error_handler import EXIT_OK, ConfigError, ErrorHandler  # noqa: E402
from modules.evaluation import evaluate  # noqa: E402
from modules.performance import performance  # noqa: E402
from modules.pointcloud import read_cloud  # noqa: E402
from modules.scene_gen import AssetBank  # noqa: E402
from modules.trainer import Points2SoundModel, best_val_loss, output_width, train  # noqa: E402

logger = logging.getLogger("points2sound")

ROTATION = np.pi / 2


def setup_logging() -> None:
    """Console logging at LOG_LEVEL, plus LOG_FILE when set"""
    level = getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO)
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    logging.basicConfig(format=log_format, level=level)
    log_file = os.getenv("LOG_FILE")
    if log_file:
        handler = logging.FileHandler(log_file)
        handler.setFormatter(logging.Formatter(log_format))
        logging.getLogger().addHandler(handler)


def _instrument_list(value: str) -> tuple:
    return tuple(part.strip() for part in value.split(",") if part.strip())


def _scene_flags(args: argparse.Namespace) -> Dict[str, Any]:
    flags: Dict[str, Any] = {"preset": args.preset, "threads": args.threads}
    scene: Dict[str, Any] = {}
    if getattr(args, "instruments", None):
        scene["instruments"] = args.instruments
    if getattr(args, "sample_rate", None):
        scene["sample_rate"] = args.sample_rate
        flags["audio"] = {"sample_rate": args.sample_rate}
    if scene:
        flags["scene"] = scene
    return flags


class Points2SoundCLI:
    def __init__(self):
        self.parser = argparse.ArgumentParser(
            prog="points2sound",
            description="Binaural audio from mono audio and a 3D point cloud scene",
        )
        self.subparsers = self.parser.add_subparsers(dest="command", required=True)
        self._setup_commands()

    def _setup_commands(self):
        """Register the subcommands and their handlers"""
        gen = self._add_command("gen-data", self.gen_data_command, "Generate a synthetic dataset split")
        gen.add_argument("--out", required=True, help="Dataset directory")
        gen.add_argument("--count", type=int, required=True, help="Number of examples")
        gen.add_argument("--seed", type=int, help="Example seed (default: P2S_SEED or 0)")
        gen.add_argument("--asset-seed", type=int, default=0, help="Seed of the performer/recording bank")
        gen.add_argument("--split", choices=SPLITS, default="train")
        gen.add_argument("--clip-secs", type=float, help="Clip length in seconds")
        gen.add_argument("--hrirs", help="HRIR set directory (default: spherical-head model)")
        gen.add_argument("--config", help="JSON config file")
        gen.add_argument("--instruments", type=_instrument_list, help="Comma-separated instrument classes")
        gen.add_argument("--sample-rate", type=int)

        tr = self._add_command("train", self.train_command, "Train the joint model")
        tr.add_argument("--data", required=True, help="Dataset directory with a train split")
        tr.add_argument("--out", required=True, help="Output checkpoint path")
        tr.add_argument("--config", help="JSON config file")
        tr.add_argument("--log", help="Training log path (default: <out>.log.jsonl)")
        tr.add_argument("--init", help="Checkpoint to warm-start from")
        tr.add_argument("--loss", choices=LOSS_MODES)
        tr.add_argument("--features", choices=FEATURE_MODES)
        tr.add_argument("--iterations", type=int)
        tr.add_argument("--batch-size", type=int)
        tr.add_argument("--lr", type=float)
        tr.add_argument("--seed", type=int)
        tr.add_argument("--eval-every", type=int)
        tr.add_argument("--val-size", type=int)
        tr.add_argument("--instruments", type=_instrument_list)
        tr.add_argument("--sample-rate", type=int)

        bn = self._add_command("binauralize", self.binauralize_command, "Binauralize a mono recording")
        bn.add_argument("--ckpt", required=True)
        bn.add_argument("--scene", required=True, help="Scene point cloud (p2s-cloud)")
        bn.add_argument("--mono", required=True, help="Mono WAV input")
        bn.add_argument("--out", required=True, help="Binaural WAV output")
        bn.add_argument("--rotate", action="store_true", help="Rotate the scene by 90 degrees first")

        ev = self._add_command("evaluate", self.evaluate_command, "Evaluate a checkpoint against baselines")
        ev.add_argument("--ckpt", required=True)
        ev.add_argument("--data", required=True)
        ev.add_argument("--out", required=True, help="JSON report path")
        ev.add_argument("--split", choices=SPLITS, default="test")
        ev.add_argument("--oracle", action="store_true", help="Add the ground-truth sanity row")

    def _add_command(self, name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = self.subparsers.add_parser(name, help=help_text)
        sub.add_argument("--threads", type=int, help="Worker threads (1 = bit-level determinism)")
        sub.add_argument("--preset", choices=PRESETS)
        sub.set_defaults(handler=handler)
        return sub

    def run(self, argv: Optional[List[str]] = None) -> int:
        args = self.parser.parse_args(argv)
        try:
            return args.handler(args)
        except Exception as e:
            return ErrorHandler.handle_command_error(e, args.command)

    @staticmethod
    def _log_config(run: RunConfig) -> None:
        logger.info(f"Resolved config: {run.to_json()}")

    def gen_data_command(self, args: argparse.Namespace) -> int:
        file_values = load_config_file(args.config) if args.config else {}
        config = resolve_train_config(file_values, _scene_flags(args))
        scene = config.scene
        if args.clip_secs is not None:
            if args.clip_secs <= 0:
                raise ConfigError("--clip-secs must be positive")
            scene = merge(scene, {"clip_seconds": args.clip_secs, "eval_clip_seconds": args.clip_secs})
        seed = config.seed if args.seed is None else args.seed
        hrirs = load_hrir_set(args.hrirs) if args.hrirs else None
        self._log_config(RunConfig("gen-data", {
            "out": args.out, "count": args.count, "seed": seed, "asset_seed": args.asset_seed,
            "split": args.split, "hrirs": args.hrirs, "threads": config.threads,
        }, config))

        assets = AssetBank(scene, args.asset_seed, hrirs)
        gen_data(args.out, args.count, seed, args.split, scene, threads=config.threads, assets=assets)
        return EXIT_OK

    def train_command(self, args: argparse.Namespace) -> int:
        file_values = load_config_file(args.config) if args.config else {}
        flags = _scene_flags(args)
        flags.update({
            "loss_mode": args.loss,
            "feature_mode": args.features,
            "iterations": args.iterations,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "seed": args.seed,
            "eval_every": args.eval_every,
            "val_size": args.val_size,
        })
        config = resolve_train_config(file_values, flags)
        log_path = args.log or f"{args.out}.log.jsonl"

        source = DiskExamples(args.data, "train")
        if source.sample_rate and source.sample_rate != config.scene.sample_rate:
            raise ConfigError(
                f"Dataset sampled at {source.sample_rate} Hz but config expects {config.scene.sample_rate} Hz"
            )
        if (source.root / "val").is_dir():
            val_source = DiskExamples(args.data, "val")
        else:
            logger.info("No val split on disk; generating validation scenes")
            asset_seed = int(source.info.get("asset_seed", 0))
            val_source = GeneratedExamples(AssetBank(config.scene, asset_seed), "val", config.seed, config.val_size)
        warm_start = Checkpoint.load(args.init) if args.init else None
        self._log_config(RunConfig("train", {
            "data": args.data, "out": args.out, "log": log_path, "init": args.init,
        }, config))

        checkpoint = train(config, source, val_source, log_path=log_path, warm_start=warm_start)
        checkpoint.save(args.out)
        logger.info(f"Best validation loss {best_val_loss(checkpoint)}; output width {output_width(checkpoint)}; "
                    f"wall time {performance.last_timing('train'):.1f}s")
        return EXIT_OK

    def binauralize_command(self, args: argparse.Namespace) -> int:
        self._log_config(RunConfig("binauralize", {
            "ckpt": args.ckpt, "scene": args.scene, "mono": args.mono, "out": args.out, "rotate": args.rotate,
        }))
        model = Points2SoundModel.from_checkpoint(Checkpoint.load(args.ckpt))
        scene = read_cloud(args.scene)
        mono = read_wav(args.mono)

        @performance.measure_time("binauralize")
        def infer():
            return model.predict(scene, mono, rotation=ROTATION if args.rotate else 0.0)

        binaural = infer()
        write_wav(args.out, binaural)
        logger.info(f"Binauralized {mono.duration:.2f}s of audio in {performance.last_timing('binauralize'):.3f}s")
        return EXIT_OK

    def evaluate_command(self, args: argparse.Namespace) -> int:
        self._log_config(RunConfig("evaluate", {
            "ckpt": args.ckpt, "data": args.data, "out": args.out, "split": args.split, "oracle": args.oracle,
        }))
        checkpoint = Checkpoint.load(args.ckpt)
        eval_set = DiskExamples(args.data, args.split, augment=False)
        if eval_set.info.get("augmentation"):
            logger.warning(f"The {args.split} split was generated with augmentation")
        report = evaluate(checkpoint, eval_set, include_oracle=args.oracle)
        report.save(args.out)
        return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main function"""
    setup_logging()
    return Points2SoundCLI().run(argv)


if __name__ == "__main__":
    sys.exit(main())
