"""
Command Line Interface
Subcommands for dataset generation, training, inference, the ablation
experiment and offline evaluation.

Exit codes: 0 success, 1 usage error, 2 data / validation error, 3 numeric failure.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ablation import load_split, run_ablation, train_detector_stage, train_sr_stage
from config import PipelineConfig, load_config
from detector import DetectConfig, detect, load_detector, save_detector
from errors import ConfigError, NumericError, PipelineError, UsageError
from eval_metrics import evaluate_detections
from image_io import format_detections, read_annotations, read_detections, read_ppm, write_detections, write_ppm
from pipeline import Pipeline, run_pipeline
from sr_network import generator_forward, load_generator, save_checkpoint
from sr_training import write_loss_history
from synthetic_data import make_synthetic_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting with status 2"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliParser:
    parser = CliParser(prog="srdet", description="Super-resolution + detection pipeline", allow_abbrev=False)
    parser.add_argument("--verbose", action="store_true", help="debug logging on stderr")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def command(name: str, help_text: str) -> CliParser:
        sub = commands.add_parser(name, help=help_text, allow_abbrev=False)
        sub.add_argument("--config", type=Path, help="experiment config file")
        sub.add_argument("--seed", type=int, help="override the configured seeds")
        return sub

    sub = command("gen-data", "render the synthetic shapes dataset")
    sub.add_argument("--out", type=Path, help="dataset directory (default: experiment.dataset_dir)")

    sub = command("train-sr", "train the super-resolution generator")
    sub.add_argument("--out", type=Path, required=True, help="generator checkpoint to write")

    sub = command("train-det", "train the detector on HR training images")
    sub.add_argument("--out", type=Path, required=True, help="detector checkpoint to write")

    sub = command("enhance", "super-resolve one LR image")
    sub.add_argument("--in", dest="input", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True)
    sub.add_argument("--ckpt", type=Path, required=True, help="generator checkpoint")

    sub = command("detect", "detect objects in one image")
    sub.add_argument("--in", dest="input", type=Path, required=True)
    sub.add_argument("--ckpt", type=Path, required=True, help="detector checkpoint")
    sub.add_argument("--out", type=Path, help="detections file (default: stdout)")

    sub = command("pipeline", "super-resolve then detect one LR image")
    sub.add_argument("--in", dest="input", type=Path, required=True)
    sub.add_argument("--out", type=Path, required=True, help="output directory")

    sub = command("ablate", "run the four-arm experiment")
    sub.add_argument("--out", type=Path, help="output directory (default: experiment.output_dir)")

    sub = command("eval", "score a detections file against an annotation file")
    sub.add_argument("--in", dest="input", type=Path, required=True, help="detections file")
    sub.add_argument("--ann", type=Path, required=True, help="ground-truth annotation file")
    return parser


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            sr=dataclasses.replace(cfg.sr, seed=args.seed),
            detector=dataclasses.replace(cfg.detector, seed=args.seed),
            experiment=dataclasses.replace(cfg.experiment, seed=args.seed),
        )
    return cfg


def _require_files(*paths: Path) -> None:
    for path in paths:
        if not path.is_file():
            raise ConfigError(f"input file does not exist: {path}")


def check_command_paths(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    """Fail before any work when a path the subcommand needs is missing or unusable"""
    if args.command in ("train-sr", "train-det", "ablate"):
        cfg.check_dataset()
    if args.command == "ablate":
        if args.out is not None and args.out.exists() and not args.out.is_dir():
            raise ConfigError(f"output directory is a file: {args.out}")
        if args.out is None:
            cfg.check_output_dir()
    elif args.command in ("enhance", "detect"):
        _require_files(args.ckpt, args.input)
    elif args.command == "pipeline":
        cfg.check_paths(cfg.sr.checkpoint, cfg.detector.checkpoint)
        _require_files(args.input)
    elif args.command == "eval":
        _require_files(args.input, args.ann)


def cmd_gen_data(args, cfg: PipelineConfig) -> None:
    exp = cfg.experiment
    make_synthetic_dataset(exp.num_samples, exp.hr_size, cfg.sr.scale_factor, exp.seed,
                           args.out if args.out is not None else cfg.dataset_dir)


def cmd_train_sr(args, cfg: PipelineConfig) -> None:
    train, _ = load_split(cfg)
    generator, reports = train_sr_stage(cfg, train)
    save_checkpoint(generator, args.out)
    write_loss_history(reports, args.out.with_suffix(".loss.csv"))


def cmd_train_det(args, cfg: PipelineConfig) -> None:
    train, _ = load_split(cfg)
    save_detector(train_detector_stage(cfg, [(s.hr, s.gts) for s in train]), args.out)


def cmd_enhance(args, cfg: PipelineConfig) -> None:
    generator = load_generator(args.ckpt)
    write_ppm(generator_forward(generator, read_ppm(args.input)), args.out)
    logger.info(f"✓ SR image saved to: {args.out}")


def cmd_detect(args, cfg: PipelineConfig) -> None:
    detector = load_detector(args.ckpt)
    detect_config = cfg.detector.detect_config() if args.config is not None else DetectConfig()
    detections = detect(read_ppm(args.input), detector, detect_config)
    if args.out is None:
        sys.stdout.write(format_detections(detections))
    else:
        write_detections(args.out, detections)
        logger.info(f"✓ {len(detections)} detections saved to: {args.out}")


def cmd_pipeline(args, cfg: PipelineConfig) -> None:
    pipeline = Pipeline.from_config(cfg)
    _, detections = run_pipeline(cfg, read_ppm(args.input), args.out, pipeline=pipeline)
    sys.stdout.write(format_detections(detections))


def cmd_ablate(args, cfg: PipelineConfig) -> None:
    if args.out is not None:
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment,
                                                                      output_dir=str(args.out.resolve())))
    sys.stdout.write(run_ablation(cfg).render())


def cmd_eval(args, cfg: PipelineConfig) -> None:
    result = evaluate_detections(args.input.name, [(read_detections(args.input), read_annotations(args.ann))],
                                 cfg.experiment.match_iou)
    sys.stdout.write(f"accuracy={result.accuracy:.2f} precision={result.precision:.2f} "
                     f"recall={result.recall:.2f} ap={result.ap:.2f}\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-sr": cmd_train_sr,
    "train-det": cmd_train_det,
    "enhance": cmd_enhance,
    "detect": cmd_detect,
    "pipeline": cmd_pipeline,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = _config(args)
        check_command_paths(args, cfg)
        COMMANDS[args.command](args, cfg)
    except NumericError as exc:
        logger.error(f"✗ Numeric failure: {exc}")
        return EXIT_NUMERIC
    except UsageError as exc:
        logger.error(f"✗ {exc}")
        return EXIT_USAGE
    except (PipelineError, OSError) as exc:
        logger.error(f"✗ {type(exc).__name__}: {exc}")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
