"""
Ablation Experiment Module
Trains the SR stage and two detectors at desk scale, then evaluates the four
arms (detector on LR, SR only, detector on HR, SR followed by the detector)
on the held-out split and writes the report files.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import numpy as np

from config import PipelineConfig
from detector import BoundingBox, Detector, build_detector, save_detector
from detector_training import train_detector
from errors import PipelineError
from eval_metrics import ExperimentResult, MetricsReport, build_report, evaluate_detections, format_psnr, psnr
from image_io import SampleRecord, read_manifest
from pipeline import Pipeline, map_ordered
from sr_network import Generator, build_discriminator, build_generator, save_checkpoint
from sr_training import FeatureExtractor, LossReport, train_sr, write_loss_history
from synthetic_data import MANIFEST_NAME, make_synthetic_dataset, split_records, upsample_nearest
from visualization import plot_loss_history

logger = logging.getLogger(__name__)

ARM_NAMES = ("Traditional Model", "SR Only", "Detector Only", "SR + Detector")

GroundTruth = Tuple[int, BoundingBox]


@dataclass
class Sample:
    hr: np.ndarray
    lr: np.ndarray
    gts: List[GroundTruth]


def prepare_dataset(cfg: PipelineConfig) -> List[SampleRecord]:
    """Generate the synthetic dataset when its manifest is absent, then read and validate it"""
    manifest = cfg.dataset_dir / MANIFEST_NAME
    exp = cfg.experiment
    if not manifest.exists():
        make_synthetic_dataset(exp.num_samples, exp.hr_size, cfg.sr.scale_factor, exp.seed, cfg.dataset_dir)
    records = read_manifest(manifest)
    for record in records:
        record.validate(cfg.sr.scale_factor)
    logger.info(f"✓ Dataset: {len(records)} samples from {manifest}")
    return records


def load_split(cfg: PipelineConfig) -> Tuple[List[Sample], List[Sample]]:
    """Seeded train / test split of the configured dataset, loaded into memory"""
    train, test = split_records(prepare_dataset(cfg), cfg.experiment.test_fraction, cfg.experiment.seed)
    return [Sample(*r.load()) for r in train], [Sample(*r.load()) for r in test]


def train_sr_stage(cfg: PipelineConfig, samples: Sequence[Sample]) -> Tuple[Generator, List[LossReport]]:
    generator = build_generator(cfg.sr.generator_spec(), cfg.sr.seed)
    discriminator = build_discriminator(cfg.sr.discriminator_spec(), cfg.sr.seed + 1)
    phi = FeatureExtractor(cfg.sr.phi_seed, cfg.sr.phi_channels, cfg.sr.input_channels, cfg.sr.phi_tap)
    logger.debug(f"Feature extractor hash {phi.parameter_hash()}")
    reports = train_sr(generator, discriminator, phi, [(s.lr, s.hr) for s in samples], cfg.sr.loss_weights(),
                       epochs=cfg.experiment.sr_epochs, batch_size=cfg.experiment.batch_size, seed=cfg.sr.seed,
                       learning_rate=cfg.sr.learning_rate, max_steps=cfg.experiment.sr_max_steps)
    return generator, reports


def train_detector_stage(cfg: PipelineConfig, images: Sequence[Tuple[np.ndarray, Sequence[GroundTruth]]]) -> Detector:
    detector = build_detector(cfg.detector.spec(), cfg.detector.seed)
    train_detector(detector, images, cfg.detector.train_config(cfg.experiment.detector_epochs))
    return detector


def _run_arm(name: str, body: Callable[[], ExperimentResult]) -> ExperimentResult:
    try:
        result = body()
    except PipelineError as exc:
        logger.error(f"✗ Arm '{name}' failed: {exc}")
        raise exc.add_context(f"arm '{name}'")
    logger.info(f"✓ Arm '{name}' evaluated")
    return result


def evaluate_arms(cfg: PipelineConfig, test: Sequence[Sample], generator: Generator, lr_detector: Detector,
                  hr_detector: Detector) -> Tuple[List[ExperimentResult], List[str]]:
    """The four report rows in order plus the PSNR notes"""
    scale = cfg.sr.scale_factor
    iou = cfg.experiment.match_iou
    names = cfg.detector.class_names
    detect_cfg = cfg.detector.detect_config()
    workers = cfg.experiment.workers
    lr_pipeline = Pipeline(generator, lr_detector, detect_cfg, names, workers)
    hr_pipeline = Pipeline(generator, hr_detector, detect_cfg, names, workers)
    sr_images: List[np.ndarray] = []

    def traditional() -> ExperimentResult:
        dets = map_ordered(lr_pipeline.detect, [s.lr for s in test], workers)
        return evaluate_detections(ARM_NAMES[0], [([d.scaled(scale) for d in ds], s.gts)
                                                  for ds, s in zip(dets, test)], iou)

    def sr_only() -> ExperimentResult:
        sr_images.extend(map_ordered(hr_pipeline.enhance, [s.lr for s in test], workers))
        return ExperimentResult(ARM_NAMES[1])

    def detector_only() -> ExperimentResult:
        dets = map_ordered(hr_pipeline.detect, [s.hr for s in test], workers)
        return evaluate_detections(ARM_NAMES[2], list(zip(dets, [s.gts for s in test])), iou)

    def combined() -> ExperimentResult:
        dets = map_ordered(hr_pipeline.detect, sr_images, workers)
        return evaluate_detections(ARM_NAMES[3], list(zip(dets, [s.gts for s in test])), iou)

    rows = [_run_arm(name, body) for name, body in zip(ARM_NAMES, (traditional, sr_only, detector_only, combined))]
    notes = []
    if test:
        sr_psnr = float(np.mean([psnr(sr, s.hr) for sr, s in zip(sr_images, test)]))
        nearest_psnr = float(np.mean([psnr(upsample_nearest(s.lr, scale), s.hr) for s in test]))
        notes.append(f"{ARM_NAMES[1]}: mean PSNR {format_psnr(sr_psnr)} dB "
                     f"(nearest-neighbour upsample {format_psnr(nearest_psnr)} dB) over {len(test)} test images.")
    return rows, notes


def run_ablation(cfg: PipelineConfig) -> MetricsReport:
    """
    Run the whole four-arm experiment.

    Writes report.csv, report.txt, loss_history.csv (plus a loss plot) and the
    three checkpoints under the configured output directory.

    Returns:
        The rendered-ready MetricsReport
    """
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    scale = cfg.sr.scale_factor
    train, test = load_split(cfg)
    logger.info(f"✓ Split: {len(train)} train / {len(test)} test")

    generator, reports = train_sr_stage(cfg, train)
    write_loss_history(reports, out_dir / "loss_history.csv")
    if reports:
        plot_loss_history(reports, out_dir / "loss_history.png")
    save_checkpoint(generator, out_dir / "generator.srdt")

    hr_detector = train_detector_stage(cfg, [(s.hr, s.gts) for s in train])
    save_detector(hr_detector, out_dir / "detector_hr.srdt")
    lr_detector = train_detector_stage(cfg, [(s.lr, [(c, b.scaled(1.0 / scale)) for c, b in s.gts])
                                             for s in train])
    save_detector(lr_detector, out_dir / "detector_lr.srdt")

    rows, notes = evaluate_arms(cfg, test, generator, lr_detector, hr_detector)
    report = build_report(rows, cfg.experiment.match_iou, notes)
    report.write_csv(out_dir / "report.csv")
    report.write_table(out_dir / "report.txt")
    logger.info(f"✓ Report saved to: {Path(out_dir) / 'report.csv'}")
    return report
