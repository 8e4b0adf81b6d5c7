"""
Pipeline Module
LR image -> generator -> SR image -> detector -> detections, with optional
annotated output, backed by loaded SRDT checkpoints.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import PipelineConfig
from detector import DetectConfig, Detection, Detector, detect, load_detector
from errors import ConfigError, ShapeError
from image_io import write_detections, write_ppm
from sr_network import Generator, generator_forward, load_generator
from visualization import annotate_image

logger = logging.getLogger(__name__)

PipelineResult = Tuple[np.ndarray, List[Detection]]


def map_ordered(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Apply fn to every item on up to `workers` threads; results keep input order"""
    if workers <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Pipeline:
    """
    Holds a loaded generator and detector.

    Inference records nothing on the computation tape, so one Pipeline may be
    shared by worker threads.
    """

    def __init__(self, generator: Generator, detector: Detector, detect_config: DetectConfig = DetectConfig(),
                 class_names: Sequence[str] = (), workers: int = 1):
        if generator.spec.input_channels != detector.spec.input_channels:
            raise ShapeError(f"generator emits {generator.spec.input_channels} channels, "
                             f"detector expects {detector.spec.input_channels}")
        self.generator = generator
        self.detector = detector
        self.detect_config = detect_config
        self.class_names = tuple(class_names)
        self.workers = max(1, int(workers))

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Pipeline":
        """
        Load both checkpoints named by the config.

        Raises:
            ConfigError: a checkpoint path is missing or unset
        """
        cfg.check_paths(cfg.sr.checkpoint, cfg.detector.checkpoint)
        generator = load_generator(cfg.resolve(cfg.sr.checkpoint))
        detector = load_detector(cfg.resolve(cfg.detector.checkpoint))
        if generator.spec.scale_factor != cfg.sr.scale_factor:
            raise ConfigError(f"checkpoint scale {generator.spec.scale_factor} != sr.scale_factor "
                              f"{cfg.sr.scale_factor}")
        logger.info(f"✓ Pipeline ready: generator {generator.parameter_count()} / "
                    f"detector {detector.parameter_count()} parameters")
        return cls(generator, detector, cfg.detector.detect_config(), cfg.detector.class_names,
                   cfg.experiment.workers)

    @property
    def scale_factor(self) -> int:
        return self.generator.spec.scale_factor

    def enhance(self, lr_image) -> np.ndarray:
        return np.array(generator_forward(self.generator, lr_image).data)

    def detect(self, image) -> List[Detection]:
        return detect(image, self.detector, self.detect_config)

    def run(self, lr_image) -> PipelineResult:
        sr_image = self.enhance(lr_image)
        return sr_image, self.detect(sr_image)

    def run_many(self, lr_images: Sequence) -> List[PipelineResult]:
        """Results in input order"""
        return map_ordered(self.run, lr_images, self.workers)

    def annotate(self, image, detections: Sequence[Detection]) -> np.ndarray:
        return annotate_image(image, detections, self.class_names)


def write_outputs(out_dir: Union[str, Path], sr_image: np.ndarray, detections: Sequence[Detection],
                  annotated: np.ndarray) -> None:
    out_dir = Path(out_dir)
    write_ppm(sr_image, out_dir / "sr.ppm")
    write_detections(out_dir / "detections.txt", detections)
    write_ppm(annotated, out_dir / "annotated.ppm")
    logger.info(f"✓ Pipeline outputs saved to: {out_dir}")


def run_pipeline(cfg: PipelineConfig, lr_image, out_dir: Optional[Union[str, Path]] = None,
                 pipeline: Optional[Pipeline] = None) -> PipelineResult:
    """
    Super-resolve one LR image and detect objects on the result.

    Args:
        cfg: Configuration naming both checkpoints
        lr_image: (C,h,w) image in [0, 1]
        out_dir: When given, sr.ppm, detections.txt and annotated.ppm are written there
        pipeline: Already loaded pipeline to reuse instead of loading from cfg

    Returns:
        (sr_image, detections)
    """
    pipeline = pipeline or Pipeline.from_config(cfg)
    sr_image, detections = pipeline.run(lr_image)
    logger.debug(f"{len(detections)} detections on {sr_image.shape} SR image")
    if out_dir is not None:
        write_outputs(out_dir, sr_image, detections, pipeline.annotate(sr_image, detections))
    return sr_image, detections
