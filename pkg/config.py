"""
Configuration Module
Flat "section.key = value" experiment configuration with typed sections.
"""

import logging
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from detector import AnchorConfig, DetectConfig, DetectorSpec
from detector_training import DetectorTrainConfig
from errors import ConfigError, PipelineError
from image_io import read_manifest
from sr_network import DiscriminatorSpec, GeneratorSpec
from sr_training import LossWeights
from synthetic_data import MANIFEST_NAME

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class SrSection:
    num_rrdb: int = 3
    base_channels: int = 16
    growth_channels: int = 8
    residual_beta: float = 0.2
    scale_factor: int = 4
    input_channels: int = 3
    discriminator_stages: Tuple[int, ...] = (16, 1, 16, 2, 32, 2, 32, 2)
    lambda_gan: float = 0.005
    lambda_perceptual: float = 1.0
    lambda_content: float = 0.0
    phi_channels: Tuple[int, ...] = (8, 16, 16)
    phi_tap: int = 3
    phi_seed: int = 1
    seed: int = 0
    learning_rate: float = 1e-3
    checkpoint: str = ""

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(self.num_rrdb, self.base_channels, self.growth_channels,
                             self.residual_beta, self.scale_factor, self.input_channels)

    def discriminator_spec(self) -> DiscriminatorSpec:
        values = self.discriminator_stages
        if len(values) % 2:
            raise ConfigError("sr.discriminator_stages needs (channels, stride) pairs")
        stages = tuple((values[i], values[i + 1]) for i in range(0, len(values), 2))
        return DiscriminatorSpec(stages, self.input_channels)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_gan, self.lambda_perceptual, self.lambda_content)


@dataclass
class DetectorSection:
    class_names: Tuple[str, ...] = ("rectangle", "disk", "triangle")
    backbone_channels: Tuple[int, ...] = (16, 32, 32)
    rpn_channels: int = 32
    pool_size: int = 4
    hidden_units: int = 64
    anchor_scales: Tuple[float, ...] = (1.25, 2.0, 2.75)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    feature_stride: int = 8
    pre_nms_k: int = 200
    post_nms_k: int = 30
    rpn_nms_iou: float = 0.7
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rpn_batch: int = 64
    roi_foreground_iou: float = 0.5
    roi_batch: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint: str = ""

    def spec(self) -> DetectorSpec:
        anchors = AnchorConfig(tuple(self.anchor_scales), tuple(self.anchor_ratios), self.feature_stride)
        return DetectorSpec(input_channels=3, backbone_channels=tuple(self.backbone_channels),
                            rpn_channels=self.rpn_channels, pool_size=self.pool_size,
                            hidden_units=self.hidden_units, num_classes=len(self.class_names), anchors=anchors)

    def detect_config(self) -> DetectConfig:
        return DetectConfig(self.pre_nms_k, self.post_nms_k, self.rpn_nms_iou, self.score_threshold, self.nms_iou)

    def train_config(self, epochs: int) -> DetectorTrainConfig:
        return DetectorTrainConfig(epochs=epochs, learning_rate=self.learning_rate,
                                   rpn_positive_iou=self.rpn_positive_iou, rpn_negative_iou=self.rpn_negative_iou,
                                   rpn_batch=self.rpn_batch, roi_foreground_iou=self.roi_foreground_iou,
                                   roi_batch=self.roi_batch, pre_nms_k=self.pre_nms_k, post_nms_k=self.post_nms_k,
                                   rpn_nms_iou=self.rpn_nms_iou, seed=self.seed)


@dataclass
class ExperimentSection:
    dataset_dir: str = "data"
    output_dir: str = "out"
    num_samples: int = 250
    hr_size: int = 48
    test_fraction: float = 0.2
    seed: int = 7
    sr_epochs: int = 10
    sr_max_steps: int = 0
    batch_size: int = 8
    detector_epochs: int = 8
    match_iou: float = 0.5
    workers: int = 1


SECTIONS = {"sr": SrSection, "detector": DetectorSection, "experiment": ExperimentSection}


@dataclass
class PipelineConfig:
    sr: SrSection = field(default_factory=SrSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    base_dir: Path = field(default_factory=Path)

    def resolve(self, value: str) -> Path:
        """Relative paths are taken relative to the config file's directory"""
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def dataset_dir(self) -> Path:
        return self.resolve(self.experiment.dataset_dir)

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.experiment.output_dir)

    def validate(self) -> "PipelineConfig":
        """Build every derived object once so range errors surface at load time"""
        try:
            self.sr.generator_spec()
            self.sr.discriminator_spec()
            self.sr.loss_weights()
            self.detector.spec()
            self.detector.detect_config()
            self.detector.train_config(self.experiment.detector_epochs)
        except PipelineError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        exp = self.experiment
        if exp.num_samples < 0 or exp.hr_size < 1 or exp.hr_size % self.sr.scale_factor:
            raise ConfigError(f"experiment.hr_size {exp.hr_size} must be positive and divisible by the scale factor")
        if not 0.0 < exp.test_fraction < 1.0:
            raise ConfigError(f"experiment.test_fraction must lie in (0, 1), got {exp.test_fraction}")
        if exp.sr_epochs < 0 or exp.detector_epochs < 0 or exp.sr_max_steps < 0:
            raise ConfigError("epoch and step budgets must be >= 0")
        if exp.batch_size < 1 or exp.workers < 1:
            raise ConfigError("experiment.batch_size and experiment.workers must be positive")
        if not 0.0 < exp.match_iou <= 1.0:
            raise ConfigError(f"experiment.match_iou must lie in (0, 1], got {exp.match_iou}")
        if self.sr.input_channels != 3:
            raise ConfigError("sr.input_channels must be 3 for the RGB detector")
        return self

    def check_paths(self, *values: str) -> None:
        for value in values:
            if not value:
                raise ConfigError("required path is not configured")
            if not self.resolve(value).exists():
                raise ConfigError(f"configured path does not exist: {self.resolve(value)}")

    def check_dataset(self) -> None:
        """An absent dataset is generated on demand; a present one must be complete"""
        directory = self.dataset_dir
        if directory.exists() and not directory.is_dir():
            raise ConfigError(f"experiment.dataset_dir is not a directory: {directory}")
        manifest = directory / MANIFEST_NAME
        if not manifest.exists():
            return
        for record in read_manifest(manifest):
            for path in (record.hr_path, record.lr_path, record.ann_path):
                if not path.exists():
                    raise ConfigError(f"dataset file listed in {manifest} does not exist: {path}")

    def check_output_dir(self) -> None:
        directory = self.output_dir
        if directory.exists() and not directory.is_dir():
            raise ConfigError(f"experiment.output_dir is not a directory: {directory}")


def _coerce(raw: str, annotation, where: str):
    try:
        if annotation is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if annotation in (int, float, str):
            return annotation(raw)
        if typing.get_origin(annotation) is tuple:
            item_type = typing.get_args(annotation)[0]
            return tuple(item_type(item.strip()) for item in raw.split(",") if item.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {annotation}") from exc
    raise ConfigError(f"{where}: unsupported field type {annotation}")


def parse_config_text(text: str, base_dir: PathLike = ".", source: str = "<config>") -> PipelineConfig:
    """
    Parse flat "section.key = value" lines.

    Raises:
        ConfigError: malformed line, unknown section/key, duplicate key or bad value
    """
    values: Dict[str, Dict[str, object]] = {name: {} for name in SECTIONS}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{number}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'section.key = value'")
        name, raw_value = (part.strip() for part in line.split("=", 1))
        section, _, key = name.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section '{section}'")
        hints = typing.get_type_hints(SECTIONS[section])
        if key not in hints:
            raise ConfigError(f"{where}: unknown key '{name}'")
        if key in values[section]:
            raise ConfigError(f"{where}: duplicate key '{name}'")
        values[section][key] = _coerce(raw_value, hints[key], where)

    config = PipelineConfig(
        sr=SrSection(**values["sr"]),
        detector=DetectorSection(**values["detector"]),
        experiment=ExperimentSection(**values["experiment"]),
        base_dir=Path(base_dir),
    )
    return config.validate()


def load_config(path: Optional[PathLike]) -> PipelineConfig:
    """Load and validate a config file; ``None`` gives the built-in defaults"""
    if path is None:
        return PipelineConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = parse_config_text(path.read_text(encoding="utf-8"), path.parent, str(path))
    logger.debug(f"Loaded configuration from {path}")
    return config


def render_config(config: PipelineConfig) -> str:
    """Serialize back to the flat text format"""
    lines = []
    for name in SECTIONS:
        section = getattr(config, name)
        for item in fields(section):
            value = getattr(section, item.name)
            text = ", ".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
            lines.append(f"{name}.{item.name} = {text}")
        lines.append("")
    return "\n".join(lines)
