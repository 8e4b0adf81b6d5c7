"""
Test Suite for the End-to-End Pipeline
"""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from config import parse_config_text
from detector import AnchorConfig, DetectConfig, DetectorSpec, build_detector, detect, save_detector
from errors import ConfigError, ShapeError
from image_io import read_detections, read_ppm
from pipeline import Pipeline, map_ordered, run_pipeline
from sr_network import GeneratorSpec, build_generator, generator_forward, save_checkpoint

G_SPEC = GeneratorSpec(num_rrdb=1, base_channels=8, growth_channels=4, scale_factor=4)
D_SPEC = DetectorSpec(backbone_channels=(4, 8, 8), rpn_channels=8, pool_size=2, hidden_units=16,
                      anchors=AnchorConfig(scales=(1.25, 2.0), aspect_ratios=(1.0,)))
LOW_THRESHOLD = "detector.score_threshold = 0.2\n"
FIXTURES = Path(__file__).parent / "fixtures"
SR_GOLDEN_SHA256 = "21223036695dcfaacdcb6a889b9d12137787d663a27c08aa2772138f4574fecc"


@pytest.fixture
def checkpoint_dir(tmp_path):
    save_checkpoint(build_generator(G_SPEC, seed=0), tmp_path / "ckpt" / "g.srdt")
    save_detector(build_detector(D_SPEC, seed=1), tmp_path / "ckpt" / "d.srdt")
    return tmp_path


def config_for(base, extra=""):
    text = "sr.checkpoint = ckpt/g.srdt\ndetector.checkpoint = ckpt/d.srdt\n" + extra
    return parse_config_text(text, base_dir=base)


def lr_image(seed=0):
    return np.random.default_rng(seed).uniform(size=(3, 12, 12)).astype(np.float32)


def test_pipeline_shapes_and_outputs(checkpoint_dir):
    cfg = config_for(checkpoint_dir, LOW_THRESHOLD)
    out = checkpoint_dir / "run"
    sr, detections = run_pipeline(cfg, lr_image(), out_dir=out)
    assert sr.shape == (3, 48, 48)
    assert isinstance(detections, list)
    assert read_ppm(out / "sr.ppm").shape == (3, 48, 48)
    assert read_ppm(out / "annotated.ppm").shape == (3, 48, 48)
    assert len(read_detections(out / "detections.txt")) == len(detections)


def test_pipeline_is_deterministic(checkpoint_dir):
    cfg = config_for(checkpoint_dir, LOW_THRESHOLD)
    pipeline = Pipeline.from_config(cfg)
    first = pipeline.run(lr_image(1))
    second = run_pipeline(cfg, lr_image(1))
    assert np.array_equal(first[0], second[0])
    assert first[1] == second[1]


def test_pipeline_equals_composed_stages(checkpoint_dir):
    cfg = config_for(checkpoint_dir, LOW_THRESHOLD)
    pipeline = Pipeline.from_config(cfg)
    sr, detections = pipeline.run(lr_image(2))
    expected_sr = generator_forward(pipeline.generator, lr_image(2)).data
    assert np.array_equal(sr, expected_sr)
    assert detections == detect(expected_sr, pipeline.detector, DetectConfig(score_threshold=0.2))


def test_missing_checkpoint_fails_at_startup(tmp_path):
    cfg = config_for(tmp_path)
    with pytest.raises(ConfigError):
        Pipeline.from_config(cfg)
    with pytest.raises(ConfigError):
        run_pipeline(parse_config_text("", base_dir=tmp_path), lr_image())


def test_scale_mismatch_is_config_error(checkpoint_dir):
    cfg = config_for(checkpoint_dir, "sr.scale_factor = 2\n")
    with pytest.raises(ConfigError):
        Pipeline.from_config(cfg)


def test_channel_mismatch_rejected():
    generator = build_generator(GeneratorSpec(num_rrdb=0, base_channels=4, growth_channels=2, scale_factor=2,
                                              input_channels=1), seed=0)
    with pytest.raises(ShapeError):
        Pipeline(generator, build_detector(D_SPEC, seed=0))


def test_run_many_keeps_order(checkpoint_dir):
    pipeline = Pipeline.from_config(config_for(checkpoint_dir, LOW_THRESHOLD + "experiment.workers = 3\n"))
    assert pipeline.workers == 3
    images = [lr_image(seed) for seed in range(4)]
    results = pipeline.run_many(images)
    for image, (sr, detections) in zip(images, results):
        single_sr, single_dets = pipeline.run(image)
        assert np.array_equal(sr, single_sr)
        assert detections == single_dets


def test_map_ordered():
    assert map_ordered(lambda x: x * x, list(range(10)), workers=4) == [x * x for x in range(10)]
    assert map_ordered(str, [], workers=4) == []


def identity_generator():
    """x2 generator whose output is the exact nearest-neighbour upscale of its input"""
    generator = build_generator(GeneratorSpec(num_rrdb=1, base_channels=3, growth_channels=1, scale_factor=2), seed=0)
    for _, tensor in generator.named_parameters():
        tensor.assign(np.zeros(tensor.shape))
    copy = np.zeros(generator.first_conv.weight.shape)
    copy[[0, 1, 2], [0, 1, 2], 1, 1] = 1.0
    generator.first_conv.weight.assign(copy)
    generator.final_conv.weight.assign(copy)
    spread = np.zeros(generator.upsample[0].weight.shape)
    for channel in range(3):
        spread[channel * 4:(channel + 1) * 4, channel, 1, 1] = 1.0
    generator.upsample[0].weight.assign(spread)
    return generator


def first_anchor_detector():
    """Every anchor ties, so the single kept proposal is anchor 0; the head always says class 1"""
    detector = build_detector(DetectorSpec(backbone_channels=(4, 8, 8), rpn_channels=8, pool_size=2, hidden_units=16,
                                           anchors=AnchorConfig(scales=(1.25,), aspect_ratios=(1.0,))), seed=0)
    for _, tensor in detector.named_parameters():
        tensor.assign(np.zeros(tensor.shape))
    detector.head.cls.bias.assign(np.array([-1000.0, 0.0, -1000.0, -1000.0]))
    return detector


def test_frozen_checkpoints_reproduce_golden_outputs(tmp_path):
    save_checkpoint(identity_generator(), tmp_path / "ckpt" / "g.srdt")
    save_detector(first_anchor_detector(), tmp_path / "ckpt" / "d.srdt")
    cfg = config_for(tmp_path, "sr.scale_factor = 2\ndetector.post_nms_k = 1\n")
    out = tmp_path / "run"
    with np.errstate(under="ignore"):
        run_pipeline(cfg, read_ppm(FIXTURES / "pipeline_lr.ppm"), out_dir=out)

    sr_bytes = (out / "sr.ppm").read_bytes()
    assert sr_bytes == (FIXTURES / "pipeline_sr_golden.ppm").read_bytes()
    assert hashlib.sha256(sr_bytes).hexdigest() == SR_GOLDEN_SHA256
    golden = (FIXTURES / "pipeline_detections_golden.txt").read_text(encoding="utf-8")
    assert (out / "detections.txt").read_text(encoding="utf-8") == golden
