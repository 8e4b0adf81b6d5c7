"""
Test Suite for the Ablation Experiment
A tiny configuration exercises every arm and output file; the full desk-scale
run is marked slow.
"""

import dataclasses
from pathlib import Path

import pytest

from ablation import ARM_NAMES, _run_arm, load_split, run_ablation
from config import load_config, parse_config_text
from detector import load_detector
from errors import NumericError
from image_io import read_manifest
from sr_network import load_generator
from sr_training import read_loss_history

ROOT = Path(__file__).parent

TINY = """
experiment.dataset_dir = data
experiment.output_dir = out
experiment.num_samples = 8
experiment.hr_size = 32
experiment.test_fraction = 0.25
experiment.seed = 3
experiment.sr_epochs = 1
experiment.sr_max_steps = 2
experiment.batch_size = 4
experiment.detector_epochs = 1
experiment.workers = 2
sr.num_rrdb = 1
sr.base_channels = 4
sr.growth_channels = 2
sr.scale_factor = 2
sr.discriminator_stages = 4, 1, 4, 2
sr.phi_channels = 4, 4
sr.phi_tap = 2
detector.backbone_channels = 4, 8, 8
detector.rpn_channels = 8
detector.pool_size = 2
detector.hidden_units = 16
detector.anchor_scales = 1.25, 2.0
detector.anchor_ratios = 1.0
detector.pre_nms_k = 32
detector.post_nms_k = 8
detector.rpn_batch = 16
detector.roi_batch = 8
detector.score_threshold = 0.0
"""


def tiny_config(base, extra=""):
    return parse_config_text(TINY + extra, base_dir=base)


def test_tiny_run_writes_every_output(tmp_path):
    cfg = tiny_config(tmp_path)
    report = run_ablation(cfg)

    assert [row.name for row in report.rows] == list(ARM_NAMES)
    assert report.rows[1].values() == (None, None, None, None), "SR Only has no detection metrics"
    for row in (report.rows[0], report.rows[2], report.rows[3]):
        assert all(0.0 <= v <= 100.0 for v in row.values())
    assert len(report.notes) == 1 and "PSNR" in report.notes[0]

    out = tmp_path / "out"
    for name in ("report.csv", "report.txt", "loss_history.csv", "loss_history.png",
                 "generator.srdt", "detector_hr.srdt", "detector_lr.srdt"):
        assert (out / name).exists(), f"{name} not written"
    assert (out / "report.txt").read_text(encoding="utf-8") == report.render()
    assert (out / "report.csv").read_text(encoding="utf-8") == report.to_csv()
    assert len(read_loss_history(out / "loss_history.csv")) == 2
    assert load_generator(out / "generator.srdt").spec == cfg.sr.generator_spec()
    assert load_detector(out / "detector_lr.srdt").spec == cfg.detector.spec()
    print(f"✓ Tiny ablation report:\n{report.render()}")


def test_dataset_is_generated_once_and_split(tmp_path):
    cfg = tiny_config(tmp_path)
    train, test = load_split(cfg)
    assert len(train) == 6 and len(test) == 2
    manifest = tmp_path / "data" / "manifest.tsv"
    stamp = manifest.stat().st_mtime_ns
    load_split(cfg)
    assert manifest.stat().st_mtime_ns == stamp, "an existing dataset is reused"
    assert len(read_manifest(manifest)) == 8


def test_zero_budgets_still_report(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, sr_epochs=0, detector_epochs=0))
    report = run_ablation(cfg)
    assert len(report.rows) == 4
    assert read_loss_history(tmp_path / "out" / "loss_history.csv") == []
    assert not (tmp_path / "out" / "loss_history.png").exists()


def test_failed_arm_is_named_and_keeps_its_kind():
    def diverge():
        raise NumericError("loss is not finite", "exp#1")

    with pytest.raises(NumericError) as info:
        _run_arm(ARM_NAMES[3], diverge)
    assert str(info.value).startswith(f"arm '{ARM_NAMES[3]}': loss is not finite")
    assert info.value.op_name == "exp#1"


def test_runs_are_reproducible(tmp_path):
    first = tiny_config(tmp_path)
    second = dataclasses.replace(first, experiment=dataclasses.replace(first.experiment, output_dir="out2"))
    run_ablation(first)
    run_ablation(second)
    for name in ("report.csv", "loss_history.csv", "generator.srdt", "detector_hr.srdt"):
        assert (tmp_path / "out" / name).read_bytes() == (tmp_path / "out2" / name).read_bytes(), name


@pytest.mark.slow
def test_desk_scale_sr_helps_detection(tmp_path):
    """Pinned default experiment: SR + Detector beats the LR detector"""
    cfg = load_config(ROOT / "default.cfg")
    cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(
        cfg.experiment, dataset_dir=str(tmp_path / "data"), output_dir=str(tmp_path / "out")))
    report = run_ablation(cfg)
    traditional, hr_only, combined = report.rows[0], report.rows[2], report.rows[3]
    assert combined.recall >= traditional.recall + 5.0, report.render()
    assert combined.accuracy >= traditional.accuracy + 5.0, report.render()
    assert hr_only.recall > traditional.recall, report.render()
    print(f"✓ Desk-scale report:\n{report.render()}")
