"""
Synthetic Shapes Dataset Module
Renders seeded images of non-overlapping filled rectangles, disks and triangles
on textured backgrounds, with exact bounding-box annotations and box-filtered
low-resolution counterparts.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from detector import BoundingBox
from errors import GenerationError, ShapeError, ValidationError
from image_io import SampleRecord, quantize, write_annotations, write_manifest, write_ppm

logger = logging.getLogger(__name__)

CLASS_NAMES = ("rectangle", "disk", "triangle")
MAX_PLACEMENT_RETRIES = 1000
MANIFEST_NAME = "manifest.tsv"

GroundTruth = Tuple[int, BoundingBox]


def downsample_box(image: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks of a (C,H,W) image"""
    image = np.asarray(image)
    channels, height, width = image.shape
    if factor < 1 or height % factor or width % factor:
        raise ShapeError(f"image {height}x{width} not divisible by factor {factor}")
    blocks = image.reshape(channels, height // factor, factor, width // factor, factor)
    return blocks.mean(axis=(2, 4), dtype=np.float64).astype(image.dtype)


def upsample_nearest(image: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(np.asarray(image), factor, axis=1), factor, axis=2)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.05, 0.35, size=3)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    freq = rng.uniform(0.2, 0.8, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    stripes = 0.06 * np.sin(freq[0] * xs + freq[1] * ys + phase)
    noise = rng.normal(0.0, 0.03, size=(3, size, size))
    return np.clip(base[:, None, None] + stripes[None] + noise, 0.0, 1.0)


def shape_mask(class_id: int, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    """Boolean (size, size) mask of a filled shape inside the cell box [x0, x0+w) x [y0, y0+h)"""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    px, py = xs + 0.5, ys + 0.5
    inside = (px >= x0) & (px < x0 + w) & (py >= y0) & (py < y0 + h)
    if class_id == 1:
        return inside
    if class_id == 2:
        cx, cy = x0 + w / 2.0, y0 + h / 2.0
        radius = min(w, h) / 2.0
        return inside & ((px - cx) ** 2 + (py - cy) ** 2 <= radius ** 2)
    if class_id == 3:
        # apex at top centre, base along the bottom edge
        apex_x, apex_y = x0 + w / 2.0, float(y0)
        bottom = float(y0 + h)
        t = (py - apex_y) / h
        half = t * w / 2.0
        return inside & (py <= bottom) & (np.abs(px - apex_x) <= half)
    raise ValidationError(f"unknown shape class {class_id}")


def tight_box(mask: np.ndarray) -> BoundingBox:
    """Pixel bounds of a mask with exclusive max edges"""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise GenerationError("shape rendered to an empty mask")
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def render_sample(rng: np.random.Generator, size: int, max_objects: int = 3,
                  min_extent: Optional[int] = None, max_extent: Optional[int] = None) -> Tuple[np.ndarray, List[GroundTruth]]:
    """
    Render one (3, size, size) image and its annotations.

    Raises:
        GenerationError: a shape could not be placed without overlap
    """
    min_extent = min_extent if min_extent is not None else max(4, size // 5)
    max_extent = max_extent if max_extent is not None else max(min_extent, (size * 5) // 12)
    if max_extent > size:
        raise GenerationError(f"shape extent {max_extent} exceeds image size {size}")
    image = _background(rng, size)
    occupied: List[Tuple[int, int, int, int]] = []
    annotations: List[GroundTruth] = []

    for _ in range(int(rng.integers(1, max_objects + 1))):
        class_id = int(rng.integers(1, len(CLASS_NAMES) + 1))
        for _attempt in range(MAX_PLACEMENT_RETRIES):
            w = int(rng.integers(min_extent, max_extent + 1))
            h = w if class_id == 2 else int(rng.integers(min_extent, max_extent + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            # one free pixel between shapes
            if all(x0 + w + 1 <= ox or ox + ow + 1 <= x0 or y0 + h + 1 <= oy or oy + oh + 1 <= y0
                   for ox, oy, ow, oh in occupied):
                break
        else:
            raise GenerationError(f"could not place shape after {MAX_PLACEMENT_RETRIES} attempts")
        occupied.append((x0, y0, w, h))
        mask = shape_mask(class_id, x0, y0, w, h, size)
        colour = rng.uniform(0.55, 1.0, size=3)
        image[:, mask] = colour[:, None]
        annotations.append((class_id, tight_box(mask)))
    return image, annotations


def make_synthetic_dataset(n: int, hr_size: int, scale: int, seed: int, out_dir: Union[str, Path],
                           max_objects: int = 3) -> List[SampleRecord]:
    """
    Write n HR/LR/annotation triples plus a manifest under ``out_dir``.

    LR images are box-filter downsamples of the quantized HR images, so the
    files on disk are mutually consistent.
    """
    if n < 0:
        raise ValidationError(f"n must be >= 0, got {n}")
    if scale < 1 or hr_size % scale:
        raise ValidationError(f"hr_size {hr_size} must be divisible by scale {scale}")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records: List[SampleRecord] = []
    for index in range(n):
        hr, annotations = render_sample(rng, hr_size, max_objects)
        hr = quantize(hr)
        lr = downsample_box(hr, scale)
        record = SampleRecord(out_dir / "hr" / f"{index:05d}.ppm",
                              out_dir / "lr" / f"{index:05d}.ppm",
                              out_dir / "ann" / f"{index:05d}.txt")
        write_ppm(hr, record.hr_path)
        write_ppm(lr, record.lr_path)
        write_annotations(record.ann_path, annotations)
        records.append(record)
    write_manifest(out_dir / MANIFEST_NAME, records)
    logger.info(f"✓ Generated {n} samples ({hr_size}x{hr_size}, scale {scale}) in: {out_dir}")
    return records


def split_records(records: Sequence, test_fraction: float, seed: int) -> Tuple[list, list]:
    """Seeded shuffle split; returns (train, test) each in original order"""
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(records))
    test_count = int(round(len(records) * test_fraction))
    test_index = set(order[:test_count].tolist())
    train = [r for i, r in enumerate(records) if i not in test_index]
    test = [r for i, r in enumerate(records) if i in test_index]
    return train, test
