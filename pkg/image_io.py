"""
Image and Annotation I/O Module
Binary PPM (P6) / PGM (P5) codec, annotation and detection text files, and the
tab-separated sample manifest.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from detector import BoundingBox, Detection
from errors import (
    AnnotationError,
    DomainError,
    PpmDimensionError,
    PpmError,
    PpmMagicError,
    PpmTruncatedError,
    ShapeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
GroundTruth = Tuple[int, BoundingBox]

MAXVAL = 255
MAX_DIMENSION = 1 << 15
WHITESPACE = b" \t\n\r\v\f"


def _next_token(blob: bytes, pos: int) -> Tuple[bytes, int, int]:
    """Skip whitespace and '#' comments; return (token, token offset, next position)"""
    length = len(blob)
    while pos < length:
        if blob[pos:pos + 1] in (b"#",):
            while pos < length and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif blob[pos] in WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < length and blob[pos] not in WHITESPACE and blob[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PpmTruncatedError("header ended early", start)
    return blob[start:pos], start, pos


def _header_int(blob: bytes, pos: int, what: str) -> Tuple[int, int, int]:
    token, offset, pos = _next_token(blob, pos)
    if not token.isdigit():
        raise PpmError(f"malformed {what} {token!r}", offset)
    return int(token), offset, pos


def decode_ppm(blob: bytes) -> np.ndarray:
    """
    Parse P6/P5 bytes into a (C,H,W) float32 array scaled to [0, 1].

    Raises:
        PpmMagicError: not P6/P5
        PpmDimensionError: zero or oversized dimensions
        PpmTruncatedError: header or payload ends early
        PpmError: other malformed header fields
    """
    magic = blob[:2]
    if magic not in (b"P6", b"P5"):
        raise PpmMagicError(f"bad magic {magic!r}, expected P6 or P5", 0)
    channels = 3 if magic == b"P6" else 1
    pos = 2
    if pos < len(blob) and blob[pos] not in WHITESPACE:
        raise PpmMagicError("magic must be followed by whitespace", pos)

    width, offset, pos = _header_int(blob, pos, "width")
    if not 1 <= width <= MAX_DIMENSION:
        raise PpmDimensionError(f"width {width} outside 1..{MAX_DIMENSION}", offset)
    height, offset, pos = _header_int(blob, pos, "height")
    if not 1 <= height <= MAX_DIMENSION:
        raise PpmDimensionError(f"height {height} outside 1..{MAX_DIMENSION}", offset)
    maxval, offset, pos = _header_int(blob, pos, "maxval")
    if maxval != MAXVAL:
        raise PpmError(f"maxval {maxval} unsupported (only {MAXVAL})", offset)
    if pos >= len(blob):
        raise PpmTruncatedError("missing whitespace after maxval", pos)
    pos += 1

    needed = width * height * channels
    payload = blob[pos:pos + needed]
    if len(payload) < needed:
        raise PpmTruncatedError(f"payload has {len(payload)} of {needed} bytes", pos + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(MAXVAL))


def encode_ppm(image) -> bytes:
    """(3,H,W) -> P6 or (1,H,W) -> P5 bytes; values must lie in [0, 1]"""
    array = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if array.ndim != 3 or array.shape[0] not in (1, 3):
        raise ShapeError(f"expected a (1|3, H, W) image, got shape {array.shape}")
    bad = np.argwhere(~((array >= 0.0) & (array <= 1.0)))
    if bad.size:
        raise DomainError("pixel value outside [0, 1]", index=tuple(int(i) for i in bad[0]))
    channels, height, width = array.shape
    quantized = np.round(array * MAXVAL).astype(np.uint8)
    magic = "P6" if channels == 3 else "P5"
    header = f"{magic}\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    return header + quantized.transpose(1, 2, 0).tobytes()


def read_ppm(path: PathLike) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(image, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(image))


def quantize(image: np.ndarray) -> np.ndarray:
    """The values read_ppm would return after write_ppm"""
    return (np.round(np.asarray(image, dtype=np.float64) * MAXVAL).astype(np.uint8).astype(np.float32)
            / np.float32(MAXVAL))


def _format_coordinate(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:.6f}"


def _data_lines(path: PathLike):
    with open(path, encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield number, line


def read_annotations(path: PathLike) -> List[GroundTruth]:
    """Lines "class_id x_min y_min x_max y_max"; '#' starts a comment"""
    boxes: List[GroundTruth] = []
    for number, line in _data_lines(path):
        fields = line.split()
        if len(fields) != 5:
            raise AnnotationError(f"{path}:{number}: expected 5 fields, got {len(fields)}")
        try:
            class_id = int(fields[0])
            box = BoundingBox(*(float(v) for v in fields[1:]))
        except (ValueError, ValidationError) as exc:
            raise AnnotationError(f"{path}:{number}: {exc}") from exc
        if class_id < 1:
            raise AnnotationError(f"{path}:{number}: class_id must be >= 1, got {class_id}")
        boxes.append((class_id, box))
    return boxes


def write_annotations(path: PathLike, boxes: Sequence[GroundTruth]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [" ".join([str(cls), *(_format_coordinate(v) for v in
                                   (box.x_min, box.y_min, box.x_max, box.y_max))]) for cls, box in boxes]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_detections(path: PathLike) -> List[Detection]:
    """Lines "class_id score x_min y_min x_max y_max" """
    detections: List[Detection] = []
    for number, line in _data_lines(path):
        fields = line.split()
        if len(fields) != 6:
            raise AnnotationError(f"{path}:{number}: expected 6 fields, got {len(fields)}")
        try:
            detections.append(Detection(BoundingBox(*(float(v) for v in fields[2:])), int(fields[0]),
                                        float(fields[1])))
        except (ValueError, ValidationError) as exc:
            raise AnnotationError(f"{path}:{number}: {exc}") from exc
    return detections


def format_detections(detections: Sequence[Detection]) -> str:
    return "".join(det.to_line() + "\n" for det in detections)


def write_detections(path: PathLike, detections: Sequence[Detection]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_detections(detections), encoding="utf-8")


@dataclass(frozen=True)
class SampleRecord:
    """One dataset sample; paths are absolute once read from a manifest"""
    hr_path: Path
    lr_path: Path
    ann_path: Path

    def load(self) -> Tuple[np.ndarray, np.ndarray, List[GroundTruth]]:
        return read_ppm(self.hr_path), read_ppm(self.lr_path), read_annotations(self.ann_path)

    def validate(self, scale_factor: int) -> None:
        hr = read_ppm(self.hr_path)
        lr = read_ppm(self.lr_path)
        expected = (hr.shape[0], hr.shape[1] // scale_factor, hr.shape[2] // scale_factor)
        if hr.shape[1] % scale_factor or hr.shape[2] % scale_factor or lr.shape != expected:
            raise ValidationError(f"{self.lr_path}: shape {lr.shape} is not HR {hr.shape} / {scale_factor}")


def read_manifest(path: PathLike) -> List[SampleRecord]:
    """Tab-separated "hr<TAB>lr<TAB>ann" lines; relative paths resolve against the manifest directory"""
    path = Path(path)
    base = path.parent
    records: List[SampleRecord] = []
    for number, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValidationError(f"{path}:{number}: expected 3 tab-separated paths, got {len(fields)}")
        records.append(SampleRecord(*(base / field_ for field_ in fields)))
    return records


def write_manifest(path: PathLike, records: Sequence[SampleRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()

    def relative(p: Path) -> str:
        resolved = Path(p).resolve()
        try:
            return resolved.relative_to(base).as_posix()
        except ValueError:
            return resolved.as_posix()

    lines = ["\t".join(relative(p) for p in (r.hr_path, r.lr_path, r.ann_path)) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
