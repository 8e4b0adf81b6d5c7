"""
Checkpoint Module
Reads and writes the SRDT binary parameter archive.

Layout (little-endian):
    "SRDT" | u8 version | u32 tensor count |
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 data |
    u32 CRC32 of every preceding byte
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointSpecMismatchError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

logger = logging.getLogger(__name__)

MAGIC = b"SRDT"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def encode_tensors(named: Mapping[str, np.ndarray]) -> bytes:
    """Serialize an ordered name -> array mapping to SRDT bytes"""
    parts = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(named))]
    for name, array in named.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        if len(encoded) > 0xFFFF or array.ndim > 0xFF:
            raise CheckpointError(f"tensor '{name}' cannot be encoded (name or rank too long)")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} at byte {self.pos} "
                f"(need {count}, have {len(self.blob) - self.pos})"
            )
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    """
    Parse SRDT bytes.

    Raises:
        CheckpointTruncatedError: the data ends early
        CheckpointVersionError: unsupported format version
        CheckpointCorruptError: bad magic, trailing bytes or CRC mismatch
    """
    reader = _Reader(blob)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointCorruptError("not an SRDT checkpoint (bad magic)")
    (version,) = reader.unpack("<B", "version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {FORMAT_VERSION})")
    (count,) = reader.unpack("<I", "tensor count")

    tensors: Dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"name length of tensor {index}")
        try:
            name = reader.take(name_len, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptError(f"tensor {index} name is not UTF-8") from exc
        (rank,) = reader.unpack("<B", f"rank of '{name}'")
        dims = reader.unpack(f"<{rank}I", f"dims of '{name}'")
        numel = int(np.prod(dims, dtype=np.int64))
        data = reader.take(4 * numel, f"data of '{name}'")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)

    body_end = reader.pos
    (stored_crc,) = reader.unpack("<I", "CRC32")
    if reader.pos != len(blob):
        raise CheckpointCorruptError(f"{len(blob) - reader.pos} trailing bytes after CRC")
    if zlib.crc32(blob[:body_end]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointCorruptError("CRC32 mismatch")
    return tensors


def write_checkpoint(path: PathLike, named: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(named))


def read_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def save_network(network, path: PathLike) -> None:
    """Write the network's spec echo followed by all parameters"""
    named = {network.spec_key: network.spec.echo()}
    named.update(network.state())
    write_checkpoint(path, named)
    logger.info(f"✓ Saved checkpoint ({network.parameter_count()} parameters) to: {path}")


def stored_spec_echo(tensors: Mapping[str, np.ndarray], key: str) -> np.ndarray:
    if key not in tensors:
        raise CheckpointSpecMismatchError(f"checkpoint has no '{key}' entry")
    return tensors[key]


def load_network_state(network, path: PathLike) -> None:
    """
    Load parameters from ``path`` into ``network``.

    The stored spec echo must equal the network's own; parameters are only
    assigned once every name and shape has been validated.
    """
    tensors = read_checkpoint(path)
    stored = stored_spec_echo(tensors, network.spec_key)
    expected = network.spec.echo().astype(np.float32)
    if stored.shape != expected.shape or not np.array_equal(stored, expected):
        raise CheckpointSpecMismatchError(
            f"checkpoint spec {stored.tolist()} does not match requested spec {expected.tolist()}"
        )
    params = {name: array for name, array in tensors.items() if name != network.spec_key}
    network.load_state(params)
    logger.info(f"✓ Loaded checkpoint from: {path}")
