"""
Super-Resolution Network Module
RRDB generator with a global skip connection and pixel-shuffle upsampling, and
a small strided-conv discriminator scoring images in (0, 1).
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np

from checkpoint import load_network_state, read_checkpoint, save_network, stored_spec_echo
from errors import CheckpointSpecMismatchError, DomainError, ShapeError, ValidationError
from layers import ConvLayer, LinearLayer, Network
from tensor_core import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    global_mean_pool,
    leaky_relu,
    pixel_shuffle,
    reshape,
    scale,
    sigmoid,
    sub,
)

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
DENSE_LAYERS = 5
SUB_BLOCKS = 3

ImageLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class GeneratorSpec:
    """Generator hyperparameters; all are config-exposed"""
    num_rrdb: int = 3
    base_channels: int = 16
    growth_channels: int = 8
    residual_beta: float = 0.2
    scale_factor: int = 4
    input_channels: int = 3

    def __post_init__(self):
        if self.num_rrdb < 0:
            raise ValidationError(f"num_rrdb must be >= 0, got {self.num_rrdb}")
        for name in ("base_channels", "growth_channels", "input_channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.residual_beta <= 1.0:
            raise ValidationError(f"residual_beta must lie in (0, 1], got {self.residual_beta}")
        if self.scale_factor < 1 or self.scale_factor & (self.scale_factor - 1):
            raise ValidationError(f"scale_factor must be a power of 2, got {self.scale_factor}")

    @property
    def upsample_stages(self) -> int:
        return int(math.log2(self.scale_factor))

    def echo(self) -> np.ndarray:
        return np.array([self.num_rrdb, self.base_channels, self.growth_channels,
                         self.residual_beta, self.scale_factor, self.input_channels], dtype=np.float32)

    @classmethod
    def from_echo(cls, echo: np.ndarray) -> "GeneratorSpec":
        if echo.shape != (6,):
            raise CheckpointSpecMismatchError(f"generator spec echo has shape {echo.shape}, expected (6,)")
        num_rrdb, base, growth, beta, factor, channels = echo.tolist()
        return cls(int(num_rrdb), int(base), int(growth), round(float(beta), 6), int(factor), int(channels))


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Strided conv stages (out_channels, stride) -> global mean -> linear -> sigmoid"""
    conv_stages: Tuple[Tuple[int, int], ...] = ((16, 1), (16, 2), (32, 2), (32, 2))
    input_channels: int = 3

    def __post_init__(self):
        if not self.conv_stages:
            raise ValidationError("discriminator needs at least one conv stage")
        for channels, stride in self.conv_stages:
            if channels < 1 or stride < 1:
                raise ValidationError(f"invalid conv stage ({channels}, {stride})")
        if self.input_channels < 1:
            raise ValidationError(f"input_channels must be positive, got {self.input_channels}")

    @property
    def min_input_size(self) -> int:
        return int(np.prod([stride for _, stride in self.conv_stages]))

    def echo(self) -> np.ndarray:
        flat = [value for stage in self.conv_stages for value in stage]
        return np.array([self.input_channels, len(self.conv_stages), *flat], dtype=np.float32)

    @classmethod
    def from_echo(cls, echo: np.ndarray) -> "DiscriminatorSpec":
        values = [int(v) for v in echo.tolist()]
        if len(values) < 2 or len(values) != 2 + 2 * values[1]:
            raise CheckpointSpecMismatchError(f"malformed discriminator spec echo {values}")
        stages = tuple((values[2 + 2 * i], values[3 + 2 * i]) for i in range(values[1]))
        return cls(conv_stages=stages, input_channels=values[0])


def as_batch(image: ImageLike, dtype=None) -> Tuple[Tensor, bool]:
    """Promote (C,H,W) to (1,C,H,W); returns the tensor and whether it was promoted"""
    tensor = as_tensor(image, dtype=dtype)
    if tensor.ndim == 3:
        return reshape(tensor, (1, *tensor.shape)), True
    if tensor.ndim != 4:
        raise ShapeError(f"expected a (C,H,W) or (N,C,H,W) image, got shape {tensor.shape}")
    return tensor, False


def unbatch(tensor: Tensor, promoted: bool) -> Tensor:
    return reshape(tensor, tensor.shape[1:]) if promoted else tensor


class DenseSubBlock:
    """Five convs; each takes the concatenation of the block input and all earlier outputs"""

    def __init__(self, base_channels: int, growth_channels: int, rng: np.random.Generator, dtype):
        self.convs = [
            ConvLayer(base_channels + i * growth_channels, growth_channels, 3, rng=rng, dtype=dtype)
            for i in range(DENSE_LAYERS - 1)
        ]
        self.convs.append(ConvLayer(base_channels + (DENSE_LAYERS - 1) * growth_channels,
                                    base_channels, 3, rng=rng, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        features = [x]
        for conv in self.convs[:-1]:
            features.append(leaky_relu(conv(concat(features, axis=1)), LEAKY_SLOPE))
        return self.convs[-1](concat(features, axis=1))

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for index, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"{prefix}.conv.{index}")


class RRDB:
    """
    Residual-in-residual dense block.

    s <- x; for each sub-block s <- s + beta * dense(s); output x + beta * (s - x).
    """

    def __init__(self, base_channels: int, growth_channels: int, beta: float,
                 rng: np.random.Generator, dtype):
        self.base_channels = base_channels
        self.beta = beta
        self.blocks = [DenseSubBlock(base_channels, growth_channels, rng, dtype) for _ in range(SUB_BLOCKS)]

    def __call__(self, x: Tensor) -> Tensor:
        s = x
        for block in self.blocks:
            s = add(s, scale(block(s), self.beta))
        return add(x, scale(sub(s, x), self.beta))

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for index, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.rdb.{index}")

    def zero_dense_paths(self) -> None:
        for _, tensor in self.named_parameters("rrdb"):
            tensor.assign(np.zeros(tensor.shape))


def rrdb_forward(block: RRDB, x: ImageLike) -> Tensor:
    """Apply one RRDB to (C,H,W) or (N,C,H,W) features"""
    batch, promoted = as_batch(x, dtype=block.blocks[0].convs[0].weight.dtype)
    if batch.shape[1] != block.base_channels:
        raise ShapeError(f"RRDB expects {block.base_channels} channels, got {batch.shape[1]}")
    return unbatch(block(batch), promoted)


class Generator(Network):
    """
    Super-resolution generator.

    first conv -> RRDB trunk -> trunk conv -> + skip -> log2(scale) x
    (conv -> pixel_shuffle(2) -> leaky_relu) -> final conv -> clamp [0, 1]
    """

    spec_key = "spec.generator"

    def __init__(self, spec: GeneratorSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.spec = spec
        base = spec.base_channels
        self.first_conv = ConvLayer(spec.input_channels, base, 3, rng=rng, dtype=dtype)
        self.trunk = [RRDB(base, spec.growth_channels, spec.residual_beta, rng, dtype)
                      for _ in range(spec.num_rrdb)]
        self.trunk_conv = ConvLayer(base, base, 3, rng=rng, dtype=dtype)
        self.upsample = [ConvLayer(base, base * 4, 3, rng=rng, dtype=dtype)
                         for _ in range(spec.upsample_stages)]
        self.final_conv = ConvLayer(base, spec.input_channels, 3, rng=rng, dtype=dtype)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.first_conv.named_parameters("first_conv")
        for index, block in enumerate(self.trunk):
            yield from block.named_parameters(f"trunk.{index}")
        yield from self.trunk_conv.named_parameters("trunk_conv")
        for index, conv in enumerate(self.upsample):
            yield from conv.named_parameters(f"upsample.{index}")
        yield from self.final_conv.named_parameters("final_conv")

    def zero_dense_paths(self) -> None:
        for block in self.trunk:
            block.zero_dense_paths()

    def trunk_forward(self, features: Tensor) -> Tensor:
        """RRDB trunk followed by the trunk conv, without the skip"""
        out = features
        for block in self.trunk:
            out = block(out)
        return self.trunk_conv(out)

    def forward(self, lr_image: ImageLike) -> Tensor:
        batch, promoted = as_batch(lr_image, dtype=self.dtype)
        if batch.shape[1] != self.spec.input_channels:
            raise ShapeError(f"generator expects {self.spec.input_channels} channels, got {batch.shape[1]}")
        bad = np.argwhere((batch.data < 0.0) | (batch.data > 1.0))
        if bad.size:
            raise DomainError("generator input must lie in [0, 1]", index=tuple(int(i) for i in bad[0]))

        features = self.first_conv(batch)
        features = add(features, self.trunk_forward(features))
        for conv in self.upsample:
            features = leaky_relu(pixel_shuffle(conv(features), 2), LEAKY_SLOPE)
        out = clamp(self.final_conv(features), 0.0, 1.0)
        return unbatch(out, promoted)

    __call__ = forward


def build_generator(spec: GeneratorSpec, seed: int, dtype=DEFAULT_DTYPE) -> Generator:
    """Build a generator with parameters drawn from a seeded uniform(-a, a), a = sqrt(1/fan_in)"""
    generator = Generator(spec, np.random.default_rng(seed), dtype)
    logger.debug(f"Built generator {spec} with {generator.parameter_count()} parameters")
    return generator


def generator_forward(generator: Generator, lr_image: ImageLike) -> Tensor:
    return generator.forward(lr_image)


class Discriminator(Network):
    """Conv stages with leaky ReLU -> global mean pool -> linear -> sigmoid"""

    spec_key = "spec.discriminator"

    def __init__(self, spec: DiscriminatorSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.spec = spec
        self.stages: List[ConvLayer] = []
        channels = spec.input_channels
        for out_channels, stride in spec.conv_stages:
            self.stages.append(ConvLayer(channels, out_channels, 3, stride=stride, padding=1, rng=rng, dtype=dtype))
            channels = out_channels
        self.head = LinearLayer(channels, 1, rng=rng, dtype=dtype)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for index, conv in enumerate(self.stages):
            yield from conv.named_parameters(f"stages.{index}")
        yield from self.head.named_parameters("head")

    def forward(self, image: ImageLike) -> Tensor:
        batch, promoted = as_batch(image, dtype=self.dtype)
        if batch.shape[1] != self.spec.input_channels:
            raise ShapeError(f"discriminator expects {self.spec.input_channels} channels, got {batch.shape[1]}")
        height, width = batch.shape[2:]
        if min(height, width) < self.spec.min_input_size:
            raise ShapeError(
                f"image {height}x{width} too small for stride stack (needs >= {self.spec.min_input_size})"
            )
        x = batch
        for conv in self.stages:
            x = leaky_relu(conv(x), LEAKY_SLOPE)
        logits = self.head(global_mean_pool(x))
        scores = sigmoid(reshape(logits, (batch.shape[0],)))
        return reshape(scores, ()) if promoted else scores

    __call__ = forward


def build_discriminator(spec: DiscriminatorSpec, seed: int, dtype=DEFAULT_DTYPE) -> Discriminator:
    return Discriminator(spec, np.random.default_rng(seed), dtype)


def discriminator_forward(discriminator: Discriminator, image: ImageLike) -> Tensor:
    return discriminator.forward(image)


def save_checkpoint(network: Network, path: Union[str, Path]) -> None:
    save_network(network, path)


def load_checkpoint(spec: Union[GeneratorSpec, DiscriminatorSpec], path: Union[str, Path],
                    dtype=DEFAULT_DTYPE) -> Network:
    """Build a fresh network for ``spec`` and load parameters from an SRDT file"""
    if isinstance(spec, GeneratorSpec):
        network: Network = Generator(spec, np.random.default_rng(0), dtype)
    else:
        network = Discriminator(spec, np.random.default_rng(0), dtype)
    load_network_state(network, path)
    return network


def load_generator(path: Union[str, Path], dtype=DEFAULT_DTYPE) -> Generator:
    """Load a generator using the GeneratorSpec echoed inside the checkpoint"""
    spec = GeneratorSpec.from_echo(stored_spec_echo(read_checkpoint(path), Generator.spec_key))
    return load_checkpoint(spec, path, dtype)
