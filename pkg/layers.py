"""
Layers Module
Parameterized building blocks (convolution, fully-connected) and the Network
base class shared by the generator, discriminator, feature extractor and
detector.
"""

import math
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from errors import CheckpointShapeError
from tensor_core import DEFAULT_DTYPE, Tensor, conv2d, linear


def uniform_parameter(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
                      dtype=DEFAULT_DTYPE, trainable: bool = True) -> Tensor:
    """Seeded uniform(-a, a) initialization with a = sqrt(1 / fan_in)"""
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=trainable, dtype=dtype)


class ConvLayer:
    """Square-kernel convolution with bias"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE,
                 trainable: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = uniform_parameter(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                        fan_in, dtype, trainable)
        self.bias = uniform_parameter(rng, (out_channels,), fan_in, dtype, trainable)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class LinearLayer:
    """Fully-connected layer over (N, in_features)"""

    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = uniform_parameter(rng, (out_features, in_features), in_features, dtype)
        self.bias = uniform_parameter(rng, (out_features,), in_features, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class Network:
    """
    Base class for every parameterized network.

    Subclasses set ``spec`` (a frozen dataclass with an ``echo()`` method) and
    implement ``named_parameters`` with stable layer paths.
    """

    spec = None
    spec_key = "spec.network"

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_list(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(tensor.size for _, tensor in self.named_parameters())

    @property
    def dtype(self):
        return next(iter(self.named_parameters()))[1].dtype

    def zero_grad(self) -> None:
        for tensor in self.parameter_list():
            tensor.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        return {name: tensor.numpy() for name, tensor in self.named_parameters()}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        """
        Assign every parameter from ``arrays``.

        All names and shapes are validated before anything is assigned, so a
        rejected state leaves the network untouched.
        """
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise CheckpointShapeError(
                f"parameter set differs: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, tensor in params.items():
            if tuple(arrays[name].shape) != tensor.shape:
                raise CheckpointShapeError(
                    f"parameter '{name}' has shape {tuple(arrays[name].shape)}, expected {tensor.shape}"
                )
        for name, tensor in params.items():
            tensor.assign(arrays[name])
