"""
Super-Resolution Training Module
Adversarial, perceptual and content losses, the fixed feature extractor used by
the perceptual loss, an Adam optimizer and the seeded GAN training loop.
"""

import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DomainError, NumericError, ShapeError, ValidationError
from layers import ConvLayer, Network
from sr_network import Discriminator, Generator, LEAKY_SLOPE, as_batch
from tensor_core import (
    DEFAULT_DTYPE,
    ComputationTape,
    Tensor,
    active_tape,
    add,
    backward,
    l1norm,
    leaky_relu,
    mean,
    safe_log,
    scale,
    sub,
)

logger = logging.getLogger(__name__)

Scores = Union[Tensor, np.ndarray, float, Sequence[float]]

LOSS_HISTORY_HEADER = ("step", "l_gan", "l_perceptual", "l_total", "d_loss")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total generator objective"""
    lambda_gan: float = 0.005
    lambda_perceptual: float = 1.0
    lambda_content: float = 0.0

    def __post_init__(self):
        for name in ("lambda_gan", "lambda_perceptual", "lambda_content"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossReport:
    """Loss terms emitted by one training step"""
    step: int
    l_gan: float
    l_perceptual: float
    l_total: float
    discriminator_loss: float
    l_content: float = 0.0

    def recomposition_error(self, weights: LossWeights) -> float:
        expected = (weights.lambda_gan * self.l_gan + weights.lambda_perceptual * self.l_perceptual
                    + weights.lambda_content * self.l_content)
        return abs(self.l_total - expected)


class FeatureExtractor(Network):
    """
    Fixed, seeded conv stack whose activations define the perceptual distance.

    Parameters never receive gradients; ``parameter_hash`` lets callers verify
    they are unchanged after training.
    """

    spec_key = "spec.phi"

    def __init__(self, seed: int, channels: Tuple[int, ...] = (8, 16, 16), input_channels: int = 3,
                 tap: Optional[int] = None, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.tap = len(channels) if tap is None else tap
        if not 1 <= self.tap <= len(channels):
            raise ValidationError(f"tap layer {self.tap} outside 1..{len(channels)}")
        self.input_channels = input_channels
        self.convs: List[ConvLayer] = []
        previous = input_channels
        for out_channels in channels:
            self.convs.append(ConvLayer(previous, out_channels, 3, rng=rng, dtype=dtype, trainable=False))
            previous = out_channels

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for index, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"phi.{index}")

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.named_parameters():
            digest.update(name.encode("utf-8"))
            digest.update(tensor.data.tobytes())
        return digest.hexdigest()

    def __call__(self, image) -> Tensor:
        x, _ = as_batch(image, dtype=self.dtype)
        for conv in self.convs[:self.tap]:
            x = leaky_relu(conv(x), LEAKY_SLOPE)
        return x


def _scores(values: Scores) -> Tensor:
    tensor = values if isinstance(values, Tensor) else Tensor(np.atleast_1d(np.asarray(values, dtype=np.float64)))
    if not tensor.is_finite():
        tape = active_tape()
        raise NumericError("discriminator score is not finite", (tape.first_non_finite() if tape else None) or "input")
    bad = np.argwhere((tensor.data < 0.0) | (tensor.data > 1.0))
    if bad.size:
        raise DomainError("discriminator score outside [0, 1]", index=tuple(int(i) for i in bad[0]))
    return tensor


def adversarial_value(d_real: Scores, d_fake: Scores) -> Tensor:
    """E[log D(real)] + E[log(1 - D(fake))] with expectations as batch means"""
    real = _scores(d_real)
    fake = _scores(d_fake)
    return add(mean(safe_log(real)), mean(safe_log(add(scale(fake, -1.0), 1.0))))


def generator_adversarial_loss(d_fake: Scores) -> Tensor:
    """Non-saturating generator loss: mean of -log D(G(lr))"""
    return scale(mean(safe_log(_scores(d_fake))), -1.0)


def discriminator_loss(d_real: Scores, d_fake: Scores) -> Tensor:
    return scale(adversarial_value(d_real, d_fake), -1.0)


def perceptual_loss(phi: FeatureExtractor, i_hr, i_sr) -> Tensor:
    """Mean absolute difference between phi features of the two images"""
    hr, _ = as_batch(i_hr, dtype=phi.dtype)
    sr, _ = as_batch(i_sr, dtype=phi.dtype)
    if hr.shape != sr.shape:
        raise ShapeError(f"perceptual loss needs equal shapes, got {hr.shape} and {sr.shape}")
    diff = sub(phi(hr), phi(sr))
    return scale(l1norm(diff), 1.0 / diff.size)


def content_loss(i_hr, i_sr) -> Tensor:
    """Pixel mean absolute error"""
    hr, _ = as_batch(i_hr)
    sr, _ = as_batch(i_sr, dtype=hr.dtype)
    if hr.shape != sr.shape:
        raise ShapeError(f"content loss needs equal shapes, got {hr.shape} and {sr.shape}")
    diff = sub(hr, sr)
    return scale(l1norm(diff), 1.0 / diff.size)


def total_loss(weights: LossWeights, l_gan, l_perceptual, l_content=None):
    """lambda_gan * l_gan + lambda_perceptual * l_perceptual (+ lambda_content * l_content)"""
    if isinstance(l_gan, Tensor):
        total = add(scale(l_gan, weights.lambda_gan), scale(l_perceptual, weights.lambda_perceptual))
        if l_content is not None:
            total = add(total, scale(l_content, weights.lambda_content))
        return total
    total = weights.lambda_gan * float(l_gan) + weights.lambda_perceptual * float(l_perceptual)
    if l_content is not None:
        total += weights.lambda_content * float(l_content)
    return total


class Adam:
    """Adam with bias correction; parameters whose grad is None are skipped"""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=p.dtype) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=p.dtype) for p in self.params]

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for index, param in enumerate(self.params):
            if param.grad is None:
                continue
            grad = param.grad
            self.m[index] = self.beta1 * self.m[index] + (1.0 - self.beta1) * grad
            self.v[index] = self.beta2 * self.v[index] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[index] / correction1
            v_hat = self.v[index] / correction2
            param.assign(param.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


@dataclass
class SrBatch:
    """Paired LR/HR images, (N,C,h,w) and (N,C,H,W)"""
    lr: np.ndarray
    hr: np.ndarray

    def __post_init__(self):
        self.lr = np.asarray(self.lr)
        self.hr = np.asarray(self.hr)
        if self.lr.ndim == 3:
            self.lr = self.lr[None]
        if self.hr.ndim == 3:
            self.hr = self.hr[None]
        if self.lr.ndim != 4 or self.hr.ndim != 4 or self.lr.shape[:2] != self.hr.shape[:2]:
            raise ShapeError(f"inconsistent batch shapes lr {self.lr.shape}, hr {self.hr.shape}")

    def __len__(self) -> int:
        return self.lr.shape[0]


@dataclass
class TrainState:
    """Optimizer state of both players plus the global step counter"""
    opt_g: Adam
    opt_d: Adam
    step: int = 0


def make_train_state(generator: Generator, discriminator: Discriminator, lr: float = 1e-3) -> TrainState:
    return TrainState(Adam(generator.parameter_list(), lr=lr), Adam(discriminator.parameter_list(), lr=lr))


def _require_finite(loss: Tensor, tape: ComputationTape, what: str) -> None:
    if not loss.is_finite():
        raise NumericError(f"{what} is not finite", tape.first_non_finite())


def train_step(generator: Generator, discriminator: Discriminator, phi: FeatureExtractor,
               batch: SrBatch, weights: LossWeights, state: TrainState) -> LossReport:
    """
    One discriminator update followed by one generator update.

    Raises:
        ContractError: empty batch
        NumericError: a loss became NaN/Inf (names the first non-finite op)
    """
    if len(batch) == 0:
        raise ContractError("train_step needs a non-empty batch")
    lr = Tensor(batch.lr, dtype=generator.dtype)
    hr = Tensor(batch.hr, dtype=generator.dtype)

    sr_fixed = generator(lr)
    state.opt_d.zero_grad()
    with ComputationTape() as tape:
        d_loss = discriminator_loss(discriminator(hr), discriminator(sr_fixed))
    _require_finite(d_loss, tape, "discriminator loss")
    backward(d_loss, tape)
    state.opt_d.step()

    state.opt_g.zero_grad()
    discriminator.zero_grad()
    with ComputationTape() as tape:
        sr = generator(lr)
        l_gan = generator_adversarial_loss(discriminator(sr))
        l_perceptual = perceptual_loss(phi, hr, sr)
        l_content = content_loss(hr, sr) if weights.lambda_content > 0 else None
        l_total = total_loss(weights, l_gan, l_perceptual, l_content)
    for name, term in (("adversarial loss", l_gan), ("perceptual loss", l_perceptual), ("total loss", l_total)):
        _require_finite(term, tape, name)
    backward(l_total, tape)
    state.opt_g.step()
    discriminator.zero_grad()

    content_value = l_content.item() if l_content is not None else 0.0
    report = LossReport(
        step=state.step,
        l_gan=l_gan.item(),
        l_perceptual=l_perceptual.item(),
        l_total=total_loss(weights, l_gan.item(), l_perceptual.item(), content_value),
        discriminator_loss=d_loss.item(),
        l_content=content_value,
    )
    state.step += 1
    return report


def train_sr(generator: Generator, discriminator: Discriminator, phi: FeatureExtractor,
             pairs: Sequence[Tuple[np.ndarray, np.ndarray]], weights: LossWeights,
             epochs: int, batch_size: int, seed: int, learning_rate: float = 1e-3,
             max_steps: int = 0, on_step: Optional[Callable[[LossReport], None]] = None) -> List[LossReport]:
    """
    Train G and D over seeded shuffled mini-batches of (lr, hr) pairs.

    Args:
        pairs: (lr, hr) image arrays, channel-first
        epochs: Passes over the data
        batch_size: Images per step
        seed: Shuffle seed
        max_steps: Stop after this many steps (0 = no cap)
        on_step: Optional callback per emitted report

    Returns:
        LossReport history in step order
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be positive, got {batch_size}")
    rng = np.random.default_rng(seed)
    state = make_train_state(generator, discriminator, learning_rate)
    history: List[LossReport] = []
    if not pairs:
        return history
    lr_stack = np.stack([np.asarray(lr) for lr, _ in pairs])
    hr_stack = np.stack([np.asarray(hr) for _, hr in pairs])

    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), batch_size):
            if max_steps and state.step >= max_steps:
                return history
            index = order[start:start + batch_size]
            report = train_step(generator, discriminator, phi, SrBatch(lr_stack[index], hr_stack[index]),
                                weights, state)
            history.append(report)
            if on_step is not None:
                on_step(report)
        last = history[-1]
        logger.info(f"✓ Epoch {epoch + 1}/{epochs}: l_total={last.l_total:.5f} "
                    f"l_perceptual={last.l_perceptual:.5f} d_loss={last.discriminator_loss:.5f}")
    return history


def _format_float(value: float) -> str:
    return format(value, ".10g")


def write_loss_history(reports: Sequence[LossReport], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOSS_HISTORY_HEADER)
        for report in reports:
            writer.writerow([report.step, _format_float(report.l_gan), _format_float(report.l_perceptual),
                             _format_float(report.l_total), _format_float(report.discriminator_loss)])


def read_loss_history(path: Union[str, Path]) -> List[LossReport]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != LOSS_HISTORY_HEADER:
            raise ValidationError(f"unexpected loss history header {reader.fieldnames}")
        return [
            LossReport(step=int(row["step"]), l_gan=float(row["l_gan"]), l_perceptual=float(row["l_perceptual"]),
                       l_total=float(row["l_total"]), discriminator_loss=float(row["d_loss"]))
            for row in reader
        ]
