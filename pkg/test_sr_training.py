"""
Test Suite for Super-Resolution Training
Loss values, the Adam update, gradient checks through the full generator
objective and the seeded training loop
"""

import math

import numpy as np
import pytest

from errors import ContractError, DomainError, NumericError, ShapeError, ValidationError
from sr_network import LEAKY_SLOPE, DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator
from sr_training import (
    LOSS_HISTORY_HEADER,
    Adam,
    FeatureExtractor,
    LossReport,
    LossWeights,
    SrBatch,
    adversarial_value,
    content_loss,
    discriminator_loss,
    generator_adversarial_loss,
    make_train_state,
    perceptual_loss,
    read_loss_history,
    total_loss,
    train_sr,
    train_step,
    write_loss_history,
)
from synthetic_data import downsample_box, render_sample
from tensor_core import ComputationTape, Tensor, backward, gradcheck, mean, square, sub

TINY_G = GeneratorSpec(num_rrdb=1, base_channels=4, growth_channels=2, scale_factor=2)
TINY_D = DiscriminatorSpec(((4, 1), (4, 2)))


def tiny_setup(seed=0):
    generator = build_generator(TINY_G, seed=seed)
    discriminator = build_discriminator(TINY_D, seed=seed + 1)
    phi = FeatureExtractor(seed=7, channels=(4, 4))
    return generator, discriminator, phi


def random_pairs(count, hr_size=8, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        hr = rng.uniform(size=(3, hr_size, hr_size)).astype(np.float32)
        pairs.append((downsample_box(hr, 2), hr))
    return pairs


def phi_reference(phi, image):
    """Straight-line numpy evaluation of the feature extractor"""
    x = np.asarray(image, dtype=np.float64)
    for conv in phi.convs[:phi.tap]:
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
        y = np.einsum("chwij,ocij->ohw", windows, conv.weight.data.astype(np.float64))
        y = y + conv.bias.data.astype(np.float64)[:, None, None]
        x = np.where(y > 0, y, LEAKY_SLOPE * y)
    return x


# ---------------------------------------------------------------------------
# Adversarial losses
# ---------------------------------------------------------------------------

def test_adversarial_value_at_chance():
    assert adversarial_value(0.5, 0.5).item() == pytest.approx(2.0 * math.log(0.5), abs=1e-9)
    assert discriminator_loss(0.5, 0.5).item() == pytest.approx(1.3863, abs=1e-4)


def test_adversarial_value_of_perfect_discriminator_is_near_zero():
    assert abs(adversarial_value([1.0 - 1e-9], [1e-9]).item()) < 1e-6


def test_generator_loss_at_chance_is_log_two():
    assert generator_adversarial_loss(0.5).item() == pytest.approx(math.log(2.0), abs=1e-9)
    assert generator_adversarial_loss(0.9).item() < generator_adversarial_loss(0.1).item()


def test_zero_scores_stay_finite():
    """log(0) is clamped on the loss path"""
    value = discriminator_loss([0.0], [1.0]).item()
    assert math.isfinite(value) and value > 0


def test_scores_outside_unit_interval_rejected():
    with pytest.raises(DomainError) as info:
        generator_adversarial_loss([0.2, 1.5])
    assert info.value.index == (1,)
    with pytest.raises(DomainError):
        adversarial_value([0.5], [-0.1])


def test_non_finite_scores_are_numeric_errors():
    with pytest.raises(NumericError) as info:
        generator_adversarial_loss([0.2, float("nan")])
    assert info.value.op_name == "input"
    logits = Tensor(np.array([0.0, np.inf]), requires_grad=True)
    with np.errstate(invalid="ignore"):
        with ComputationTape():
            scores = square(logits)
            with pytest.raises(NumericError) as info:
                discriminator_loss(scores, [0.5, 0.5])
    assert info.value.op_name == "square#0"


# ---------------------------------------------------------------------------
# Perceptual, content and total losses
# ---------------------------------------------------------------------------

def test_perceptual_loss_is_a_pseudometric():
    phi = FeatureExtractor(seed=3)
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(3, 8, 8))
    b = rng.uniform(size=(3, 8, 8))
    assert perceptual_loss(phi, a, a).item() == 0.0
    ab = perceptual_loss(phi, a, b).item()
    assert ab > 0
    assert ab == pytest.approx(perceptual_loss(phi, b, a).item(), rel=1e-6)


def test_perceptual_loss_matches_reference_composition():
    phi = FeatureExtractor(seed=5, channels=(4, 6, 6), tap=2, dtype=np.float64)
    rng = np.random.default_rng(1)
    hr = rng.uniform(size=(3, 6, 7))
    sr = rng.uniform(size=(3, 6, 7))
    expected = np.mean(np.abs(phi_reference(phi, hr) - phi_reference(phi, sr)))
    assert perceptual_loss(phi, hr, sr).item() == pytest.approx(expected, rel=1e-9)


def test_perceptual_loss_shape_mismatch():
    phi = FeatureExtractor(seed=0)
    with pytest.raises(ShapeError):
        perceptual_loss(phi, np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_feature_extractor_tap_range():
    with pytest.raises(ValidationError):
        FeatureExtractor(seed=0, channels=(4, 4), tap=3)


def test_content_loss_is_pixel_mae():
    a = np.zeros((3, 2, 2))
    b = np.full((3, 2, 2), 0.25)
    assert content_loss(a, b).item() == pytest.approx(0.25)


def test_total_loss_is_linear():
    unit = LossWeights(lambda_gan=1.0, lambda_perceptual=1.0)
    assert total_loss(unit, 2.0, 3.0) == pytest.approx(5.0)
    assert total_loss(LossWeights(lambda_gan=0.0), 7.0, 3.0) == pytest.approx(3.0)
    weights = LossWeights(lambda_gan=0.005, lambda_perceptual=1.0, lambda_content=0.5)
    assert total_loss(weights, 4.0, 2.0, 1.0) == pytest.approx(0.02 + 2.0 + 0.5)
    assert total_loss(weights, 8.0, 4.0, 2.0) == pytest.approx(2.0 * total_loss(weights, 4.0, 2.0, 1.0))
    as_tensor = total_loss(weights, Tensor(np.array(4.0)), Tensor(np.array(2.0)), Tensor(np.array(1.0)))
    assert as_tensor.item() == pytest.approx(2.52)


def test_loss_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(lambda_gan=-0.1)
    with pytest.raises(ValidationError):
        LossWeights(lambda_perceptual=float("nan"))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_first_adam_step_matches_hand_derivation():
    """loss = p^2 at p = 1: g = 2, m_hat = 2, v_hat = 4, step = lr * 2 / (2 + eps)"""
    p = Tensor(np.array(1.0), requires_grad=True, dtype=np.float64)
    optimizer = Adam([p], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
    with ComputationTape() as tape:
        loss = square(p)
    backward(loss, tape)
    optimizer.step()
    assert p.item() == pytest.approx(1.0 - 1e-3 * 2.0 / (2.0 + 1e-8), abs=1e-15)


def test_adam_skips_parameters_without_gradient():
    p = Tensor(np.array([0.5, -0.5]), requires_grad=True, dtype=np.float64)
    optimizer = Adam([p])
    optimizer.zero_grad()
    optimizer.step()
    assert np.array_equal(p.data, [0.5, -0.5])


# ---------------------------------------------------------------------------
# Gradients through the generator objective
# ---------------------------------------------------------------------------

def test_generator_objective_gradcheck():
    """Composite G -> D -> losses graph agrees with central differences"""
    spec = GeneratorSpec(num_rrdb=1, base_channels=2, growth_channels=1, scale_factor=2)
    generator = build_generator(spec, seed=21, dtype=np.float64)
    discriminator = build_discriminator(DiscriminatorSpec(((2, 1), (2, 2))), seed=22, dtype=np.float64)
    phi = FeatureExtractor(seed=23, channels=(3, 3), dtype=np.float64)
    rng = np.random.default_rng(4)
    lr = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 3, 3)), dtype=np.float64)
    hr = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 6, 6)), dtype=np.float64)
    weights = LossWeights(lambda_gan=0.5, lambda_perceptual=1.0, lambda_content=0.25)

    def objective(_weight, _bias):
        sr = generator(lr)
        return total_loss(weights, generator_adversarial_loss(discriminator(sr)),
                          perceptual_loss(phi, hr, sr), content_loss(hr, sr))

    error = gradcheck(objective, [generator.final_conv.weight, generator.final_conv.bias], h=1e-6)
    assert error <= 1e-3, f"relative error {error:.3e}"


@pytest.mark.parametrize("layer", [
    lambda g: g.first_conv,
    lambda g: g.trunk[0].blocks[1].convs[2],
    lambda g: g.trunk[0].blocks[2].convs[-1],
    lambda g: g.upsample[0],
], ids=["first_conv", "dense_conv", "dense_out_conv", "upsample_conv"])
def test_generator_gradcheck_reaches_early_layers(layer):
    """Gradients survive the trunk, the dense concatenations and the residual scaling"""
    spec = GeneratorSpec(num_rrdb=1, base_channels=2, growth_channels=1, scale_factor=2)
    generator = build_generator(spec, seed=31, dtype=np.float64)
    rng = np.random.default_rng(5)
    lr = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 3, 3)), dtype=np.float64)
    hr = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 6, 6)), dtype=np.float64)
    conv = layer(generator)

    def objective(_weight, _bias):
        return mean(square(sub(generator(lr), hr)))

    error = gradcheck(objective, [conv.weight, conv.bias], h=1e-6)
    assert error <= 1e-3, f"relative error {error:.3e}"


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def run_steps(seed, steps=3):
    generator, discriminator, phi = tiny_setup(seed)
    weights = LossWeights()
    state = make_train_state(generator, discriminator)
    pairs = random_pairs(2, seed=seed)
    batch = SrBatch(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
    return [train_step(generator, discriminator, phi, batch, weights, state) for _ in range(steps)]


def test_train_step_is_deterministic():
    first = run_steps(seed=3)
    second = run_steps(seed=3)
    assert first == second, "same seed must give identical LossReport sequences"
    assert [r.step for r in first] == [0, 1, 2]


def test_reports_recompose_total():
    weights = LossWeights()
    for report in run_steps(seed=4):
        assert report.recomposition_error(weights) <= 1e-9


def test_train_step_updates_generator_but_not_phi():
    generator, discriminator, phi = tiny_setup(5)
    before_g = generator.state()
    before_phi = phi.parameter_hash()
    pairs = random_pairs(2, seed=5)
    batch = SrBatch(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
    train_step(generator, discriminator, phi, batch, LossWeights(), make_train_state(generator, discriminator))
    assert phi.parameter_hash() == before_phi, "feature extractor must stay fixed"
    assert any(not np.array_equal(before_g[k], v) for k, v in generator.state().items())


def test_empty_batch_is_a_contract_error():
    generator, discriminator, phi = tiny_setup()
    batch = SrBatch(np.zeros((0, 3, 4, 4)), np.zeros((0, 3, 8, 8)))
    with pytest.raises(ContractError):
        train_step(generator, discriminator, phi, batch, LossWeights(), make_train_state(generator, discriminator))


def test_inconsistent_batch_shapes():
    with pytest.raises(ShapeError):
        SrBatch(np.zeros((2, 3, 4, 4)), np.zeros((3, 3, 8, 8)))


def test_non_finite_loss_aborts_with_op_name():
    generator, discriminator, phi = tiny_setup()
    weight = generator.final_conv.weight
    weight.assign(np.full(weight.shape, np.nan))
    pairs = random_pairs(1)
    batch = SrBatch(pairs[0][0], pairs[0][1])
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericError) as info:
            train_step(generator, discriminator, phi, batch, LossWeights(), make_train_state(generator, discriminator))
    assert info.value.op_name is not None
    assert info.value.op_name in str(info.value)


def test_train_sr_respects_max_steps_and_callback():
    generator, discriminator, phi = tiny_setup()
    seen = []
    history = train_sr(generator, discriminator, phi, random_pairs(6), LossWeights(), epochs=5, batch_size=2,
                       seed=0, max_steps=4, on_step=seen.append)
    assert len(history) == 4
    assert seen == history
    assert train_sr(generator, discriminator, phi, [], LossWeights(), epochs=1, batch_size=2, seed=0) == []
    with pytest.raises(ValidationError):
        train_sr(generator, discriminator, phi, random_pairs(1), LossWeights(), epochs=1, batch_size=0, seed=0)


def test_perceptual_loss_falls_during_training():
    """200 seeded steps on synthetic shapes reduce the perceptual loss"""
    generator = build_generator(GeneratorSpec(num_rrdb=1, base_channels=8, growth_channels=4, scale_factor=2),
                                seed=0)
    discriminator = build_discriminator(DiscriminatorSpec(((8, 1), (8, 2), (16, 2))), seed=1)
    phi = FeatureExtractor(seed=2)
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(8):
        hr, _ = render_sample(rng, 16)
        hr = hr.astype(np.float32)
        pairs.append((downsample_box(hr, 2), hr))
    history = train_sr(generator, discriminator, phi, pairs, LossWeights(), epochs=101, batch_size=4,
                       seed=0, max_steps=201)
    assert len(history) == 201
    assert history[200].l_perceptual < history[0].l_perceptual, (
        f"perceptual loss {history[0].l_perceptual:.5f} -> {history[200].l_perceptual:.5f}"
    )
    print(f"   ✓ perceptual loss {history[0].l_perceptual:.5f} -> {history[200].l_perceptual:.5f}")


# ---------------------------------------------------------------------------
# Loss history files
# ---------------------------------------------------------------------------

def test_loss_history_csv(tmp_path):
    reports = [LossReport(0, 0.69, 0.12, 0.12345, 1.38), LossReport(1, 0.7, 0.1, 0.1035, 1.3)]
    path = tmp_path / "history.csv"
    write_loss_history(reports, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(LOSS_HISTORY_HEADER)
    assert lines[1] == "0,0.69,0.12,0.12345,1.38"
    assert read_loss_history(path) == reports


def test_loss_history_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("step,loss\n0,1\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        read_loss_history(path)
