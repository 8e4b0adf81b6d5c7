"""
Test Suite for the Super-Resolution Networks
Shape law, residual identity, parameter layout and checkpoint behaviour
"""

import numpy as np
import pytest

from checkpoint import decode_tensors, encode_tensors, read_checkpoint
from errors import CheckpointShapeError, CheckpointSpecMismatchError, DomainError, ShapeError, ValidationError
from sr_network import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
    load_checkpoint,
    load_generator,
    rrdb_forward,
    save_checkpoint,
)
from tensor_core import Tensor

SMALL = GeneratorSpec(num_rrdb=1, base_channels=8, growth_channels=4, residual_beta=0.2, scale_factor=2,
                      input_channels=3)


def test_parameter_count_of_small_generator():
    """Hand count: first 224 + RRDB 3 x 3768 + trunk 584 + upsample 2336 + final 219"""
    assert build_generator(SMALL, seed=0).parameter_count() == 14667


def test_parameter_paths_are_stable():
    names = list(build_generator(SMALL, seed=0).parameters())
    assert names[0] == "first_conv.weight"
    assert "trunk.0.rdb.1.conv.2.weight" in names
    assert names[-1] == "final_conv.bias"
    assert "upsample.0.weight" in names


@pytest.mark.parametrize("height, width", [(3, 5), (6, 6), (7, 4)])
def test_generator_scale_law(height, width):
    spec = GeneratorSpec(num_rrdb=1, base_channels=8, growth_channels=4, scale_factor=4)
    generator = build_generator(spec, seed=1)
    lr = np.random.default_rng(height * width).uniform(size=(3, height, width))
    sr = generator_forward(generator, lr)
    assert sr.shape == (3, 4 * height, 4 * width)
    assert sr.data.min() >= 0.0 and sr.data.max() <= 1.0, "output is clamped to [0, 1]"


def test_generator_batch_axis():
    generator = build_generator(SMALL, seed=2)
    lr = np.random.default_rng(0).uniform(size=(2, 3, 4, 4)).astype(np.float32)
    batched = generator_forward(generator, lr).data
    assert batched.shape == (2, 3, 8, 8)
    assert np.allclose(batched[1], generator_forward(generator, lr[1]).data, atol=1e-5)


def test_generator_rejects_out_of_range_input():
    generator = build_generator(SMALL, seed=0)
    lr = np.full((3, 4, 4), 0.5)
    lr[1, 2, 3] = 1.5
    with pytest.raises(DomainError) as info:
        generator_forward(generator, lr)
    assert info.value.index == (0, 1, 2, 3)


def test_generator_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        generator_forward(build_generator(SMALL, seed=0), np.zeros((1, 4, 4)))


def test_zeroed_dense_paths_make_rrdb_identity():
    """Every block and the whole RRDB chain reproduce their input exactly"""
    spec = GeneratorSpec(num_rrdb=3, base_channels=8, growth_channels=4, scale_factor=2)
    generator = build_generator(spec, seed=3)
    generator.zero_dense_paths()
    features = Tensor(np.random.default_rng(4).normal(size=(1, 8, 5, 6)))
    out = features
    for block in generator.trunk:
        step = rrdb_forward(block, out)
        assert np.max(np.abs(step.data - out.data)) == 0.0
        out = step
    assert np.array_equal(out.data, features.data)


def test_same_seed_same_parameters():
    a = build_generator(SMALL, seed=9).state()
    b = build_generator(SMALL, seed=9).state()
    c = build_generator(SMALL, seed=10).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_spec_validation():
    with pytest.raises(ValidationError):
        GeneratorSpec(scale_factor=3)
    with pytest.raises(ValidationError):
        GeneratorSpec(residual_beta=0.0)
    with pytest.raises(ValidationError):
        DiscriminatorSpec(conv_stages=())


def test_spec_echo_round_trip():
    assert GeneratorSpec.from_echo(SMALL.echo()) == SMALL
    spec = DiscriminatorSpec(((8, 1), (8, 2)))
    assert DiscriminatorSpec.from_echo(spec.echo()) == spec


def test_discriminator_scores():
    spec = DiscriminatorSpec(((8, 1), (8, 2), (16, 2)))
    discriminator = build_discriminator(spec, seed=0)
    images = np.random.default_rng(1).uniform(size=(3, 3, 8, 8))
    scores = discriminator_forward(discriminator, images)
    assert scores.shape == (3,)
    assert np.all((scores.data > 0.0) & (scores.data < 1.0))
    single = discriminator_forward(discriminator, images[0])
    assert single.shape == ()


def test_discriminator_rejects_images_smaller_than_stride_product():
    discriminator = build_discriminator(DiscriminatorSpec(((8, 2), (8, 2), (8, 2))), seed=0)
    with pytest.raises(ShapeError):
        discriminator_forward(discriminator, np.zeros((3, 4, 16)))


def test_checkpoint_forward_is_bitwise_identical(tmp_path):
    generator = build_generator(SMALL, seed=11)
    lr = np.random.default_rng(2).uniform(size=(3, 5, 5))
    before = generator_forward(generator, lr).data
    path = tmp_path / "g.srdt"
    save_checkpoint(generator, path)
    loaded = load_checkpoint(SMALL, path)
    assert np.array_equal(generator_forward(loaded, lr).data, before)
    assert np.array_equal(generator_forward(load_generator(path), lr).data, before)
    assert "spec.generator" in read_checkpoint(path)


def test_checkpoint_spec_mismatch(tmp_path):
    path = tmp_path / "g.srdt"
    save_checkpoint(build_generator(SMALL, seed=0), path)
    other = GeneratorSpec(num_rrdb=2, base_channels=8, growth_channels=4, scale_factor=2)
    with pytest.raises(CheckpointSpecMismatchError):
        load_checkpoint(other, path)


def test_rejected_state_leaves_network_untouched(tmp_path):
    generator = build_generator(SMALL, seed=0)
    path = tmp_path / "g.srdt"
    save_checkpoint(generator, path)
    tensors = decode_tensors(path.read_bytes())
    tensors["final_conv.bias"] = np.zeros(5, dtype=np.float32)
    path.write_bytes(encode_tensors(tensors))

    target = build_generator(SMALL, seed=1)
    before = target.state()
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(SMALL, path)
    with pytest.raises(CheckpointShapeError):
        target.load_state({k: v for k, v in tensors.items() if k != "spec.generator"})
    assert all(np.array_equal(before[k], v) for k, v in target.state().items())


def test_discriminator_checkpoint(tmp_path):
    spec = DiscriminatorSpec(((8, 1), (8, 2)))
    discriminator = build_discriminator(spec, seed=4)
    path = tmp_path / "d.srdt"
    save_checkpoint(discriminator, path)
    image = np.random.default_rng(0).uniform(size=(3, 6, 6))
    loaded = load_checkpoint(spec, path)
    assert np.array_equal(discriminator_forward(loaded, image).data, discriminator_forward(discriminator, image).data)
