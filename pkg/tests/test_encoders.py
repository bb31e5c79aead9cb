import pytest
import torch

from geostack.alignment import PatchGrid
from geostack.encoders import (
    GeometryEncoder,
    GeometryEncoderConfig,
    TokenMerger,
    VisionEncoder,
    VisionEncoderConfig,
    geometry_encode,
    spatial_merge,
    tap_index,
    vision_encode,
)
from geostack.exceptions import AlignmentError, ConfigError


@pytest.fixture
def vision():
    torch.manual_seed(0)
    return VisionEncoder(VisionEncoderConfig(depth=2, dim=8, heads=2, lang_dim=64)).double()


@pytest.fixture
def geometry():
    torch.manual_seed(0)
    return GeometryEncoder(GeometryEncoderConfig(depth=8, dim=16, heads=2, registers=2)).double()


def test_vision_encode_shapes(vision):
    frames = torch.rand(3, 16, 16)
    tokens = vision_encode(frames, vision)
    assert tokens.shape == (3, 16, 8)
    assert torch.allclose(tokens[0], vision_encode(frames[:1], vision)[0], rtol=0, atol=1e-12)


def test_vision_encode_identical_frames(vision):
    frame = torch.rand(1, 16, 16)
    tokens = vision_encode(torch.cat([frame, frame]), vision)
    assert torch.allclose(tokens[0], tokens[1], rtol=0, atol=1e-12)


def test_vision_encode_empty_and_unaligned(vision):
    assert vision_encode(torch.zeros(0, 16, 16), vision).shape == (0, 16, 8)
    with pytest.raises(AlignmentError):
        vision_encode(torch.zeros(1, 12, 16), vision)


def test_spatial_merge_shape_and_symmetry():
    torch.manual_seed(1)
    merger = TokenMerger(8, 2, 32, 64).double()
    grid = PatchGrid(4, 4, 2, 4)
    assert spatial_merge(torch.randn(16, 8), grid, merger).shape == (4, 64)

    same = spatial_merge(torch.ones(16, 8) * 0.3, grid, merger)
    assert all(torch.allclose(same[0], row, rtol=0, atol=1e-12) for row in same)


def test_spatial_merge_is_local():
    torch.manual_seed(2)
    merger = TokenMerger(8, 2, 32, 64).double()
    grid = PatchGrid(4, 4, 2, 4)
    tokens = torch.randn(16, 8)
    before = spatial_merge(tokens, grid, merger)
    perturbed = tokens.clone()
    perturbed[1] += 1.0  # row-major patch 1 sits in window 0
    after = spatial_merge(perturbed, grid, merger)
    assert not torch.equal(before[0], after[0])
    assert torch.equal(before[1:], after[1:])


def test_spatial_merge_rejects_bad_grids():
    merger = TokenMerger(8, 2, 32, 64).double()
    with pytest.raises(AlignmentError):
        spatial_merge(torch.randn(15, 8), PatchGrid(4, 4, 2, 4), merger)
    with pytest.raises(AlignmentError):
        spatial_merge(torch.randn(9, 8), PatchGrid(3, 3, 2, 4), merger)


def test_tap_indices():
    assert GeometryEncoderConfig(depth=8).tap_indices == (3, 5, 7)
    assert GeometryEncoderConfig(depth=24).tap_indices == (11, 17, 23)
    assert tap_index(1.0, 32) == 31


def test_tap_config_errors():
    with pytest.raises(ConfigError):
        GeometryEncoderConfig(tap_fractions=(0.75, 0.5)).validate()
    with pytest.raises(ConfigError):
        GeometryEncoderConfig(depth=2, tap_fractions=(0.5, 0.6)).validate()
    with pytest.raises(ConfigError):
        GeometryEncoderConfig(registers=-1).validate()


def test_geometry_token_layout(geometry):
    token_set = geometry_encode(torch.rand(2, 16, 16), geometry)
    assert token_set.taps == (3, 5, 7)
    for tap in token_set.taps:
        assert token_set.layers[tap].shape == (2, 19, 16)
        assert token_set.camera_tokens(tap).shape == (2, 1, 16)
        assert token_set.register_tokens(tap).shape == (2, 2, 16)
        assert token_set.patch_tokens(tap).shape == (2, 16, 16)


def test_geometry_views_attend_jointly(geometry):
    frames = torch.rand(2, 16, 16)
    before = geometry(frames, (1,))
    perturbed = frames.clone()
    perturbed[0, :4, :4] += 1.0
    after = geometry(perturbed, (1,))
    assert not torch.equal(before.patch_tokens(1)[1], after.patch_tokens(1)[1])


def test_geometry_tap_out_of_range(geometry):
    with pytest.raises(ConfigError):
        geometry(torch.rand(1, 16, 16), (8,))
    with pytest.raises(ConfigError):
        geometry(torch.rand(9, 16, 16), (3,))


def test_encoders_bounded_inputs_give_finite_outputs(vision, geometry):
    frames = (torch.rand(3, 16, 16) - 0.5) * 20
    assert torch.isfinite(vision(frames)).all()
    token_set = geometry(frames, (3, 5, 7))
    assert all(torch.isfinite(layer).all() for layer in token_set.layers.values())
