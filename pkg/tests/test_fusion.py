import pytest
import torch

from geostack.alignment import PatchGrid
from geostack.encoders import GeometryTokenSet
from geostack.exceptions import AlignmentError, ConfigError, FusionError
from geostack.fusion import (
    GeometryMerger,
    VisionMask,
    gvf_fuse,
    make_fusion_plan,
    prepare_geometry,
    project_geometry,
    scatter_add_fusion,
)


@pytest.fixture
def merger():
    torch.manual_seed(0)
    layer = GeometryMerger(8, 2, 64, dim_mlp=16).double()
    with torch.no_grad():
        layer.mlp.fc2.weight.normal_(0, 0.2)
        layer.mlp.fc2.bias.normal_(0, 0.2)
    return layer


def test_merger_shapes_and_zero_start():
    layer = GeometryMerger(48, 2, 64)
    assert layer.mlp.fc1.weight.shape == (2 * 4 * 48, 4 * 48)
    assert layer.mlp.fc2.weight.shape == (64, 2 * 4 * 48)
    assert layer.norm.weight.shape == (48,)
    assert torch.count_nonzero(layer.mlp.fc2.weight) == 0
    assert torch.count_nonzero(layer.mlp.fc2.bias) == 0


def test_project_geometry_shape(merger):
    out = project_geometry(torch.randn(16, 8), merger, PatchGrid(4, 4, 2, 4))
    assert out.shape == (4, 64)


def test_project_geometry_zero_input(merger):
    with torch.no_grad():
        merger.mlp.fc1.bias.zero_()
        merger.mlp.fc2.bias.zero_()
    out = project_geometry(torch.zeros(16, 8), merger, PatchGrid(4, 4, 2, 4))
    assert torch.equal(out, torch.zeros(4, 64))


def test_project_geometry_is_local(merger):
    grid = PatchGrid(4, 4, 2, 4)
    tokens = torch.randn(16, 8)
    before = project_geometry(tokens, merger, grid)
    perturbed = tokens.clone()
    perturbed[9] += 0.5  # window-ordered token 9 belongs to window 2
    after = project_geometry(perturbed, merger, grid)
    assert not torch.equal(before[2], after[2])
    assert torch.equal(before[[0, 1, 3]], after[[0, 1, 3]])


def test_project_geometry_needs_whole_windows(merger):
    with pytest.raises(AlignmentError):
        project_geometry(torch.randn(18, 8), merger, PatchGrid(3, 6, 2, 4))
    with pytest.raises(AlignmentError):
        project_geometry(torch.randn(15, 8), merger, PatchGrid(4, 4, 2, 4))


def test_prepare_geometry_strips_and_reorders(merger):
    grid = PatchGrid(4, 4, 2, 4)
    layer = torch.randn(2, 19, 8)
    token_set = GeometryTokenSet(registers=2, n_patches=16, layers={5: layer})
    order = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
    expected = torch.cat([project_geometry(layer[k, 3:][order], merger, grid) for k in range(2)])
    assert torch.allclose(prepare_geometry(token_set, 5, grid, merger), expected, rtol=0, atol=1e-13)
    with pytest.raises(FusionError):
        prepare_geometry(token_set, 3, grid, merger)


def test_scatter_add_fusion_example():
    hidden = torch.arange(8.0).reshape(4, 2)
    geo = torch.tensor([[10.0, 20.0], [30.0, 40.0]])
    out = scatter_add_fusion(hidden, geo, VisionMask(torch.tensor([False, True, True, False])))
    assert torch.equal(out, torch.tensor([[0.0, 1.0], [12.0, 23.0], [34.0, 45.0], [6.0, 7.0]]))


def test_scatter_add_fusion_zero_geo_is_identity():
    hidden = torch.randn(6, 3)
    out = scatter_add_fusion(hidden, torch.zeros(2, 3), VisionMask.span(6, 1, 2))
    assert torch.equal(out, hidden)


def test_scatter_add_fusion_one_hot_inputs():
    generator = torch.Generator().manual_seed(0)
    hidden = torch.randn(12, 6, generator=generator)
    bits = torch.zeros(12, dtype=torch.bool)
    bits[[1, 2, 4, 7, 8, 11]] = True
    mask = VisionMask(bits)
    positions = mask.positions.tolist()
    for k in range(6):
        geo = torch.zeros(6, 6)
        geo[k, k] = 1.0
        out = scatter_add_fusion(hidden, geo, mask)
        changed = [i for i in range(12) if not torch.equal(out[i], hidden[i])]
        assert changed == [positions[k]]
        assert out[positions[k], k] == hidden[positions[k], k] + 1.0
        for i in range(12):
            if not bits[i]:
                assert torch.equal(out[i], hidden[i])


def test_scatter_add_fusion_row_mismatch():
    with pytest.raises(FusionError):
        scatter_add_fusion(torch.zeros(4, 2), torch.zeros(1, 2), VisionMask(torch.zeros(4, dtype=torch.bool)))
    with pytest.raises(FusionError):
        scatter_add_fusion(torch.zeros(4, 2), torch.zeros(2, 3), VisionMask.span(4, 0, 2))


def test_make_fusion_plan_examples():
    assert make_fusion_plan("stack", [11, 17, 23], [0, 1, 2]).pairs == ((11, 0), (17, 1), (23, 2))
    assert make_fusion_plan("stack_reverse", [11, 17, 23], [0, 1, 2]).pairs == ((11, 2), (17, 1), (23, 0))
    single = make_fusion_plan("gvf_single", [23])
    assert single.pairs == () and single.gvf_layers == (23,)
    assert make_fusion_plan("none", [1, 2]).taps == ()


def test_stack_plans_share_pairs_per_axis():
    forward = make_fusion_plan("stack", [3, 5, 7], [2, 0, 1])
    reverse = make_fusion_plan("stack_reverse", [3, 5, 7], [2, 0, 1])
    assert sorted(t for t, _ in forward.pairs) == sorted(t for t, _ in reverse.pairs)
    assert sorted(d for _, d in forward.pairs) == sorted(d for _, d in reverse.pairs)
    assert forward.injections == {0: 3, 1: 5, 2: 7}


def test_make_fusion_plan_errors():
    with pytest.raises(ConfigError):
        make_fusion_plan("stack", [3, 5, 7], [0, 0, 1])
    with pytest.raises(ConfigError):
        make_fusion_plan("stack", [3, 5], [0, 1, 2])
    with pytest.raises(ConfigError):
        make_fusion_plan("gvf_single", [3, 5])
    with pytest.raises(ConfigError):
        make_fusion_plan("cross_attention", [3])
    with pytest.raises(ConfigError):
        make_fusion_plan("stack", [3, 5], [0, 4]).validate(decoder_depth=4)


def test_gvf_fuse():
    vision = torch.randn(8, 4)
    g = torch.randn(8, 4)
    assert torch.equal(gvf_fuse(vision), vision)
    assert torch.equal(gvf_fuse(vision, [torch.zeros(8, 4)]), vision)
    assert torch.allclose(gvf_fuse(vision, [g, -g]), vision, rtol=0, atol=1e-15)
    with pytest.raises(FusionError):
        gvf_fuse(vision, [torch.zeros(4, 4)])
