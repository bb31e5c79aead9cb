import pytest
import torch

from geostack.encoders import VisionEncoderConfig
from geostack.exceptions import ConfigError
from geostack.models import GROUPS, ModelConfig, PlanConfig
from geostack.numerics import grad_check

MODES = ("stack", "stack_reverse", "gvf_single", "gvf_multi")


def swap_parameter(module, name, value, fn):
    """Evaluate ``fn`` with ``module.name`` replaced by the plain tensor ``value``."""
    original = getattr(module, name)
    delattr(module, name)
    setattr(module, name, value)
    try:
        return fn()
    finally:
        delattr(module, name)
        module.register_parameter(name, original)


def test_fusion_plan_from_config(tiny_cfg, make_model):
    assert tiny_cfg.fusion_plan().pairs == ((1, 0), (2, 1), (3, 2))
    assert make_model("stack_reverse").plan.pairs == ((1, 2), (2, 1), (3, 0))
    assert make_model("gvf_single").plan.gvf_layers == (3,)
    assert make_model("gvf_multi").plan.gvf_layers == (1, 2, 3)
    assert make_model("none").plan.taps == ()
    assert sorted(make_model("stack").mergers) == ["1", "2", "3"]
    assert len(make_model("none").mergers) == 0


def test_model_config_errors(tiny_cfg):
    with pytest.raises(ConfigError):
        ModelConfig(tiny_cfg.vision, tiny_cfg.geometry, tiny_cfg.decoder, PlanConfig(decoder_layers=(0, 1, 3))).validate()
    with pytest.raises(ConfigError):
        ModelConfig(tiny_cfg.vision, tiny_cfg.geometry, tiny_cfg.decoder, PlanConfig(taps=(1, 4), decoder_layers=(0, 1))).validate()
    with pytest.raises(ConfigError):
        ModelConfig(tiny_cfg.vision, tiny_cfg.geometry, tiny_cfg.decoder, tiny_cfg.plan, inject_site="after").validate()
    with pytest.raises(ConfigError):
        ModelConfig(VisionEncoderConfig(lang_dim=16), tiny_cfg.geometry, tiny_cfg.decoder, tiny_cfg.plan).validate()


def test_initialization_is_seeded(make_model):
    first, second, other = make_model(seed=4), make_model(seed=4), make_model(seed=5)
    for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
        assert torch.equal(a, b), name
        assert a.dtype == torch.float64
    assert not torch.equal(first.decoder.head.weight, other.decoder.head.weight)


@pytest.mark.parametrize("mode", MODES)
def test_zero_mergers_reproduce_the_unfused_model(make_model, make_sample, mode):
    base, fused = make_model("none"), make_model(mode)
    for merger in fused.mergers.values():
        assert torch.count_nonzero(merger.mlp.fc2.weight) == 0
    with torch.no_grad():
        for seed in range(20):
            sample = make_sample(seed=seed, level="low" if seed % 2 else "high")
            assert torch.equal(fused.logits(sample), base.logits(sample))


@pytest.mark.parametrize("mode", MODES)
def test_trained_mergers_change_the_answer_logits(make_model, make_sample, randomize_mergers, mode):
    base, fused = make_model("none"), randomize_mergers(make_model(mode))
    sample = make_sample(seed=1)
    with torch.no_grad():
        assert not torch.allclose(fused.logits(sample)[-1], base.logits(sample)[-1])


def test_inject_site_changes_the_result(make_model, make_sample, randomize_mergers):
    sample = make_sample(seed=2)
    pre = randomize_mergers(make_model(inject_site="pre_block"))
    post = randomize_mergers(make_model(inject_site="post_block"))
    with torch.no_grad():
        assert not torch.allclose(pre.logits(sample), post.logits(sample))


def test_freeze_groups(make_model):
    model = make_model()
    model.freeze(("vision", "geometry"))
    assert model.frozen_groups == ("vision", "geometry")
    assert all(p.requires_grad for _, p in model.group_parameters()["mergers"])
    assert set(model.group_parameters()) == set(GROUPS)
    model.freeze()
    assert model.frozen_groups == ()
    with pytest.raises(ConfigError):
        model.freeze(("encoder",))


def test_frozen_encoders_get_no_gradient(make_model, make_sample, randomize_mergers):
    model = randomize_mergers(make_model())
    model.freeze(("vision", "geometry"))
    model.loss(make_sample(seed=3)).backward()
    assert all(p.grad is None for p in model.vision.parameters())
    assert all(p.grad is None for p in model.geometry.parameters())
    assert any(p.grad is not None and torch.count_nonzero(p.grad) for p in model.mergers.parameters())


def test_generate_with_and_without_cache(make_model, make_sample, randomize_mergers):
    model = randomize_mergers(make_model("stack"))
    sample = make_sample(seed=5)
    cached = model.generate(sample, max_new=5)
    assert cached == model.generate(sample, max_new=5, use_cache=False)
    assert 1 <= len(cached) <= 5


@pytest.mark.parametrize("seed", range(10))
def test_gradients_through_geometry_tap_merger_and_decoder(make_model, make_sample, randomize_mergers, seed):
    model = randomize_mergers(make_model("stack", seed=seed), seed=seed)
    model.freeze()
    sample = make_sample(seed=seed, level="low")
    # layer 0 of the geometry encoder feeds every tap
    fc = model.geometry.blocks[0].mlp.fc2

    model.loss(sample).backward()
    assert torch.count_nonzero(fc.weight.grad) > 0

    def loss(weight):
        return swap_parameter(fc, "weight", weight, lambda: model.loss(sample))

    coords = range(seed, fc.weight.numel(), 37)
    assert grad_check(loss, fc.weight.detach(), coords=coords, floor=1e-4) < 1e-5


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_every_geometry_bias_coordinate_matches_finite_differences(make_model, make_sample, randomize_mergers, seed):
    model = randomize_mergers(make_model("stack", seed=seed), seed=seed)
    model.freeze()
    sample = make_sample(seed=seed, level="high")
    mlp = model.geometry.blocks[0].mlp
    for module in (mlp.fc1, mlp.fc2):
        def loss(bias, module=module):
            return swap_parameter(module, "bias", bias, lambda: model.loss(sample))

        assert grad_check(loss, module.bias.detach()) < 1e-5


def test_gradients_of_merger_and_decoder_parameters(make_model, make_sample, randomize_mergers):
    model = randomize_mergers(make_model("stack_reverse", seed=1), seed=1)
    sample = make_sample(seed=6, level="high")
    for module in (model.mergers["2"].mlp.fc1, model.decoder.blocks[1].attn.qkv):
        def loss(weight, module=module):
            return swap_parameter(module, "weight", weight, lambda: model.loss(sample))

        assert grad_check(loss, module.weight.detach(), coords=range(0, module.weight.numel(), 29), floor=1e-4) < 1e-5


def test_choose_picks_the_stronger_option(make_model, make_sample):
    model = make_model("none")
    sample = make_sample(seed=7)
    options = model.vocab.encode(["A", "B"])
    with torch.no_grad():
        seq, _ = model.sequence(sample, with_answer=False)
        logits = model.decoder(seq, model.plan, {})[-1]
    expected = options[0] if logits[options[0]] >= logits[options[1]] else options[1]
    assert model.choose(sample, options) == expected
