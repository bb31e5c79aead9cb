import pytest
import torch

from geostack.decoder import DecoderConfig
from geostack.encoders import GeometryEncoderConfig, VisionEncoderConfig
from geostack.models import GeoStackModel, ModelConfig, PlanConfig
from geostack.synthdata import DataConfig, gen_sample


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long training experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_cfg():
    """Small enough for finite differences; geometry taps land on layers 1, 2, 3."""
    return ModelConfig(
        vision=VisionEncoderConfig(depth=2, dim=16, heads=2, patch=4, merge=2, lang_dim=32),
        geometry=GeometryEncoderConfig(depth=4, dim=16, heads=2, registers=2, patch=4),
        decoder=DecoderConfig(depth=3, dim=32, heads=2, mlp_dim=64),
        plan=PlanConfig(mode="stack", decoder_layers=(0, 1, 2)),
    )


@pytest.fixture
def make_model(tiny_cfg):
    def factory(mode="stack", seed=0, taps=(), layers=(0, 1, 2), inject_site="pre_block"):
        plan = PlanConfig(mode=mode, decoder_layers=layers, taps=tuple(taps))
        cfg = ModelConfig(tiny_cfg.vision, tiny_cfg.geometry, tiny_cfg.decoder, plan, inject_site)
        return GeoStackModel(cfg, seed=seed)

    return factory


@pytest.fixture
def data_cfg():
    return DataConfig()


@pytest.fixture
def make_sample(data_cfg):
    def factory(seed=0, level="low"):
        return gen_sample(seed, level, data_cfg, patch=4, merge=2)

    return factory


@pytest.fixture
def randomize_mergers():
    """Give every merger a non-zero output layer so fusion actually moves the logits."""

    def apply(model, seed=0, std=0.3):
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for merger in model.mergers.values():
                fc2 = merger.mlp.fc2
                fc2.weight.copy_(torch.randn(fc2.weight.shape, generator=generator, dtype=torch.float64) * std)
                fc2.bias.copy_(torch.randn(fc2.bias.shape, generator=generator, dtype=torch.float64) * std)
        return model

    return apply
