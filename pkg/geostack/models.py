"""The full model: two encoders, per-tap geometry mergers and the decoder."""
import contextlib
import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .decoder import (
    INJECT_SITES,
    VOCAB,
    Decoder,
    DecoderConfig,
    MultimodalSequence,
    build_sequence,
    greedy_decode,
    next_token_loss,
)
from .encoders import (
    GeometryEncoder,
    GeometryEncoderConfig,
    VisionEncoder,
    VisionEncoderConfig,
)
from .exceptions import ConfigError
from .fusion import (
    FusionPlan,
    GeometryMerger,
    gvf_fuse,
    make_fusion_plan,
    prepare_geometry,
)
from .layers import RMSNorm
from .numerics import DTYPE, Rng, as_tensor

logger = logging.getLogger(__name__)

GROUPS = ("vision", "geometry", "mergers", "decoder")

_GROUP_SALT = {"vision": 1, "geometry": 2, "decoder": 3}
_MERGER_SALT = 100
_SMALL_EMBEDDINGS = ("row_embed", "col_embed", "pos_embed")


@dataclass(frozen=True)
class PlanConfig:
    mode: str = "stack"
    decoder_layers: tuple[int, ...] = (0, 1, 2)
    # geometry layers to read; empty means every configured tap fraction
    taps: tuple[int, ...] = ()


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    geometry: GeometryEncoderConfig = field(default_factory=GeometryEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    inject_site: str = "pre_block"
    merger_mlp: int | None = None

    def fusion_plan(self) -> FusionPlan:
        taps = self.plan.taps or self.geometry.tap_indices
        if self.plan.mode == "gvf_single" and not self.plan.taps:
            taps = taps[-1:]
        plan = make_fusion_plan(self.plan.mode, taps, self.plan.decoder_layers)
        plan.validate(self.decoder.depth)
        for tap in plan.taps:
            if not 0 <= tap < self.geometry.depth:
                raise ConfigError(f"tap {tap} outside a {self.geometry.depth}-layer geometry encoder", field="model.plan.taps")
        return plan

    def validate(self):
        self.vision.validate()
        self.geometry.validate()
        self.decoder.validate()
        if self.vision.lang_dim != self.decoder.dim:
            raise ConfigError(f"vision lang_dim {self.vision.lang_dim} != decoder dim {self.decoder.dim}", field="model.vision.lang_dim")
        if self.geometry.patch != self.vision.patch:
            raise ConfigError("geometry and vision encoders must share the patch size", field="model.geometry.patch")
        if self.inject_site not in INJECT_SITES:
            raise ConfigError(f"inject_site must be one of {INJECT_SITES}, got {self.inject_site!r}", field="model.inject_site")
        self.fusion_plan()


def _initialize(module: nn.Module, rng: Rng):
    """Deterministic init of one parameter group; parameter i draws from ``rng.split(i)``."""
    norms = {id(m.weight) for m in module.modules() if isinstance(m, RMSNorm)}
    fan_in = {id(m.weight): m.in_features for m in module.modules() if isinstance(m, nn.Linear)}
    with torch.no_grad():
        for i, (name, param) in enumerate(module.named_parameters()):
            stream = rng.split(i)
            if id(param) in norms:
                param.fill_(1.0)
            elif id(param) in fan_in:
                param.copy_(stream.normal(param.shape, fan_in[id(param)] ** -0.5))
            elif name.endswith("bias"):
                param.zero_()
            elif name.endswith(_SMALL_EMBEDDINGS):
                param.copy_(stream.normal(param.shape, 0.1))
            else:
                # token table, camera, register and view tokens
                param.copy_(stream.normal(param.shape, 1.0))


class GeoStackModel(nn.Module):
    """Vision encoder, geometry encoder, one merger per tap and the decoder.

    Every group is initialized from its own stream of ``seed``, so two models
    that differ only in fusion plan share identical encoders and decoder.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, vocab=VOCAB):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.vocab = vocab
        self.plan = cfg.fusion_plan()
        self.inject_site = cfg.inject_site
        self.vision = VisionEncoder(cfg.vision)
        self.geometry = GeometryEncoder(cfg.geometry)
        self.mergers = nn.ModuleDict({
            str(tap): GeometryMerger(cfg.geometry.dim, cfg.vision.merge, cfg.decoder.dim, cfg.merger_mlp)
            for tap in self.plan.taps
        })
        self.decoder = Decoder(cfg.decoder)
        self.to(DTYPE)
        self.initialize(seed)

    def initialize(self, seed: int):
        base = Rng(seed)
        for group, salt in _GROUP_SALT.items():
            _initialize(getattr(self, group), base.derive(salt))
        for tap, merger in self.mergers.items():
            _initialize(merger, base.derive(_MERGER_SALT, int(tap)))
            merger.zero_output()

    def group_parameters(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        return {group: list(getattr(self, group).named_parameters()) for group in GROUPS}

    def freeze(self, groups=()):
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}; expected {', '.join(GROUPS)}", field="train.freeze")
        for group in GROUPS:
            getattr(self, group).requires_grad_(group not in groups)

    @property
    def frozen_groups(self) -> tuple[str, ...]:
        return tuple(
            group for group in GROUPS
            if not any(param.requires_grad for param in getattr(self, group).parameters())
        )

    def _grad_scope(self, group: str):
        if group in self.frozen_groups:
            return torch.no_grad()
        return contextlib.nullcontext()

    def encode(self, vision_frames, geometry_frames) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Merged vision rows and the projected geometry of every decoder-injected tap.

        GVF plans fold their geometry into the returned vision rows and leave
        nothing to inject.
        """
        vision_frames = as_tensor(vision_frames)
        geometry_frames = as_tensor(geometry_frames)
        grid = self.vision.grid_for(vision_frames)
        with self._grad_scope("vision"):
            merged = self.vision.merge_views(self.vision(vision_frames), grid)

        taps = self.plan.taps
        if not taps:
            return merged, {}
        with self._grad_scope("geometry"):
            token_set = self.geometry(geometry_frames, taps, merge=grid.s)
        geo = {tap: prepare_geometry(token_set, tap, grid, self.mergers[str(tap)]) for tap in taps}
        if self.plan.is_gvf:
            return gvf_fuse(merged, [geo[tap] for tap in self.plan.gvf_layers]), {}
        return merged, geo

    def sequence(self, sample, with_answer: bool = True) -> tuple[MultimodalSequence, dict[int, torch.Tensor]]:
        merged, geo = self.encode(sample.vision_frames, sample.geometry_frames)
        answer = sample.answer_ids if with_answer else ()
        return build_sequence(merged, sample.question_ids, answer, self.vocab, self.decoder), geo

    def logits(self, sample) -> torch.Tensor:
        seq, geo = self.sequence(sample)
        return self.decoder(seq, self.plan, geo, self.inject_site)

    def loss(self, sample) -> torch.Tensor:
        seq, geo = self.sequence(sample)
        return next_token_loss(self.decoder(seq, self.plan, geo, self.inject_site), seq)

    def generate(self, sample, max_new: int = 8, use_cache: bool = True) -> list[int]:
        with torch.no_grad():
            seq, geo = self.sequence(sample, with_answer=False)
        return greedy_decode(seq, self.plan, geo, self.decoder, max_new, self.inject_site, self.vocab, use_cache)

    def choose(self, sample, options) -> int:
        """The option id with the highest next-token logit after the prompt."""
        options = list(options)
        with torch.no_grad():
            seq, geo = self.sequence(sample, with_answer=False)
            logits = self.decoder(seq, self.plan, geo, self.inject_site)[-1]
        return options[int(torch.argmax(logits[options]))]
