"""Geometry token mergers, masked additive injection and fusion plans."""
import logging
from dataclasses import dataclass

import torch

from .alignment import PatchGrid, strip_special_tokens, window_reorder
from .encoders import GeometryTokenSet, TokenMerger
from .exceptions import AlignmentError, ConfigError, FusionError

logger = logging.getLogger(__name__)

MODES = ("none", "stack", "stack_reverse", "gvf_single", "gvf_multi")


class GeometryMerger(TokenMerger):
    """Per-tap geometry merger; the output layer starts at zero so fusion starts as a no-op."""

    def __init__(self, dim_geo: int, merge: int, dim_lang: int, dim_mlp: int | None = None):
        super().__init__(dim_geo, merge, dim_mlp or 2 * merge * merge * dim_geo, dim_lang)
        self.zero_output()

    def zero_output(self):
        with torch.no_grad():
            self.mlp.fc2.weight.zero_()
            self.mlp.fc2.bias.zero_()


@dataclass(frozen=True)
class VisionMask:
    bits: torch.Tensor

    @classmethod
    def span(cls, total: int, start: int, count: int) -> "VisionMask":
        bits = torch.zeros(total, dtype=torch.bool)
        bits[start:start + count] = True
        return cls(bits)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def positions(self) -> torch.Tensor:
        return torch.nonzero(self.bits, as_tuple=False).reshape(-1)

    def __len__(self):
        return self.bits.shape[0]


@dataclass(frozen=True)
class FusionPlan:
    mode: str = "none"
    pairs: tuple[tuple[int, int], ...] = ()
    gvf_layers: tuple[int, ...] = ()

    @property
    def taps(self) -> tuple[int, ...]:
        """Every geometry tap the plan reads, ascending."""
        return tuple(sorted({tap for tap, _ in self.pairs} | set(self.gvf_layers)))

    @property
    def injections(self) -> dict[int, int]:
        """Decoder layer -> geometry tap."""
        return {layer: tap for tap, layer in self.pairs}

    @property
    def is_gvf(self) -> bool:
        return self.mode in ("gvf_single", "gvf_multi")

    def validate(self, decoder_depth: int):
        layers = [layer for _, layer in self.pairs]
        if len(set(layers)) != len(layers):
            raise ConfigError(f"decoder layers {layers} are not distinct", field="model.plan.decoder_layers")
        for layer in layers:
            if not 0 <= layer < decoder_depth:
                raise ConfigError(f"decoder layer {layer} outside a {decoder_depth}-layer decoder", field="model.plan.decoder_layers")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "pairs": [list(pair) for pair in self.pairs],
            "gvf_layers": list(self.gvf_layers),
        }


def make_fusion_plan(mode: str, taps, decoder_layers=()) -> FusionPlan:
    taps = tuple(sorted(taps))
    decoder_layers = tuple(decoder_layers)
    match mode:
        case "none":
            return FusionPlan("none")
        case "stack" | "stack_reverse":
            if len(taps) != len(decoder_layers):
                raise ConfigError(f"{len(taps)} taps cannot map onto {len(decoder_layers)} decoder layers", field="model.plan.decoder_layers")
            if len(set(decoder_layers)) != len(decoder_layers):
                raise ConfigError(f"duplicate decoder layers {list(decoder_layers)}", field="model.plan.decoder_layers")
            if len(set(taps)) != len(taps):
                raise ConfigError(f"duplicate taps {list(taps)}", field="model.geometry.tap_fractions")
            # shallow taps feed early layers (stack) or late layers (stack_reverse)
            ordered = sorted(decoder_layers, reverse=(mode == "stack_reverse"))
            return FusionPlan(mode, tuple(zip(taps, ordered)))
        case "gvf_single":
            if len(taps) != 1:
                raise ConfigError(f"gvf_single takes exactly one tap, got {list(taps)}", field="model.plan.taps")
            return FusionPlan(mode, (), taps)
        case "gvf_multi":
            if not taps:
                raise ConfigError("gvf_multi needs at least one tap", field="model.plan.taps")
            return FusionPlan(mode, (), taps)
        case _:
            raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {', '.join(MODES)}", field="model.plan.mode")


def project_geometry(tokens: torch.Tensor, merger: GeometryMerger, grid: PatchGrid) -> torch.Tensor:
    """(K * N, D_geo) stripped, window-ordered patch tokens -> (K * N', D_lang)."""
    grid.validate()
    count = tokens.shape[0]
    if count % grid.n:
        raise AlignmentError(f"{count} geometry tokens is not a whole number of {grid.n}-patch views")
    if count % (grid.s * grid.s):
        raise AlignmentError(f"{count} geometry tokens do not split into {grid.s}x{grid.s} windows")
    return merger(tokens)


def prepare_geometry(token_set: GeometryTokenSet, tap: int, grid: PatchGrid, merger: GeometryMerger) -> torch.Tensor:
    """Strip special tokens of one tap, window-order each view and project it."""
    if tap not in token_set.layers:
        raise FusionError(f"geometry tap {tap} was not recorded (have {list(token_set.taps)})")
    patches = strip_special_tokens(token_set.layers[tap], token_set.registers, grid.n)
    views = patches.shape[0] // grid.n
    ordered = window_reorder(patches.reshape(views, grid.n, -1), grid, dim=1).reshape(views * grid.n, -1)
    return project_geometry(ordered, merger, grid)


def scatter_add_fusion(hidden: torch.Tensor, geo: torch.Tensor, mask: VisionMask) -> torch.Tensor:
    """Add geo row k to the k-th masked row of ``hidden``; every other row is returned untouched."""
    if len(mask) != hidden.shape[0]:
        raise FusionError(f"mask covers {len(mask)} positions, hidden state has {hidden.shape[0]}")
    positions = mask.positions
    if geo.shape[0] != positions.shape[0]:
        raise FusionError(f"{geo.shape[0]} geometry rows for {positions.shape[0]} vision positions")
    if geo.shape[1:] != hidden.shape[1:]:
        raise FusionError(f"geometry rows of shape {tuple(geo.shape[1:])} do not match hidden rows {tuple(hidden.shape[1:])}")
    return hidden.index_add(0, positions, geo)


def gvf_fuse(merged_vision: torch.Tensor, projected=()) -> torch.Tensor:
    out = merged_vision
    for layer in projected:
        if layer.shape != merged_vision.shape:
            raise FusionError(f"projected geometry {tuple(layer.shape)} does not match vision tokens {tuple(merged_vision.shape)}")
        out = out + layer
    return out

