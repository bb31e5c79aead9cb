"""Toy vision and geometry encoders.

Both encoders cut single-channel frames into non-overlapping p x p patches,
embed them linearly, add a learned 2-D position embedding and run a stack of
bidirectional pre-norm blocks. The vision encoder attends within each frame
and ends in a spatial merger into the language dimension; the geometry
encoder prepends a camera token and R register tokens to every view, attends
jointly over all views and exposes the hidden state of selected layers.
"""
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .alignment import PatchGrid, window_reorder
from .exceptions import AlignmentError, ConfigError
from .layers import MLP, Block, RMSNorm
from .numerics import round_half_away

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VisionEncoderConfig:
    depth: int = 4
    dim: int = 32
    heads: int = 4
    patch: int = 4
    merge: int = 2
    lang_dim: int = 64
    max_grid: int = 32

    def validate(self):
        if self.depth < 1:
            raise ConfigError("vision encoder needs at least one layer", field="model.vision.depth")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads", field="model.vision.heads")
        if self.patch < 1 or self.merge < 1:
            raise ConfigError("patch and merge sizes must be positive", field="model.vision.patch")


@dataclass(frozen=True)
class GeometryEncoderConfig:
    depth: int = 8
    dim: int = 48
    heads: int = 4
    registers: int = 2
    patch: int = 4
    tap_fractions: tuple[float, ...] = (0.5, 0.75, 1.0)
    max_views: int = 8
    max_grid: int = 32

    @property
    def tap_indices(self) -> tuple[int, ...]:
        return tuple(tap_index(fraction, self.depth) for fraction in self.tap_fractions)

    def validate(self):
        if self.depth < 1:
            raise ConfigError("geometry encoder needs at least one layer", field="model.geometry.depth")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads", field="model.geometry.heads")
        if self.registers < 0:
            raise ConfigError("register count must be non-negative", field="model.geometry.registers")
        fractions = self.tap_fractions
        if any(not 0 < f <= 1 for f in fractions):
            raise ConfigError(f"tap fractions must lie in (0, 1], got {list(fractions)}", field="model.geometry.tap_fractions")
        if any(b <= a for a, b in zip(fractions, fractions[1:])):
            raise ConfigError("tap fractions must be strictly increasing", field="model.geometry.tap_fractions")
        taps = self.tap_indices
        if len(set(taps)) != len(taps):
            raise ConfigError(f"tap fractions collapse onto the same layers {list(taps)}", field="model.geometry.tap_fractions")


def tap_index(fraction: float, depth: int) -> int:
    """Zero-based encoder layer for a fractional depth: round(fraction * depth) - 1."""
    index = round_half_away(fraction * depth) - 1
    if not 0 <= index < depth:
        raise ConfigError(f"fraction {fraction} maps to layer {index}, outside a {depth}-layer encoder", field="model.geometry.tap_fractions")
    return index


@dataclass
class GeometryTokenSet:
    """Hidden states recorded at the tap layers, (K, 1 + R + N, D) each."""

    registers: int
    n_patches: int
    layers: dict[int, torch.Tensor]

    @property
    def taps(self) -> tuple[int, ...]:
        return tuple(sorted(self.layers))

    @property
    def views(self) -> int:
        return next(iter(self.layers.values())).shape[0] if self.layers else 0

    def camera_tokens(self, tap: int) -> torch.Tensor:
        return self.layers[tap][:, :1]

    def register_tokens(self, tap: int) -> torch.Tensor:
        return self.layers[tap][:, 1:1 + self.registers]

    def patch_tokens(self, tap: int) -> torch.Tensor:
        return self.layers[tap][:, 1 + self.registers:]


class PatchEmbed(nn.Module):
    def __init__(self, patch: int, dim: int, max_grid: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Linear(patch * patch, dim)
        self.row_embed = nn.Parameter(torch.zeros(max_grid, dim))
        self.col_embed = nn.Parameter(torch.zeros(max_grid, dim))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        views, height, width = frames.shape
        p = self.patch
        rows, cols = height // p, width // p
        if rows > self.row_embed.shape[0] or cols > self.col_embed.shape[0]:
            raise AlignmentError(f"{rows}x{cols} patch grid exceeds the position table ({self.row_embed.shape[0]} per side)")
        # (K, H, W) -> (K, rows, cols, p, p) -> row-major patches
        patches = frames.reshape(views, rows, p, cols, p).permute(0, 1, 3, 2, 4).reshape(views, rows * cols, p * p)
        position = (self.row_embed[:rows, None, :] + self.col_embed[None, :cols, :]).reshape(rows * cols, -1)
        return self.proj(patches) + position


class TokenMerger(nn.Module):
    """Collapse every s x s window of (already window-ordered) tokens into one token.

    rms_norm per token, concatenate the s*s tokens of a window, then a
    two-layer GELU map to the output dimension.
    """

    def __init__(self, dim_in: int, merge: int, dim_mlp: int, dim_out: int):
        super().__init__()
        self.merge = merge
        self.norm = RMSNorm(dim_in)
        self.mlp = MLP(merge * merge * dim_in, dim_mlp, dim_out)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        group = self.merge * self.merge
        if tokens.dim() != 2 or tokens.shape[0] % group:
            raise AlignmentError(f"{tuple(tokens.shape)} tokens do not split into windows of {group}")
        windows = self.norm(tokens).reshape(-1, group * tokens.shape[-1])
        return self.mlp(windows)


def _check_frames(frames: torch.Tensor, patch: int, merge: int) -> PatchGrid:
    if frames.dim() != 3:
        raise AlignmentError(f"frames must be (K, H, W), got shape {tuple(frames.shape)}")
    _, height, width = frames.shape
    unit = patch * merge
    if height % unit or width % unit:
        raise AlignmentError(f"frame {height}x{width} is not a multiple of {patch}*{merge}={unit}; plan the resolution first")
    return PatchGrid.from_pixels(height, width, patch, merge)


class VisionEncoder(nn.Module):
    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch, cfg.dim, cfg.max_grid)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, 4 * cfg.dim) for _ in range(cfg.depth))
        self.merger = TokenMerger(cfg.dim, cfg.merge, cfg.merge * cfg.merge * cfg.dim, cfg.lang_dim)

    def grid_for(self, frames: torch.Tensor) -> PatchGrid:
        return _check_frames(frames, self.cfg.patch, self.cfg.merge)

    def hidden_states(self, frames: torch.Tensor, layers=()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Final patch tokens (K, N, D_vis) and the outputs of the requested zero-based layers."""
        grid = self.grid_for(frames)
        for layer in layers:
            if not 0 <= layer < self.cfg.depth:
                raise ConfigError(f"vision layer {layer} outside a {self.cfg.depth}-layer encoder")
        if frames.shape[0] == 0:
            empty = frames.new_zeros((0, grid.n, self.cfg.dim))
            return empty, {layer: empty for layer in layers}

        x = self.embed(frames)
        recorded = {}
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in layers:
                recorded[i] = x
        return x, recorded

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.hidden_states(frames)[0]

    def merge_views(self, tokens: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        """(K, N, D_vis) row-major tokens -> (K * N', D_lang), view-major."""
        if tokens.shape[0] == 0:
            return tokens.new_zeros((0, self.cfg.lang_dim))
        return torch.cat([spatial_merge(view, grid, self.merger) for view in tokens])


class GeometryEncoder(nn.Module):
    def __init__(self, cfg: GeometryEncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch, cfg.dim, cfg.max_grid)
        self.camera_token = nn.Parameter(torch.zeros(1, cfg.dim))
        self.register_tokens = nn.Parameter(torch.zeros(cfg.registers, cfg.dim))
        self.view_embed = nn.Parameter(torch.zeros(cfg.max_views, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, 4 * cfg.dim) for _ in range(cfg.depth))

    def forward(self, frames: torch.Tensor, taps, merge: int = 1) -> GeometryTokenSet:
        taps = tuple(sorted(set(taps)))
        for tap in taps:
            if not 0 <= tap < self.cfg.depth:
                raise ConfigError(f"tap {tap} outside a {self.cfg.depth}-layer geometry encoder", field="model.geometry.tap_fractions")
        grid = _check_frames(frames, self.cfg.patch, merge)
        views = frames.shape[0]
        if views > self.cfg.max_views:
            raise ConfigError(f"{views} views exceed max_views={self.cfg.max_views}", field="model.geometry.max_views")
        if views == 0 or not taps:
            return GeometryTokenSet(self.cfg.registers, grid.n, {})

        dim = self.cfg.dim
        tokens = torch.cat([
            self.camera_token.expand(views, 1, dim),
            self.register_tokens.expand(views, self.cfg.registers, dim),
            self.embed(frames),
        ], dim=1)
        tokens = tokens + self.view_embed[:views, None, :]
        length = tokens.shape[1]

        # every view's tokens are processed as one joint sequence
        x = tokens.reshape(1, views * length, dim)
        recorded = {}
        for i, block in enumerate(self.blocks[:taps[-1] + 1]):
            x = block(x)
            if i in taps:
                recorded[i] = x.reshape(views, length, dim)
        return GeometryTokenSet(self.cfg.registers, grid.n, recorded)


def vision_encode(frames: torch.Tensor, encoder: VisionEncoder) -> torch.Tensor:
    return encoder(frames)


def spatial_merge(tokens: torch.Tensor, grid: PatchGrid, merger: TokenMerger) -> torch.Tensor:
    """(N, D_vis) row-major tokens of one view -> (N / s^2, D_lang) in window order."""
    grid.validate()
    if tokens.shape[0] != grid.n:
        raise AlignmentError(f"got {tokens.shape[0]} tokens for a {grid.h_patch}x{grid.w_patch} grid")
    return merger(window_reorder(tokens, grid))


def geometry_encode(frames: torch.Tensor, encoder: GeometryEncoder, taps=None, merge: int = 1) -> GeometryTokenSet:
    if taps is None:
        taps = encoder.cfg.tap_indices
    return encoder(frames, taps, merge)
