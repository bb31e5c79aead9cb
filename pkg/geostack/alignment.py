"""Index arithmetic that keeps geometry tokens congruent with merged vision tokens."""
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import AlignmentError, ArgumentError, ResolutionError, SamplingError
from .numerics import round_half_away


@dataclass(frozen=True)
class PatchGrid:
    h_patch: int
    w_patch: int
    s: int
    p: int

    @classmethod
    def from_pixels(cls, height: int, width: int, p: int, s: int) -> "PatchGrid":
        if p < 1 or s < 1:
            raise AlignmentError(f"patch size and merge size must be positive, got p={p} s={s}")
        if height % p or width % p:
            raise AlignmentError(f"frame {height}x{width} is not a multiple of the patch size {p}")
        grid = cls(height // p, width // p, s, p)
        grid.validate()
        return grid

    @property
    def n(self) -> int:
        return self.h_patch * self.w_patch

    @property
    def merged_h(self) -> int:
        return self.h_patch // self.s

    @property
    def merged_w(self) -> int:
        return self.w_patch // self.s

    @property
    def n_merged(self) -> int:
        return self.n // (self.s * self.s)

    def validate(self):
        if self.h_patch < 1 or self.w_patch < 1 or self.s < 1:
            raise AlignmentError(f"degenerate patch grid {self}")
        if self.h_patch % self.s or self.w_patch % self.s:
            raise AlignmentError(f"patch grid {self.h_patch}x{self.w_patch} is not divisible by merge size {self.s}")


@dataclass(frozen=True)
class FramePlan:
    k: int
    indices: tuple[int, ...]
    delta: float
    k_min: int
    k_max: int


def window_permutation(grid: PatchGrid) -> np.ndarray:
    """Source index of every output slot: s x s windows row-major, row-major inside each window."""
    grid.validate()
    s = grid.s
    return (
        np.arange(grid.n)
        .reshape(grid.merged_h, s, grid.merged_w, s)
        .transpose(0, 2, 1, 3)
        .reshape(-1)
    )


def window_reorder(tokens, grid: PatchGrid, dim: int = 0):
    """Reorder row-major patch tokens so each run of s*s items is one merge window.

    Works on python sequences and on arrays/tensors along ``dim``.
    """
    n = len(tokens) if not hasattr(tokens, "shape") else tokens.shape[dim]
    if n != grid.n:
        raise AlignmentError(f"got {n} tokens for a {grid.h_patch}x{grid.w_patch} patch grid")
    order = window_permutation(grid)
    if isinstance(tokens, torch.Tensor):
        return tokens.index_select(dim, torch.as_tensor(order, dtype=torch.long))
    if isinstance(tokens, np.ndarray):
        return np.take(tokens, order, axis=dim)
    return [tokens[i] for i in order]


def strip_special_tokens(layer_output, registers: int, n_patches: int):
    """Drop the camera token and the register tokens of every view.

    ``layer_output`` is (K, 1 + R + N, D); the result is the (K * N, D) patch
    tokens with views concatenated in input order.
    """
    if registers < 0:
        raise AlignmentError(f"register count must be non-negative, got {registers}")
    if layer_output.ndim != 3:
        raise AlignmentError(f"expected (views, tokens, dim), got shape {tuple(layer_output.shape)}")
    views, length, dim = layer_output.shape
    if length != 1 + registers + n_patches:
        raise AlignmentError(f"view length {length} != 1 + {registers} registers + {n_patches} patches")
    return layer_output[:, 1 + registers:].reshape(views * n_patches, dim)


def plan_resolution(h_in: int, w_in: int, target: int, p: int, s: int, resize_side: str = "short") -> tuple[int, int]:
    scaled = scaled_size(h_in, w_in, target, p, s, resize_side)
    unit = p * s
    height, width = (side // unit * unit for side in scaled)
    if height < unit or width < unit:
        raise ResolutionError(f"planned frame {height}x{width} is smaller than one merge window ({unit} px)")
    return height, width


def scaled_size(h_in: int, w_in: int, target: int, p: int, s: int, resize_side: str = "short") -> tuple[int, int]:
    unit = p * s
    if min(h_in, w_in) < unit or target < unit:
        raise ResolutionError(f"input {h_in}x{w_in} or target {target} is below one merge window ({unit} px)")
    match resize_side:
        case "short":
            reference = min(h_in, w_in)
        case "long":
            reference = max(h_in, w_in)
        case _:
            raise ArgumentError(f"resize_side must be 'short' or 'long', got {resize_side!r}")
    scale = target / reference
    return round_half_away(h_in * scale), round_half_away(w_in * scale)


def trim_offsets(scaled: int, aligned: int) -> tuple[int, int]:
    """Leading and trailing pixels removed by the center trim."""
    excess = scaled - aligned
    if excess < 0:
        raise ResolutionError(f"cannot trim {scaled} px down to {aligned} px")
    lead = excess // 2
    return lead, excess - lead


def plan_frames(t_sec: float, delta: float, k_min: int, k_max: int, f: int) -> FramePlan:
    if delta <= 0:
        raise SamplingError(f"sampling interval must be positive, got {delta}")
    if k_min < 1 or k_min > k_max:
        raise SamplingError(f"invalid frame bounds [{k_min}, {k_max}]")
    if f < k_min:
        raise SamplingError(f"video has {f} frames, fewer than the minimum of {k_min}")

    # cap at F so indices stay strictly increasing
    k = min(max(round_half_away(t_sec / delta), k_min), k_max, f)
    if k == 1:
        indices = (0,)
    else:
        indices = tuple(i * (f - 1) // (k - 1) for i in range(k))
    return FramePlan(k=k, indices=indices, delta=delta, k_min=k_min, k_max=k_max)
