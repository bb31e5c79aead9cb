"""Layer-wise representation maps and answer scoring.

ROI similarity maps compare the mean feature of a patch rectangle against every
patch of the same view at a chosen fractional depth; heatmaps are written as
8-bit binary PGM files. Numeric answers are scored with mean relative
accuracy over confidence thresholds 0.50, 0.55, ..., 0.95.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .alignment import strip_special_tokens
from .exceptions import ArgumentError, FileError, MetricError
from .numerics import as_tensor, round_half_away

logger = logging.getLogger(__name__)

MRA_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
ENCODERS = ("geometry", "vision")
BINARY_OPTIONS = ("A", "B")


def depth_to_layer(frac: float, depth: int) -> int:
    """1-based layer at fractional depth ``frac`` of a ``depth``-layer encoder."""
    if frac <= 0:
        raise ArgumentError(f"depth fraction must be positive, got {frac}")
    if depth < 1:
        raise ArgumentError(f"encoder depth must be at least 1, got {depth}")
    return min(max(round_half_away(frac * depth), 1), depth)


@dataclass(frozen=True)
class SimilarityMap:
    values: np.ndarray
    encoder: str
    depth: float
    roi: tuple[int, int, int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def roi_similarity_map(features, roi, encoder: str = "geometry", depth: float = 1.0) -> SimilarityMap:
    """Cosine similarity of every patch to the mean of the ROI patches.

    ``features`` is (h_patch, w_patch, D); ``roi`` is (r0, c0, r1, c1) with
    inclusive bounds in patch coordinates.
    """
    grid = as_tensor(features)
    if grid.dim() != 3:
        raise ArgumentError(f"features must be (rows, cols, dim), got shape {tuple(grid.shape)}")
    rows, cols, _ = grid.shape
    r0, c0, r1, c1 = roi
    if not (0 <= r0 <= r1 < rows and 0 <= c0 <= c1 < cols):
        raise ArgumentError(f"ROI {tuple(roi)} is empty or outside the {rows}x{cols} grid")

    descriptor = grid[r0:r1 + 1, c0:c1 + 1].reshape(-1, grid.shape[-1]).mean(dim=0)
    # zero-norm vectors give similarity 0
    similarity = F.cosine_similarity(grid, descriptor.expand_as(grid), dim=-1, eps=1e-12)
    values = similarity.clamp(-1.0, 1.0).detach().cpu().numpy()
    return SimilarityMap(values, encoder, depth, (r0, c0, r1, c1))


def heatmap_bytes(values) -> np.ndarray:
    """[-1, 1] -> 0..255 by round_half_up((v + 1) / 2 * 255)."""
    scaled = (np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0 * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def emit_heatmap(similarity: SimilarityMap, path):
    path = Path(path)
    image = Image.fromarray(heatmap_bytes(similarity.values))
    try:
        # Pillow writes mode L as binary P5 with maxval 255
        image.save(path, format="PPM")
    except OSError as e:
        raise FileError(f"cannot write heatmap {path}: {e}")
    logger.debug("wrote %s", path)


def encoder_features(model, frames, encoder: str, frac: float, view: int = 0) -> torch.Tensor:
    """(h_patch, w_patch, D) patch features of one view at fractional depth ``frac``."""
    frames = as_tensor(frames)
    if not 0 <= view < frames.shape[0]:
        raise ArgumentError(f"view {view} outside a {frames.shape[0]}-view clip")
    with torch.no_grad():
        match encoder:
            case "vision":
                grid = model.vision.grid_for(frames)
                layer = depth_to_layer(frac, model.cfg.vision.depth) - 1
                _, recorded = model.vision.hidden_states(frames, layers=(layer,))
                tokens = recorded[layer][view]
            case "geometry":
                grid = model.vision.grid_for(frames)
                layer = depth_to_layer(frac, model.cfg.geometry.depth) - 1
                token_set = model.geometry(frames, (layer,), merge=grid.s)
                patches = strip_special_tokens(token_set.layers[layer], token_set.registers, grid.n)
                tokens = patches.reshape(-1, grid.n, patches.shape[-1])[view]
            case _:
                raise ArgumentError(f"encoder must be one of {', '.join(ENCODERS)}, got {encoder!r}")
    return tokens.reshape(grid.h_patch, grid.w_patch, -1)


def mra_metric(pred: float, truth: float, thresholds=MRA_THRESHOLDS) -> float:
    """Fraction of thresholds C with |pred - truth| / |truth| < 1 - C."""
    if truth == 0:
        raise MetricError("relative accuracy is undefined for a zero ground truth")
    thresholds = list(thresholds)
    if not thresholds:
        raise MetricError("no confidence thresholds given")
    error = abs(pred - truth) / abs(truth)
    return sum(error < 1.0 - c for c in thresholds) / len(thresholds)


def score_answer(sample, generated, vocab) -> float:
    """1/0 for option answers, MRA for numeric ones."""
    if sample.answer_value is not None:
        predicted = vocab.parse_number(generated)
        return 0.0 if predicted is None else mra_metric(predicted, sample.answer_value)
    return float(bool(generated) and generated[0] == sample.answer_ids[0])


def evaluate(model, samples, constrained: bool = True) -> float:
    """Mean score over ``samples``.

    Numeric answers are generated greedily. Option answers are generated too
    unless ``constrained``, in which case the model picks among the option
    letters by their first-step logits.
    """
    if not samples:
        raise MetricError("empty evaluation suite")
    options = model.vocab.encode(BINARY_OPTIONS)
    scores = []
    for sample in samples:
        if constrained and sample.answer_value is None:
            generated = [model.choose(sample, options)]
        else:
            generated = model.generate(sample, max_new=len(sample.answer_ids) + 1)
        scores.append(score_answer(sample, generated, model.vocab))
    return float(np.mean(scores))
