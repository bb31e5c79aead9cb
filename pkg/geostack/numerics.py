"""Dense float64 primitives.

Tensors are ``torch.Tensor`` in float64; reverse-mode gradients come from torch
autograd. Every formula used by the encoders, the fusion path and the decoder
is written in terms of the functions below so the gradient checker covers
them all.
"""
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ArgumentError, EvaluationError, ShapeError

DTYPE = torch.float64
RMS_EPS = 1e-6

# GELU tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_APPROXIMATE = "tanh"


def round_half_away(value: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    magnitude = math.floor(abs(value) + 0.5)
    return int(magnitude if value >= 0 else -magnitude)


def as_tensor(values, dtype=DTYPE) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(dtype)
    return torch.as_tensor(np.asarray(values), dtype=dtype)


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = RMS_EPS) -> torch.Tensor:
    if eps < 0:
        raise ArgumentError(f"rms_norm eps must be non-negative, got {eps}")
    d = x.shape[-1] if x.dim() else 0
    if d < 1:
        raise ShapeError("rms_norm needs a non-empty last dimension")
    if gain.dim() != 1 or gain.shape[0] != d:
        raise ShapeError(f"rms_norm gain has shape {tuple(gain.shape)}, expected ({d},)")
    return x * gain / torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate=GELU_APPROXIMATE)


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax_rows needs a non-empty last dimension")
    return torch.softmax(x, dim=-1)


def _attention(q, k, v, scale, causal):
    if q.dim() < 2 or k.dim() < 2 or v.dim() < 2:
        raise ShapeError("attention operands must be at least 2-D")
    n_q, n_k = q.shape[-2], k.shape[-2]
    if n_q == 0 or n_k == 0:
        raise ShapeError("attention over an empty sequence")
    if k.shape != v.shape or q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention shapes do not match: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    if n_q > n_k:
        raise ShapeError("attention has more queries than keys")
    if scale <= 0:
        raise ArgumentError(f"attention scale must be positive, got {scale}")

    scores = scale * (q @ k.transpose(-2, -1))
    if causal:
        # query i sits at absolute position n_k - n_q + i (the tail of the key sequence)
        offset = n_k - n_q
        rows = torch.arange(n_q).unsqueeze(1) + offset
        cols = torch.arange(n_k).unsqueeze(0)
        scores = scores.masked_fill(cols > rows, float("-inf"))
    return softmax_rows(scores) @ v


def causal_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale: float) -> torch.Tensor:
    """Causal scaled dot-product attention over the trailing two dimensions.

    With fewer queries than keys the queries are the newest positions, which
    is how a decode step attends over its key/value cache.
    """
    return _attention(q, k, v, scale, causal=True)


def full_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale: float) -> torch.Tensor:
    return _attention(q, k, v, scale, causal=False)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, targets, reduction="mean")


def grad_check(f, x: torch.Tensor, h: float = 1e-5, *, coords=None, floor: float = 0.0) -> float:
    """Compare autograd against central differences.

    Returns the worst ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``
    over the checked coordinates (all of them unless ``coords`` is given).
    Coordinates where both gradients are below ``floor`` are skipped.
    """
    if not 0 < h <= 1e-2:
        raise ArgumentError(f"finite difference step must be in (0, 1e-2], got {h}")

    x = x.detach().to(DTYPE).clone().requires_grad_(True)
    value = f(x)
    if not torch.isfinite(value).all():
        raise EvaluationError("function value is not finite at the base point")
    (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)

    base = x.detach().reshape(-1)
    indices = range(base.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in indices:
            shifted = base.clone()
            shifted[i] += h
            f_plus = f(shifted.view_as(x)).item()
            shifted[i] -= 2 * h
            f_minus = f(shifted.view_as(x)).item()
            numeric = (f_plus - f_minus) / (2 * h)
            exact = analytic[i].item()
            if abs(exact) < floor and abs(numeric) < floor:
                continue
            error = abs(exact - numeric) / (abs(exact) + abs(numeric) + 1e-12)
            worst = max(worst, error)
    return worst


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream (Philox).

    The same ``(seed, counter)`` pair gives the same draws on every platform.
    ``split(i)`` derives the stream of item ``i`` as ``seed + i``.
    """

    seed: int
    counter: int = 0
    algorithm: str = "philox"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "philox":
            raise ArgumentError(f"unsupported generator {self.algorithm!r}")
        bit_generator = np.random.Philox(key=self.seed % (1 << 64), counter=self.counter)
        return np.random.Generator(bit_generator)

    def split(self, index: int) -> "Rng":
        return Rng(self.seed + index, 0, self.algorithm)

    def derive(self, *salt: int) -> "Rng":
        state = np.random.SeedSequence([self.seed % (1 << 64), *salt]).generate_state(1, dtype=np.uint64)[0]
        return Rng(int(state), 0, self.algorithm)

    def advance(self, blocks: int) -> "Rng":
        return replace(self, counter=self.counter + blocks)

    def normal(self, shape, std: float = 1.0) -> torch.Tensor:
        draws = self.generator().standard_normal(size=tuple(shape))
        return torch.from_numpy(np.asarray(draws, dtype=np.float64) * std)
