"""Toy autoregressive decoder over [vision rows | prompt | answer] sequences."""
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .exceptions import (
    ArgumentError,
    ConfigError,
    FusionError,
    LossError,
    SequenceError,
)
from .fusion import FusionPlan, VisionMask, scatter_add_fusion
from .layers import Block, KVCache, RMSNorm
from .numerics import cross_entropy

logger = logging.getLogger(__name__)

INJECT_SITES = ("pre_block", "post_block")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    SPECIALS = ("<pad>", "<bos>", "<eos>", "<vision>")
    OPTIONS = ("A", "B", "C", "D")
    DIGITS = tuple("0123456789")
    KEYWORDS = ("which", "point", "object", "closer", "to", "or", "distance", "meters", "?")
    CLASSES = tuple(f"c{i}" for i in range(6))

    @classmethod
    def default(cls) -> "Vocab":
        return cls(cls.SPECIALS + cls.OPTIONS + cls.DIGITS + (".",) + cls.KEYWORDS + cls.CLASSES)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        object.__setattr__(self, "_ids", {token: i for i, token in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise SequenceError(f"token {token!r} is not in the vocabulary")

    def encode(self, tokens) -> list[int]:
        return [self.id(token) for token in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad(self) -> int:
        return self.id("<pad>")

    @property
    def bos(self) -> int:
        return self.id("<bos>")

    @property
    def eos(self) -> int:
        return self.id("<eos>")

    @property
    def vision(self) -> int:
        return self.id("<vision>")

    def number(self, value: float) -> list[int]:
        """Token ids of ``value`` written with one decimal."""
        return self.encode(f"{value:.1f}")

    def parse_number(self, ids) -> float | None:
        text = "".join(token for token in self.decode(ids) if token in self.DIGITS or token == ".")
        try:
            return float(text)
        except ValueError:
            return None


VOCAB = Vocab.default()


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_dim: int = 256
    vocab_size: int = len(VOCAB)
    max_len: int = 128

    def validate(self):
        if self.depth < 1:
            raise ConfigError("decoder needs at least one layer", field="model.decoder.depth")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads", field="model.decoder.heads")
        if self.vocab_size != len(VOCAB):
            raise ConfigError(f"vocab_size {self.vocab_size} does not match the {len(VOCAB)}-token vocabulary", field="model.decoder.vocab_size")


@dataclass
class MultimodalSequence:
    rows: torch.Tensor
    token_ids: torch.Tensor
    vision_mask: VisionMask
    loss_mask: torch.Tensor
    positions: torch.Tensor

    @property
    def total(self) -> int:
        return self.rows.shape[0]

    @property
    def n_vision(self) -> int:
        return self.vision_mask.count

    def extend(self, token_ids, decoder: "Decoder") -> "MultimodalSequence":
        """Append text tokens (no loss, no vision)."""
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        total = self.total + ids.shape[0]
        if total > decoder.cfg.max_len:
            raise SequenceError(f"sequence of {total} exceeds max_len {decoder.cfg.max_len}")
        return MultimodalSequence(
            rows=torch.cat([self.rows, decoder.tok_embed(ids)]),
            token_ids=torch.cat([self.token_ids, ids]),
            vision_mask=VisionMask(torch.cat([self.vision_mask.bits, torch.zeros(ids.shape[0], dtype=torch.bool)])),
            loss_mask=torch.cat([self.loss_mask, torch.zeros(ids.shape[0], dtype=torch.bool)]),
            positions=torch.arange(total),
        )


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_len, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_dim, causal=True) for _ in range(cfg.depth))
        self.norm = RMSNorm(cfg.dim)
        # untied from tok_embed
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)

    def forward(self, seq: MultimodalSequence, plan: FusionPlan, geo=None, inject_site: str = "pre_block", caches=None):
        injections = plan.injections
        geo = geo or {}
        if inject_site not in INJECT_SITES:
            raise ConfigError(f"inject_site must be one of {INJECT_SITES}, got {inject_site!r}", field="model.inject_site")
        missing = sorted(tap for tap in injections.values() if tap not in geo)
        if missing:
            raise FusionError(f"no projected geometry for taps {missing}")

        h = seq.rows + self.pos_embed[seq.positions]
        for j, block in enumerate(self.blocks):
            if j in injections and inject_site == "pre_block":
                h = scatter_add_fusion(h, geo[injections[j]], seq.vision_mask)
            h = block(h, caches[j] if caches is not None else None)
            if j in injections and inject_site == "post_block":
                h = scatter_add_fusion(h, geo[injections[j]], seq.vision_mask)
        return self.head(self.norm(h))

    def step(self, token_id: int, position: int, caches) -> torch.Tensor:
        """Logits for one new token given the caches of everything before it. No fusion."""
        if position >= self.cfg.max_len:
            raise SequenceError(f"position {position} exceeds max_len {self.cfg.max_len}")
        h = self.tok_embed(torch.tensor([token_id])) + self.pos_embed[position:position + 1]
        for block, cache in zip(self.blocks, caches):
            h = block(h, cache)
        return self.head(self.norm(h))[0]


def build_sequence(merged_vision: torch.Tensor, prompt_ids, answer_ids, vocab: Vocab, decoder: Decoder) -> MultimodalSequence:
    prompt_ids, answer_ids = list(prompt_ids), list(answer_ids)
    if vocab.vision in prompt_ids or vocab.vision in answer_ids:
        raise SequenceError("text contains the vision placeholder; expand it before building the sequence")
    n_vision = merged_vision.shape[0]
    n_text = len(prompt_ids) + len(answer_ids)
    total = n_vision + n_text
    if total > decoder.cfg.max_len:
        raise SequenceError(f"sequence of {total} exceeds max_len {decoder.cfg.max_len}")

    text = torch.as_tensor(prompt_ids + answer_ids, dtype=torch.long)
    rows = torch.cat([merged_vision, decoder.tok_embed(text)])
    token_ids = torch.cat([torch.full((n_vision,), vocab.vision, dtype=torch.long), text])
    loss_mask = torch.zeros(total, dtype=torch.bool)
    loss_mask[n_vision + len(prompt_ids):] = True
    return MultimodalSequence(
        rows=rows,
        token_ids=token_ids,
        vision_mask=VisionMask.span(total, 0, n_vision),
        loss_mask=loss_mask,
        positions=torch.arange(total),
    )


def forward_with_fusion(seq: MultimodalSequence, plan: FusionPlan, geo, decoder: Decoder, inject_site: str = "pre_block") -> torch.Tensor:
    return decoder(seq, plan, geo, inject_site)


def next_token_loss(logits: torch.Tensor, seq: MultimodalSequence) -> torch.Tensor:
    positions = torch.nonzero(seq.loss_mask, as_tuple=False).reshape(-1)
    if positions.numel() == 0:
        raise LossError("loss mask selects no answer tokens")
    if int(positions[0]) == 0:
        raise LossError("the first position has no preceding state to predict it from")
    # the state at i - 1 predicts the token at i
    return cross_entropy(logits[positions - 1], seq.token_ids[positions])


class DecodeSession:
    """One greedy generation: prefill with fusion, then cached single-token steps."""

    def __init__(self, decoder: Decoder, plan: FusionPlan, inject_site: str = "pre_block"):
        self.decoder = decoder
        self.plan = plan
        self.inject_site = inject_site
        self.caches = [KVCache() for _ in decoder.blocks]
        self.length = 0

    def prefill(self, seq: MultimodalSequence, geo) -> torch.Tensor:
        if self.length:
            raise SequenceError("session already prefilled")
        logits = self.decoder(seq, self.plan, geo, self.inject_site, caches=self.caches)
        self.length = seq.total
        return logits[-1]

    def step(self, token_id: int) -> torch.Tensor:
        logits = self.decoder.step(token_id, self.length, self.caches)
        self.length += 1
        return logits


def greedy_decode(seq: MultimodalSequence, plan: FusionPlan, geo, decoder: Decoder, max_new: int,
                  inject_site: str = "pre_block", vocab: Vocab = VOCAB, use_cache: bool = True) -> list[int]:
    """Argmax generation after the prompt; ties go to the lowest token id."""
    if max_new < 1:
        raise ArgumentError(f"max_new must be at least 1, got {max_new}")
    generated = []
    with torch.no_grad():
        if use_cache:
            session = DecodeSession(decoder, plan, inject_site)
            logits = session.prefill(seq, geo)
        else:
            logits = decoder(seq, plan, geo, inject_site)[-1]
        while True:
            token = int(torch.argmax(logits))
            generated.append(token)
            if token == vocab.eos or len(generated) >= max_new or seq.total + len(generated) >= decoder.cfg.max_len:
                break
            if use_cache:
                logits = session.step(token)
            else:
                logits = decoder(seq.extend(generated, decoder), plan, geo, inject_site)[-1]
    return generated
