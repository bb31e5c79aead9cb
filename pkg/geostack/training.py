"""Instruction-tuning loop: AdamW, linear warmup into cosine decay, frozen encoders."""
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ArgumentError, ConfigError, FileError, TrainingError
from .models import GROUPS, GeoStackModel, ModelConfig
from .numerics import round_half_away
from .synthdata import DataConfig, training_samples

logger = logging.getLogger(__name__)

# training seed s reads the data stream starting at train_seed + s * SEED_STRIDE
SEED_STRIDE = 1_000_000


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-5
    warmup_fraction: float = 0.03
    weight_decay: float = 0.01
    batch_size: int = 8
    total_steps: int = 300
    seed: int = 0
    freeze: tuple[str, ...] = ("vision", "geometry")
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    save_every: int = 0
    log_every: int = 25

    def validate(self):
        if not self.peak_lr > 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}", field="train.peak_lr")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}", field="train.warmup_fraction")
        if self.total_steps <= 0:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}", field="train.total_steps")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}", field="train.batch_size")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative", field="train.weight_decay")
        unknown = set(self.freeze) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}", field="train.freeze")
        if self.log_every < 1 or self.save_every < 0:
            raise ConfigError("log_every must be positive and save_every non-negative", field="train.log_every")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set", field="train.grad_clip")

    @property
    def warmup_steps(self) -> int:
        return round_half_away(self.warmup_fraction * self.total_steps)


def lr_at_step(t: int, cfg: TrainConfig) -> float:
    if cfg.total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {cfg.total_steps}", field="train.total_steps")
    if not 0 <= t <= cfg.total_steps:
        raise ArgumentError(f"step {t} outside [0, {cfg.total_steps}]")
    warmup = cfg.warmup_steps
    if t < warmup:
        return cfg.peak_lr * t / warmup
    if cfg.total_steps == warmup:
        return cfg.peak_lr
    progress = (t - warmup) / (cfg.total_steps - warmup)
    return max(0.0, cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


def build_optimizer(model: GeoStackModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW over trainable parameters only; weight matrices decay, gains and biases do not."""
    decay, no_decay = [], []
    for _, param in model.named_parameters():
        if not param.requires_grad:
            continue
        (decay if param.ndim >= 2 else no_decay).append(param)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(
        [group for group in groups if group["params"]],
        lr=0.0,
        betas=cfg.betas,
        eps=cfg.eps,
        foreach=False,
    )


def train_step(model: GeoStackModel, optimizer: torch.optim.Optimizer, batch, lr: float, *,
               step: int | None = None, grad_clip: float | None = None) -> float:
    """One update on the mean next-token loss of ``batch``; returns that loss."""
    if not batch:
        raise TrainingError("empty batch", step=step)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)

    loss = torch.stack([model.loss(sample) for sample in batch]).mean()
    if not torch.isfinite(loss):
        raise TrainingError(f"loss is {loss.item()}", step=step)
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], grad_clip)
    optimizer.step()
    return loss.item()


class Trainer:
    """Owns one model, its optimizer and the position in the training data stream.

    Batch ``t`` is samples ``t * B .. t * B + B - 1`` of the stream, so the
    step count alone is the data cursor and resuming from a checkpoint replays
    exactly the batches an uninterrupted run would see.
    """

    def __init__(self, model_cfg: ModelConfig, data_cfg: DataConfig, cfg: TrainConfig, *,
                 dataset=None, out_dir=None, echo: dict | None = None, progress: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.data_cfg = replace(data_cfg, train_seed=data_cfg.train_seed + cfg.seed * SEED_STRIDE)
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.echo = echo
        self.progress = progress
        self.model = GeoStackModel(model_cfg, seed=cfg.seed)
        self.model.freeze(cfg.freeze)
        self.optimizer = build_optimizer(self.model, cfg)
        self.step = 0
        self.history: list[dict] = []

    @property
    def rng_state(self) -> dict:
        return {"train_seed": self.data_cfg.train_seed, "cursor": self.step * self.cfg.batch_size}

    def batch(self, step: int) -> list:
        start = step * self.cfg.batch_size
        if self.dataset is not None:
            return [self.dataset[(start + i) % len(self.dataset)] for i in range(self.cfg.batch_size)]
        return training_samples(
            self.data_cfg, start, self.cfg.batch_size,
            patch=self.model_cfg.vision.patch, merge=self.model_cfg.vision.merge,
        )

    def run(self, until: int | None = None) -> list[dict]:
        """Train up to step ``until`` (default: total_steps); returns the records of this call."""
        until = self.cfg.total_steps if until is None else until
        if not self.step <= until <= self.cfg.total_steps:
            raise ArgumentError(f"cannot train from step {self.step} to {until} (total {self.cfg.total_steps})")
        if self.out_dir is not None:
            try:
                self.out_dir.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise FileError(f"cannot create run directory {self.out_dir}: {e}")

        records = []
        steps = range(self.step, until)
        for t in tqdm(steps, desc="train", disable=not self.progress, leave=False):
            lr = lr_at_step(t, self.cfg)
            loss = train_step(self.model, self.optimizer, self.batch(t), lr, step=t + 1, grad_clip=self.cfg.grad_clip)
            self.step = t + 1
            record = {"step": self.step, "loss": loss, "lr": lr}
            records.append(record)
            self.history.append(record)
            if self.step % self.cfg.log_every == 0 or self.step == until:
                logger.info("step %d/%d loss %.4f lr %.3g", self.step, self.cfg.total_steps, loss, lr)
            if self.out_dir is not None:
                self._append_log(record)
                if self.cfg.save_every and self.step % self.cfg.save_every == 0:
                    self.save(self.out_dir / f"step_{self.step:06d}.sstk")

        if self.out_dir is not None and self.step == self.cfg.total_steps:
            self.save(self.out_dir / "final.sstk")
        return records

    def _append_log(self, record: dict):
        path = self.out_dir / "train_log.jsonl"
        try:
            with path.open("a") as log:
                log.write(json.dumps(record, sort_keys=True) + "\n")
        except OSError as e:
            raise FileError(f"cannot append to {path}: {e}")

    def save(self, path):
        save_checkpoint(path, self.model, self.optimizer, step=self.step, config=self.echo, rng=self.rng_state)

    @classmethod
    def resume(cls, path, model_cfg: ModelConfig, data_cfg: DataConfig, cfg: TrainConfig, **kwargs) -> "Trainer":
        trainer = cls(model_cfg, data_cfg, cfg, **kwargs)
        checkpoint = load_checkpoint(path)
        checkpoint.restore(trainer.model, trainer.optimizer)
        if checkpoint.rng and checkpoint.rng.get("train_seed") != trainer.data_cfg.train_seed:
            raise TrainingError(f"checkpoint was trained on stream {checkpoint.rng.get('train_seed')}, "
                                f"config selects {trainer.data_cfg.train_seed}")
        trainer.step = checkpoint.step
        logger.info("resumed from %s at step %d", path, trainer.step)
        return trainer
