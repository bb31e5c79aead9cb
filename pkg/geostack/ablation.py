"""Paired fusion-variant comparisons.

Every variant is trained from the same initial seed on the same data stream
and scored on the same held-out suites, so differences between rows come from
the fusion plan alone.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .analysis import evaluate
from .config import RunConfig, config_hash
from .exceptions import ArgumentError, ConfigError, GeoStackError
from .exporter import write_report_json
from .models import PlanConfig
from .synthdata import eval_samples, read_jsonl
from .training import Trainer

logger = logging.getLogger(__name__)

VARIANT_MODES = {
    "base": "none",
    "stack": "stack",
    "stack-reverse": "stack_reverse",
    "gvf-single": "gvf_single",
    "gvf-multi": "gvf_multi",
}
DEFAULT_VARIANTS = ("base", "gvf-single", "gvf-multi", "stack", "stack-reverse")


@dataclass(frozen=True)
class Variant:
    name: str
    mode: str
    taps: tuple[int, ...]
    decoder_layers: tuple[int, ...] = ()

    def run_config(self, cfg: RunConfig) -> RunConfig:
        plan = PlanConfig(mode=self.mode, decoder_layers=self.decoder_layers, taps=self.taps)
        return replace(cfg, model=replace(cfg.model, plan=plan))


def parse_variant(name: str, cfg: RunConfig) -> Variant:
    """``kind`` or ``kind@t1,t2,...`` with zero-based geometry taps."""
    kind, _, tap_text = name.partition("@")
    if kind not in VARIANT_MODES:
        raise ConfigError(f"unknown variant {kind!r}; expected one of {', '.join(VARIANT_MODES)}", field="variants")
    mode = VARIANT_MODES[kind]
    try:
        taps = tuple(int(tap) for tap in tap_text.split(",")) if tap_text else cfg.model.geometry.tap_indices
    except ValueError:
        raise ConfigError(f"tap list {tap_text!r} is not comma-separated integers", field="variants")

    match mode:
        case "none":
            return Variant(name, mode, ())
        case "gvf_single":
            return Variant(name, mode, taps if tap_text else taps[-1:])
        case "gvf_multi":
            return Variant(name, mode, taps)
        case _:
            layers = cfg.model.plan.decoder_layers
            # stack rows inject into the configured layers, or the first len(taps) layers when counts differ
            if len(layers) != len(taps):
                layers = tuple(range(len(taps)))
            return Variant(name, mode, taps, tuple(layers))


def suites(cfg: RunConfig, count: int | None = None) -> dict[str, list]:
    """Held-out samples per task level; the distance suite only when the task mix trains it."""
    count = count or cfg.data.eval_count
    levels = ["low", "high"] + (["distance"] if cfg.data.task_mix[2] > 0 else [])
    if cfg.data.eval_path:
        loaded = read_jsonl(cfg.data.eval_path)
        return {level: [s for s in loaded if s.level == level][:count] for level in levels}
    patch, merge = cfg.model.vision.patch, cfg.model.vision.merge
    return {level: eval_samples(cfg.data, level, count, patch=patch, merge=merge) for level in levels}


def _train_one(cfg: RunConfig, seed: int, steps: int, dataset=None):
    train = replace(cfg.train, seed=seed, **({"total_steps": steps} if steps else {}))
    trainer = Trainer(cfg.model, cfg.data, train, dataset=dataset)
    if steps:
        trainer.run()
    return trainer


def run_variant(cfg: RunConfig, variant: Variant, seeds, steps: int, eval_sets: dict, dataset=None) -> dict:
    run = variant.run_config(cfg)
    plan = run.model.fusion_plan()
    entry = {
        "name": variant.name,
        "taps": list(plan.taps),
        "plan": plan.to_dict(),
        "seeds": list(seeds),
        "steps": steps,
        "status": "ok",
        "error": None,
        "low": None,
        "high": None,
        "overall": None,
        "distance": None,
        "per_seed": [],
    }
    logger.info("variant %s: training %d steps on seeds %s", variant.name, steps, list(seeds))
    try:
        for seed in seeds:
            trainer = _train_one(run, seed, steps, dataset)
            scores = {level: evaluate(trainer.model, samples) for level, samples in eval_sets.items() if samples}
            final_loss = trainer.history[-1]["loss"] if trainer.history else None
            entry["per_seed"].append({"seed": seed, "final_loss": final_loss, **scores})
    except GeoStackError as e:
        logger.error("variant %s failed: %s", variant.name, e)
        entry.update(status="failed", error=f"{e.code}: {e}")
        return entry

    for level in ("low", "high", "distance"):
        values = [row[level] for row in entry["per_seed"] if level in row]
        if values:
            entry[level] = float(np.mean(values))
    if entry["low"] is not None and entry["high"] is not None:
        entry["overall"] = (entry["low"] + entry["high"]) / 2
    logger.info("variant %s: low %s high %s", variant.name, entry["low"], entry["high"])
    return entry


def run_ablation(cfg: RunConfig, variants=DEFAULT_VARIANTS, out_path=None, *, seeds=None, steps: int | None = None,
                 eval_count: int | None = None, jobs: int = 1) -> dict:
    variants = list(variants)
    if not variants:
        raise ArgumentError("no variants to run")
    parsed = [parse_variant(name, cfg) for name in variants]
    for variant in parsed:
        variant.run_config(cfg).model.validate()
    seeds = list(seeds) if seeds is not None else [cfg.train.seed]
    steps = cfg.train.total_steps if steps is None else steps
    if steps < 0:
        raise ArgumentError(f"step count must be non-negative, got {steps}")

    eval_sets = suites(cfg, eval_count)
    dataset = read_jsonl(cfg.data.train_path) if cfg.data.train_path else None
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            entries = list(executor.map(lambda v: run_variant(cfg, v, seeds, steps, eval_sets, dataset), parsed))
    else:
        entries = [run_variant(cfg, variant, seeds, steps, eval_sets, dataset) for variant in parsed]

    report = {
        "version": __version__,
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "steps": steps,
        "suites": {level: len(samples) for level, samples in eval_sets.items()},
        "variants": entries,
    }
    if out_path is not None:
        write_report_json(report, out_path)
    return report


def sweep_variants(taps) -> list[str]:
    """Base plus one single-tap GVF row per tap."""
    return ["base"] + [f"gvf-single@{tap}" for tap in taps]
