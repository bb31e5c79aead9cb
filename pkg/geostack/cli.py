"""``geostack`` command line entry point."""
import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .ablation import DEFAULT_VARIANTS, run_ablation, suites, sweep_variants
from .analysis import emit_heatmap, encoder_features, evaluate, roi_similarity_map
from .checkpoint import load_checkpoint
from .config import RunConfig, config_hash, load_config
from .exceptions import ConfigError, FileError, GeoStackError
from .exporter import write_report_csv, write_report_json
from .models import GeoStackModel
from .numerics import round_half_away
from .synthdata import (
    LEVELS,
    FrameGeometry,
    eval_samples,
    gen_sample,
    gen_scene,
    read_jsonl,
    render_views,
    sample_level,
    write_jsonl,
)
from .training import Trainer

logger = logging.getLogger(__name__)

SUITES = {
    "low": ("low",),
    "high": ("high",),
    "distance": ("distance",),
    "both": ("low", "high"),
    "all": LEVELS,
}
ENCODER_TAGS = {"geo": "geometry", "vis": "vision"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _roi(text: str) -> tuple[int, int, int, int]:
    values = _ints(text)
    if len(values) != 4:
        raise argparse.ArgumentTypeError(f"ROI needs r0,c0,r1,c1, got {text!r}")
    return tuple(values)


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig.toy()


def _model_from_checkpoint(path) -> tuple[RunConfig, GeoStackModel, int]:
    checkpoint = load_checkpoint(path)
    if checkpoint.config is None:
        raise ConfigError(f"checkpoint {path} carries no run configuration", field="checkpoint")
    cfg = RunConfig.from_dict(checkpoint.config)
    model = GeoStackModel(cfg.model, seed=cfg.train.seed)
    checkpoint.restore(model)
    return cfg, model, checkpoint.step


def cmd_gen_data(args):
    cfg = _config(args.config)
    patch, merge = cfg.model.vision.patch, cfg.model.vision.merge
    samples = []
    for index in range(args.count):
        seed = args.seed + index
        level = sample_level(seed, cfg.data.task_mix) if args.level == "mix" else args.level
        samples.append(gen_sample(seed, level, cfg.data, patch=patch, merge=merge))
    write_jsonl(samples, args.out)
    logger.info("wrote %d samples to %s", len(samples), args.out)


def cmd_train(args):
    cfg = _config(args.config)
    out_dir = Path(args.out_dir or cfg.paths.out_dir)
    dataset = read_jsonl(cfg.data.train_path) if cfg.data.train_path else None
    kwargs = {"dataset": dataset, "out_dir": out_dir, "echo": cfg.to_dict(), "progress": sys.stderr.isatty()}
    if args.resume:
        trainer = Trainer.resume(args.resume, cfg.model, cfg.data, cfg.train, **kwargs)
    else:
        trainer = Trainer(cfg.model, cfg.data, cfg.train, **kwargs)
    trainer.run()
    logger.info("training finished at step %d", trainer.step)


def cmd_eval(args):
    cfg, model, step = _model_from_checkpoint(args.checkpoint)
    eval_sets = suites(cfg, args.count)
    if "distance" in SUITES[args.suite] and "distance" not in eval_sets:
        patch, merge = cfg.model.vision.patch, cfg.model.vision.merge
        eval_sets["distance"] = eval_samples(cfg.data, "distance", args.count or cfg.data.eval_count, patch=patch, merge=merge)

    results = {}
    for level in SUITES[args.suite]:
        samples = eval_sets[level]
        results[level] = {"count": len(samples), "score": evaluate(model, samples)}
        logger.info("%s: %.4f over %d samples", level, results[level]["score"], len(samples))
    report = {
        "version": __version__,
        "config_hash": config_hash(cfg),
        "checkpoint": str(args.checkpoint),
        "step": step,
        "suites": results,
    }
    write_report_json(report, args.out)


def cmd_ablate(args):
    cfg = _config(args.config)
    variants = args.variants.split(",") if args.variants else list(DEFAULT_VARIANTS)
    # tap lists use commas too, so variants are separated by ';' when any carries '@'
    if args.variants and "@" in args.variants:
        variants = [v for v in args.variants.split(";") if v]
    report = run_ablation(cfg, variants, args.out, seeds=args.seeds, steps=args.steps, eval_count=args.count, jobs=args.jobs)
    if args.csv:
        write_report_csv(report, args.csv)


def cmd_sweep(args):
    cfg = _config(args.config)
    report = run_ablation(cfg, sweep_variants(args.taps), None, seeds=args.seeds, steps=args.steps, eval_count=args.count)
    write_report_json(report, args.out)


def cmd_similarity(args):
    if args.checkpoint:
        cfg, model, _ = _model_from_checkpoint(args.checkpoint)
    else:
        cfg = _config(args.config)
        model = GeoStackModel(cfg.model, seed=cfg.train.seed)
    encoder = ENCODER_TAGS[args.encoder]
    frames = FrameGeometry.plan(cfg.data, cfg.model.vision.patch, cfg.model.vision.merge)
    rendering = render_views(gen_scene(args.scene_seed, cfg.data), frames)
    pixels = rendering.geometry if encoder == "geometry" else rendering.vision

    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FileError(f"cannot create output directory {out_dir}: {e}")
    for depth in args.depths or list(cfg.analysis.depths):
        features = encoder_features(model, pixels, encoder, depth, view=cfg.analysis.view)
        heatmap = roi_similarity_map(features, args.roi or cfg.analysis.roi, encoder, depth)
        emit_heatmap(heatmap, out_dir / f"{args.encoder}_d{round_half_away(depth * 100)}.pgm")
    logger.info("wrote similarity maps to %s", out_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="geostack", description="Desk-scale geometry-language fusion experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    gen = commands.add_parser("gen-data", help="write synthetic samples as JSONL")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--level", choices=LEVELS + ("mix",), default="mix")
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen_data)

    train = commands.add_parser("train", help="train one model")
    train.add_argument("--config")
    train.add_argument("--out-dir")
    train.add_argument("--resume", help="checkpoint to continue from")
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = commands.add_parser("eval", help="score a checkpoint on held-out suites")
    evaluate_cmd.add_argument("--checkpoint", required=True)
    evaluate_cmd.add_argument("--suite", choices=tuple(SUITES), default="both")
    evaluate_cmd.add_argument("--count", type=int)
    evaluate_cmd.add_argument("--out", required=True)
    evaluate_cmd.set_defaults(handler=cmd_eval)

    ablate = commands.add_parser("ablate", help="train and score fusion variants side by side")
    ablate.add_argument("--config")
    ablate.add_argument("--variants", help="comma-separated kinds, or ';'-separated variants like 'stack@3,5,7;base'")
    ablate.add_argument("--seeds", type=_ints)
    ablate.add_argument("--steps", type=int)
    ablate.add_argument("--count", type=int, help="samples per evaluation suite")
    ablate.add_argument("--jobs", type=int, default=1)
    ablate.add_argument("--csv")
    ablate.add_argument("--out", required=True)
    ablate.set_defaults(handler=cmd_ablate)

    sweep = commands.add_parser("sweep", help="single-tap GVF sweep over geometry layers")
    sweep.add_argument("--config")
    sweep.add_argument("--taps", type=_ints, required=True)
    sweep.add_argument("--seeds", type=_ints)
    sweep.add_argument("--steps", type=int)
    sweep.add_argument("--count", type=int)
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(handler=cmd_sweep)

    similarity = commands.add_parser("similarity", help="ROI similarity heatmaps of encoder features")
    source = similarity.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint")
    source.add_argument("--config")
    similarity.add_argument("--scene-seed", type=int, default=0)
    similarity.add_argument("--encoder", choices=tuple(ENCODER_TAGS), default="geo")
    similarity.add_argument("--roi", type=_roi)
    similarity.add_argument("--depths", type=_floats)
    similarity.add_argument("--out-dir", required=True)
    similarity.set_defaults(handler=cmd_similarity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"E_USAGE: {e}", file=sys.stderr)
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.handler(args)
    except ConfigError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return 1
    except GeoStackError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
