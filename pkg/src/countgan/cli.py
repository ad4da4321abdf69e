"""``countgan`` command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from .config import RunConfig, parse_exclusions
from .datasets import (
    GlyphBank, crop_count_patches, generate_multi_mnist, generate_shapecount, read_annotations,
    read_manifest, split_holdout, write_manifest,
)
from .datasets.core import CountVector
from .errors import CountGANError, InvalidConfig, ValidationError
from .evaluation import contact_sheet, evaluate_generation, generate_grid, histogram_chart, table_image
from .experiments import (
    TransferReport, run_ablation_sweep, run_augmentation_study, run_count_transfer, split_validation,
)
from .models import load_params, save_params
from .training import GanState, MetricsLogger, load_training_data, train, train_count_predictor

log = logging.getLogger("countgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _workers() -> int | None:
    v = os.environ.get("MC2_NUM_WORKERS")
    return int(v) if v else None


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.override(args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    cfg.set("output_dir", str(args.out))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_counts(text: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(v) for v in text.replace(" ", ",").split(",") if v)
    except ValueError:
        raise InvalidConfig(f"--counts expects comma-separated integers, got {text!r}") from None
    if not counts or min(counts) < 0:
        raise InvalidConfig(f"bad count vector {text!r}")
    return counts


# --------------------------------------------------------------------------- dataset

def cmd_gen_mnist(args, cfg: RunConfig) -> None:
    spec = cfg.section("mnist")
    glyphs = GlyphBank.from_dir(cfg.get("data.glyphs"))
    out = _out(args)
    generate_multi_mnist(glyphs, spec, out_dir=out, workers=_workers())
    cfg.write(out, ["data", "mnist"])


def cmd_gen_shapes(args, cfg: RunConfig) -> None:
    spec = cfg.section("shapes")
    out = _out(args)
    generate_shapecount(spec, out_dir=out, workers=_workers())
    cfg.write(out, ["shapes"])


def cmd_crop(args, cfg: RunConfig) -> None:
    if args.annotations:
        cfg.set("data.annotations", args.annotations)
    if args.images:
        cfg.set("data.images", args.images)
    ann, images = cfg.get("data.annotations"), cfg.get("data.images")
    if not ann or not images:
        raise InvalidConfig("crop needs --annotations and --images (or data.annotations / data.images)")
    spec = cfg.section("crop")
    annotations = read_annotations(ann)
    out = _out(args)
    crop_count_patches(annotations, images, spec, out_dir=out)
    cfg.write(out, ["data", "crop"])


def cmd_split(args, cfg: RunConfig) -> None:
    if args.exclude:
        cfg.set("split.exclusions", ";".join(args.exclude))
    if args.mode:
        cfg.set("split.mode", args.mode)
    manifest = read_manifest(args.manifest)
    train_m, held = split_holdout(manifest, parse_exclusions(cfg.get("split.exclusions")),
                                  cfg.get("split.mode"))
    out = _out(args)
    write_manifest(train_m, out / "train")
    write_manifest(held, out / "heldout")
    cfg.write(out, ["split"])


# --------------------------------------------------------------------------- train / sample / eval

def cmd_train(args, cfg: RunConfig) -> None:
    config = cfg.section("train")
    manifest = read_manifest(args.manifest)
    state = GanState.load(args.resume) if args.resume else None
    out = _out(args)
    cfg.write(out, ["train"])
    train(manifest, config, [MetricsLogger(out / "metrics.jsonl")], out_dir=out, state=state)


def cmd_sample(args, cfg: RunConfig) -> None:
    state = GanState.load(args.checkpoint)
    g = state.sampler
    g.eval()
    grid = [_parse_counts(c) for c in args.counts]
    for c in grid:
        if len(c) != g.config.num_classes:
            raise InvalidConfig(f"count vector {list(c)} has {len(c)} entries; "
                                f"the generator expects {g.config.num_classes}")
        if max(c) > g.config.max_count:
            raise InvalidConfig(f"count vector {list(c)} exceeds max_count {g.config.max_count}")
    images, _ = generate_grid(g, g.config.latent_dim, grid, args.n, cfg.seed)
    captions = [str(CountVector(c)) for c in grid for _ in range(args.n)]
    out = _out(args)
    sheet = contact_sheet(images, captions, columns=args.n)
    sheet.save(out / "samples.png", format="PNG")
    cfg.write(out, [])


def _judge(args, cfg: RunConfig, manifest, out: Path):
    if args.judge:
        return load_params(args.judge)
    pcfg = cfg.section("predictor")
    fit, _ = split_validation(manifest, 0.2, cfg.seed)
    x, y = load_training_data(fit)
    judge = train_count_predictor(x, y, pcfg, manifest.max_count)
    save_params(judge, out / "judge", seed=cfg.seed)
    return judge


def cmd_eval(args, cfg: RunConfig) -> None:
    manifest = read_manifest(args.manifest)
    out = _out(args)
    cfg.write(out, ["predictor", "eval"])
    judge = _judge(args, cfg, manifest, out)
    state = GanState.load(args.checkpoint)
    grid = [manifest.count_vector(c) for c in manifest.combinations()]
    real = None
    if cfg.get("eval.fid"):
        _, ref = split_validation(manifest, 0.2, cfg.seed)
        real = load_training_data(ref)[0]
    report = evaluate_generation(state, judge, grid, cfg.get("eval.samples_per_count"),
                                 cfg.get("eval.seed"), real_reference=real)
    report.write(out)
    print(f"count_mse={report.count_mse:.4f} average_accuracy={report.average_accuracy:.4f}"
          + (f" mini_fid={report.fid:.4f}" if report.fid is not None else ""))


# --------------------------------------------------------------------------- experiments

def cmd_transfer(args, cfg: RunConfig) -> None:
    if args.exclude:
        cfg.set("split.exclusions", ";".join(args.exclude))
    if args.mode:
        cfg.set("split.mode", args.mode)
    manifest = read_manifest(args.manifest)
    out = _out(args)
    cfg.write(out, ["split", "train", "experiment"])
    report: TransferReport = run_count_transfer(
        manifest, parse_exclusions(cfg.get("split.exclusions")), cfg.get("split.mode"),
        cfg.section("train"), cfg.get("experiment.seeds"),
        validation_fraction=cfg.get("experiment.validation_fraction"), out_dir=out)
    print(report.to_json(), end="")


def cmd_ablation(args, cfg: RunConfig) -> None:
    manifest = read_manifest(args.manifest)
    out = _out(args)
    cfg.write(out, ["train", "predictor", "eval", "experiment"])
    judge = _judge(args, cfg, manifest, out)
    real = None
    if cfg.get("eval.fid"):
        _, ref = split_validation(manifest, 0.2, cfg.seed)
        real = load_training_data(ref)[0]
    table = run_ablation_sweep(manifest, cfg.section("train"), cfg.get("experiment.ablation_axes"),
                               cfg.get("experiment.seeds"), judge,
                               samples_per_count=cfg.get("eval.samples_per_count"),
                               eval_seed=cfg.get("eval.seed"), real_reference=real, out_dir=out)
    print(table.to_csv(), end="")


def cmd_augment(args, cfg: RunConfig) -> None:
    manifest = read_manifest(args.manifest)
    test = read_manifest(args.test_manifest) if args.test_manifest else None
    design = cfg.section("augment")
    design.validate()
    out = _out(args)
    cfg.write(out, ["predictor", "experiment", "augment"])
    report = run_augmentation_study(manifest, args.checkpoint, cfg.section("predictor"), design,
                                    cfg.get("experiment.seeds"), test_manifest=test, out_dir=out)
    print(report.to_csv(), end="")


def cmd_plot(args, cfg: RunConfig) -> None:
    if not args.metrics and not args.table:
        raise InvalidConfig("plot needs --metrics and/or --table")
    out = _out(args)
    if args.metrics:
        data = json.loads(Path(args.metrics).read_text())
        histogram_chart(data["histograms"], data["class_names"]).save(out / "histograms.png", format="PNG")
    for path in args.table or []:
        path = Path(path)
        text = path.read_text()
        table_image(text).save(out / f"{path.stem}.png", format="PNG")


# --------------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, out_required: bool = True, out_default=None) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="overrides the config's seed")
    p.add_argument("--out", required=out_required, default=out_default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="countgan", description="Count-conditioned GAN toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="build datasets").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = ds.add_parser("gen-mnist", help="synthesize Multi-MNIST")
    _common(p)
    p.set_defaults(func=cmd_gen_mnist)
    p = ds.add_parser("gen-shapes", help="synthesize ShapeCount")
    _common(p)
    p.set_defaults(func=cmd_gen_shapes)
    p = ds.add_parser("crop", help="cut exact-count patches from box annotations")
    _common(p)
    p.add_argument("--annotations")
    p.add_argument("--images")
    p.set_defaults(func=cmd_crop)
    p = ds.add_parser("split", help="hold out count combinations")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--exclude", action="append", metavar="CLASS:COUNT")
    p.add_argument("--mode", choices=["interpolation", "extrapolation"])
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the GAN")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write a labeled contact sheet")
    _common(p, out_required=False, out_default="samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--counts", action="append", required=True, help='count vector, e.g. "2,1"')
    p.add_argument("--n", type=int, default=8, help="images per count vector")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="judge generated samples")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="real data: count grid, judge training, FID reference")
    p.add_argument("--judge", help="saved count predictor; trained from --manifest when omitted")
    p.set_defaults(func=cmd_eval)

    ex = sub.add_parser("experiment", help="scripted studies").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = ex.add_parser("transfer", help="count interpolation / extrapolation")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--exclude", action="append", metavar="CLASS:COUNT")
    p.add_argument("--mode", choices=["interpolation", "extrapolation"])
    p.set_defaults(func=cmd_transfer)
    p = ex.add_parser("ablation", help="ablation sweep")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--judge")
    p.set_defaults(func=cmd_ablation)
    p = ex.add_parser("augment", help="real / synthetic count-predictor study")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-manifest")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("plot", help="render histograms and result tables as PNG")
    _common(p)
    p.add_argument("--metrics", help="metrics.json written by eval")
    p.add_argument("--table", action="append", help="CSV table from an experiment")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "n", 1) < 1:
            raise UsageError("--n must be >= 1")
        cfg = _load_config(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, cfg)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CountGANError, OSError, RuntimeError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
