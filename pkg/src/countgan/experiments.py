"""Count transfer, ablation and real/synthetic augmentation experiments."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets.core import DatasetManifest, atomic_write_text
from .datasets.splits import MODES, split_holdout
from .errors import FractionError, InvalidConfig, InvalidExclusion, ModeViolation
from .evaluation import count_accuracy, count_mse, evaluate_generation
from .training import (
    GanState, PredictorConfig, TrainConfig, count_head, generate, load_training_data,
    predict_counts, train, train_count_predictor,
)

log = logging.getLogger(__name__)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _permutation(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), n])).permutation(n)


def split_validation(manifest: DatasetManifest, fraction: float, seed: int):
    """Seeded (train, validation) split of a manifest's items."""
    if not 0.0 < fraction < 1.0:
        raise InvalidConfig(f"validation fraction must be in (0, 1), got {fraction}")
    perm = _permutation(len(manifest), seed)
    n_val = max(1, int(round(fraction * len(manifest))))
    val = sorted(perm[:n_val].tolist())
    rest = sorted(perm[n_val:].tolist())
    return (manifest.subset([manifest.items[i] for i in rest]),
            manifest.subset([manifest.items[i] for i in val]))


def _head_mse(state: GanState, images: torch.Tensor, counts: torch.Tensor) -> float:
    state.discriminator.eval()
    return count_mse(predict_counts(count_head(state.discriminator), images), counts)


# --------------------------------------------------------------------------- transfer

@dataclass
class TransferReport:
    mse_seen: float
    mse_interpolation: float | None
    mse_extrapolation: float | None
    per_seed: dict
    config: dict

    def __post_init__(self):
        for k, v in self.per_seed.items():
            if any(x < 0 for x in v):
                raise ValueError(f"negative MSE in {k}")

    @classmethod
    def combine(cls, *reports: "TransferReport") -> "TransferReport":
        """Merge single-mode reports; seen errors are pooled across them."""
        per_seed = {"seen": []}
        for r in reports:
            per_seed["seen"].extend(r.per_seed["seen"])
            for mode in MODES:
                if mode in r.per_seed:
                    per_seed[mode] = list(r.per_seed[mode])
        means = {m: (float(np.mean(per_seed[m])) if m in per_seed else None) for m in MODES}
        return cls(float(np.mean(per_seed["seen"])), means["interpolation"], means["extrapolation"],
                   per_seed, {"combined": [r.config for r in reports]})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return _dump(self.to_dict())


def run_count_transfer(base_manifest: DatasetManifest, exclusions: Sequence[tuple[int, int]], mode: str,
                       train_config: TrainConfig, seeds: Sequence[int], validation_fraction: float = 0.1,
                       out_dir=None) -> TransferReport:
    """Train on a split missing the excluded count values and score the count head on both sides.

    The seen error uses a held-in validation slice of the training split; the
    unseen error uses every held-out item.
    """
    if mode not in MODES:
        raise ModeViolation(f"unknown mode {mode!r}")
    if not exclusions:
        raise InvalidExclusion("a transfer experiment needs at least one exclusion")
    seeds = list(seeds)
    if not seeds:
        raise InvalidConfig("at least one seed is required")
    train_split, heldout = split_holdout(base_manifest, exclusions, mode)
    xh, yh = load_training_data(heldout)
    seen, unseen = [], []
    for seed in seeds:
        fit, val = split_validation(train_split, validation_fraction, seed)
        cfg = dataclasses.replace(train_config, seed=int(seed))
        run_dir = None if out_dir is None else Path(out_dir) / f"{mode}_seed{seed}"
        state = train(fit, cfg, out_dir=run_dir)
        xv, yv = load_training_data(val)
        seen.append(_head_mse(state, xv, yv))
        unseen.append(_head_mse(state, xh, yh))
        log.info("transfer %s seed %d: seen %.4f unseen %.4f", mode, seed, seen[-1], unseen[-1])
    report = TransferReport(
        mse_seen=float(np.mean(seen)),
        mse_interpolation=float(np.mean(unseen)) if mode == "interpolation" else None,
        mse_extrapolation=float(np.mean(unseen)) if mode == "extrapolation" else None,
        per_seed={"seen": seen, mode: unseen, "seeds": [int(s) for s in seeds]},
        config={"mode": mode, "exclusions": [list(map(int, e)) for e in exclusions],
                "train_config": train_config.to_dict(), "validation_fraction": validation_fraction,
                "train_items": len(train_split), "heldout_items": len(heldout)},
    )
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / f"transfer_{mode}.json", report.to_json())
    return report


def sign_test_p(deltas: Sequence[float]) -> float:
    """One-sided sign test p-value for "deltas tend to be positive" (ties dropped)."""
    from scipy.stats import binomtest

    nz = [d for d in deltas if d != 0]
    if not nz:
        return 1.0
    return float(binomtest(sum(d > 0 for d in nz), len(nz), 0.5, alternative="greater").pvalue)


# --------------------------------------------------------------------------- ablation

ABLATION_AXES = {
    "count_loss": ("w/o count loss", {"count_loss_enabled": False}),
    "weight_sharing": ("w/o weight sharing", {"weight_sharing_enabled": False}),
    "label_mapping": ("w/o label mapping", {"per_layer_count_injection": False}),
    "backbone": ("plain backbone", {"backbone_kind": "plain"}),
}


@dataclass
class AblationRow:
    variant: str
    seed: int
    count_mse: float
    average_accuracy: float
    mini_fid: float | None
    self_count_mse: float | None


@dataclass
class AblationTable:
    rows: list[AblationRow]
    config: dict = field(default_factory=dict)

    def mean(self, variant: str, key: str = "count_mse") -> float:
        return float(np.mean([getattr(r, key) for r in self.rows if r.variant == variant]))

    def to_dict(self) -> dict:
        return {"rows": [dataclasses.asdict(r) for r in self.rows], "config": self.config}

    def to_json(self) -> str:
        return _dump(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in dataclasses.fields(AblationRow)]
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(dataclasses.asdict(r))
        return buf.getvalue()


def ablation_variants(base_config: TrainConfig, axes: Sequence[str]) -> list[tuple[str, TrainConfig]]:
    if not axes:
        raise InvalidConfig("ablation needs at least one axis")
    unknown = set(axes) - set(ABLATION_AXES)
    if unknown:
        raise InvalidConfig(f"unknown ablation axes {sorted(unknown)}; choose from {sorted(ABLATION_AXES)}")
    out = [("full", base_config)]
    for axis in axes:
        name, change = ABLATION_AXES[axis]
        out.append((name, dataclasses.replace(base_config, **change)))
    return out


def run_ablation_sweep(manifest: DatasetManifest, base_config: TrainConfig, axes: Sequence[str],
                       seeds: Sequence[int], judge, samples_per_count: int = 50, eval_seed: int = 0,
                       real_reference=None, out_dir=None) -> AblationTable:
    """Train the full model and each single-axis variant per seed and evaluate generation."""
    variants = ablation_variants(base_config, axes)
    grid = [manifest.count_vector(c) for c in manifest.combinations()]
    data = load_training_data(manifest)
    rows = []
    for name, cfg in variants:
        for seed in seeds:
            run_dir = None if out_dir is None else Path(out_dir) / name.replace(" ", "_").replace("/", "") / f"seed{seed}"
            state = train(manifest, dataclasses.replace(cfg, seed=int(seed)), out_dir=run_dir, data=data)
            rep = evaluate_generation(state, judge, grid, samples_per_count, eval_seed,
                                      real_reference=real_reference)
            rows.append(AblationRow(name, int(seed), rep.count_mse, rep.average_accuracy, rep.fid,
                                    rep.self_count_mse))
            log.info("ablation %s seed %d: mse %.4f", name, seed, rep.count_mse)
    table = AblationTable(rows, {"axes": list(axes), "seeds": [int(s) for s in seeds],
                                 "base_config": base_config.to_dict(),
                                 "samples_per_count": samples_per_count, "eval_seed": eval_seed})
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "ablation.json", table.to_json())
        atomic_write_text(Path(out_dir) / "ablation.csv", table.to_csv())
    return table


# --------------------------------------------------------------------------- augmentation

@dataclass
class AugmentationDesign:
    """Cell layout for the real/synthetic study.

    In ``replacement`` mode each fraction ``x`` is the real share of a training
    set of ``train_size`` images; the remainder is synthetic, and an ``x`` real
    only baseline is added. In ``additive`` mode each fraction is the number of
    extra images relative to ``train_size``, added either as classically
    augmented real copies or as synthetic images.
    """

    mode: str = "replacement"
    fractions: tuple[float, ...] = (1.0, 0.5, 0.0)
    augmentation_ops: tuple[str, ...] = ("hflip", "translate")
    train_size: int = 1000
    max_translate: float = 0.1
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.mode not in ("additive", "replacement"):
            raise InvalidConfig(f"unknown augmentation mode {self.mode!r}")
        if not self.fractions:
            raise FractionError("no fractions given")
        if len(set(self.fractions)) != len(self.fractions):
            raise FractionError("fractions must be distinct")
        hi = 1.0 if self.mode == "replacement" else float("inf")
        for f in self.fractions:
            if not 0.0 <= f <= hi:
                raise FractionError(f"fraction {f} outside [0, {hi}]")
        unknown = set(self.augmentation_ops) - {"hflip", "translate"}
        if unknown:
            raise InvalidConfig(f"unknown augmentation ops {sorted(unknown)}")
        if self.train_size < 1 or not 0.0 <= self.max_translate <= 0.5:
            raise InvalidConfig("bad train_size or max_translate")


@dataclass
class AugmentationRow:
    cell: str
    seed: int
    real_fraction: float
    synthetic_fraction: float
    augmented: bool
    real_images: int
    synthetic_images: int
    augmented_images: int
    average_accuracy: float

    def __post_init__(self):
        if not (0 <= self.real_fraction <= 1 and 0 <= self.average_accuracy <= 1):
            raise ValueError("fraction or accuracy out of [0, 1]")


@dataclass
class AugmentationReport:
    rows: list[AugmentationRow]
    config: dict = field(default_factory=dict)
    label_noise_rate: float | None = None

    def mean(self, cell: str) -> float:
        vals = [r.average_accuracy for r in self.rows if r.cell == cell]
        if not vals:
            raise KeyError(cell)
        return float(np.mean(vals))

    def by_seed(self, cell: str) -> list[float]:
        return [r.average_accuracy for r in self.rows if r.cell == cell]

    def to_dict(self) -> dict:
        return {"rows": [dataclasses.asdict(r) for r in self.rows], "config": self.config,
                "label_noise_rate": self.label_noise_rate}

    def to_json(self) -> str:
        return _dump(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in dataclasses.fields(AugmentationRow)]
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(dataclasses.asdict(r))
        return buf.getvalue()


def classic_augment(images: torch.Tensor, ops: Sequence[str], max_translate: float,
                    rng: torch.Generator) -> torch.Tensor:
    """Random horizontal flip and integer translation, filling with background (-1)."""
    out = images.clone()
    n, _, h, w = out.shape
    if "hflip" in ops:
        flip = torch.rand(n, generator=rng) < 0.5
        out[flip] = out[flip].flip(-1)
    if "translate" in ops:
        mx, my = int(max_translate * w), int(max_translate * h)
        dx = torch.randint(-mx, mx + 1, (n,), generator=rng)
        dy = torch.randint(-my, my + 1, (n,), generator=rng)
        shifted = torch.full_like(out, -1.0)
        for i in range(n):
            x, y = int(dx[i]), int(dy[i])
            src = out[i, :, max(0, -y):h - max(0, y), max(0, -x):w - max(0, x)]
            shifted[i, :, max(0, y):max(0, y) + src.shape[1], max(0, x):max(0, x) + src.shape[2]] = src
        out = shifted
    return out


def sample_conditions(counts: torch.Tensor, n: int, seed: int) -> torch.Tensor:
    """Draw ``n`` count rows from the empirical distribution of ``counts``."""
    rng = torch.Generator().manual_seed(int(seed))
    return counts[torch.randint(0, len(counts), (n,), generator=rng)]


def _cells(design: AugmentationDesign) -> list[tuple[str, float, float, bool]]:
    """(cell name, real fraction, synthetic fraction, classically augmented)."""
    cells = []
    if design.mode == "replacement":
        for x in sorted(design.fractions, reverse=True):
            if x == 1.0:
                cells.append(("100% real", 1.0, 0.0, False))
            elif x == 0.0:
                cells.append(("synthetic only", 0.0, 1.0, False))
            else:
                pct = f"{x * 100:g}%"
                cells.append((f"{pct} real + {(1 - x) * 100:g}% synthetic", x, 1.0 - x, False))
                cells.append((f"{pct} real only", x, 0.0, False))
    else:
        cells.append(("real only", 1.0, 0.0, False))
        for f in sorted(design.fractions):
            cells.append((f"real + {f * 100:g}% augmented", 1.0, f, True))
            cells.append((f"real + {f * 100:g}% synthetic", 1.0, f, False))
    return cells


def run_augmentation_study(real_manifest: DatasetManifest, gen_checkpoint, judge_config: PredictorConfig,
                           design: AugmentationDesign, seeds: Sequence[int],
                           test_manifest: DatasetManifest | None = None, label_judge=None,
                           out_dir=None) -> AugmentationReport:
    """Train a count predictor per (cell, seed) and report its accuracy on real test images.

    Synthetic images are labeled with the counts they were conditioned on.
    Without ``test_manifest``, a seeded ``design.test_fraction`` slice of
    ``real_manifest`` is held out for testing. With ``label_judge``, the
    synthetic labels are re-judged and the disagreement rate is reported.
    """
    design.validate()
    seeds = list(seeds)
    if not seeds:
        raise InvalidConfig("at least one seed is required")
    state = GanState.load(gen_checkpoint) if isinstance(gen_checkpoint, (str, Path)) else gen_checkpoint
    generator = state.sampler if isinstance(state, GanState) else state
    generator.eval()
    gcfg = generator.config
    if gcfg.num_classes != real_manifest.num_classes or gcfg.max_count != real_manifest.max_count:
        raise InvalidConfig("generator and real manifest disagree on the class/count space")
    if test_manifest is None:
        pool, test_manifest = split_validation(real_manifest, design.test_fraction, 0)
    else:
        pool = real_manifest
    x_pool, y_pool = load_training_data(pool)
    x_test, y_test = load_training_data(test_manifest)
    n = design.train_size
    max_extra = max(round(f * n) for f in design.fractions) if design.mode == "additive" else n
    if len(pool) < n:
        raise FractionError(f"train_size {n} exceeds the {len(pool)} available real images")
    rows = []
    noise = []
    for seed in seeds:
        perm = torch.from_numpy(_permutation(len(pool), seed))
        syn_counts = sample_conditions(y_pool, max_extra, seed)
        syn_images = generate(generator, syn_counts, seed)
        if label_judge is not None:
            judged = predict_counts(label_judge, syn_images)
            noise.append(1.0 - count_accuracy(judged, syn_counts, gcfg.max_count)[1])
        aug_rng = torch.Generator().manual_seed(int(seed))
        for cell, rf, sf, augmented in _cells(design):
            if design.mode == "replacement":
                n_real = int(round(rf * n))
                n_extra = n - n_real if sf > 0 else 0
            else:
                n_real, n_extra = n, int(round(sf * n))
            real_idx = perm[:n_real]
            xs, ys = [x_pool[real_idx]], [y_pool[real_idx]]
            if n_extra and augmented:
                src = perm[torch.arange(n_extra) % n_real]
                xs.append(classic_augment(x_pool[src], design.augmentation_ops, design.max_translate, aug_rng))
                ys.append(y_pool[src])
            elif n_extra:
                xs.append(syn_images[:n_extra])
                ys.append(syn_counts[:n_extra])
            x, y = torch.cat(xs), torch.cat(ys)
            predictor = train_count_predictor(x, y, dataclasses.replace(judge_config, seed=int(seed)),
                                              real_manifest.max_count)
            acc = count_accuracy(predict_counts(predictor, x_test), y_test, real_manifest.max_count)[1]
            syn_n, aug_n = (0, n_extra) if augmented else (n_extra, 0)
            rows.append(AugmentationRow(cell, int(seed), rf, sf, augmented, n_real, syn_n, aug_n, acc))
            log.info("augmentation %s seed %d: accuracy %.4f", cell, seed, acc)
    report = AugmentationReport(rows, {
        "design": dataclasses.asdict(design), "predictor": judge_config.to_dict(),
        "seeds": [int(s) for s in seeds], "test_items": len(test_manifest),
    }, float(np.mean(noise)) if noise else None)
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "augmentation.json", report.to_json())
        atomic_write_text(Path(out_dir) / "augmentation.csv", report.to_csv())
    return report


__all__ = [
    "TransferReport", "run_count_transfer", "split_validation", "sign_test_p", "ABLATION_AXES",
    "AblationRow", "AblationTable", "ablation_variants", "run_ablation_sweep", "AugmentationDesign",
    "AugmentationRow", "AugmentationReport", "classic_augment", "sample_conditions",
    "run_augmentation_study",
]
