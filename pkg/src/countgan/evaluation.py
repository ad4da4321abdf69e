"""Count metrics, Frechet feature distance and generation reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .datasets.core import CountVector, atomic_write_text
from .errors import (
    DimensionMismatch, EmptyInput, GridEmpty, InsufficientSamples, LengthMismatch,
    NumericalFailure, ValidationError,
)
from .models import CountPredictor, params_hash
from .training import GanState, count_head, images_to_tensor, predict_counts, tensor_to_images

RESIDUAL_TOL = 1e-3
PSD_TOL = 1e-6


# --------------------------------------------------------------------------- count metrics

def _as_matrix(rows, name: str) -> np.ndarray:
    if isinstance(rows, torch.Tensor):
        rows = rows.detach().cpu().numpy()
    if isinstance(rows, np.ndarray):
        arr = rows.astype(np.float64)
    else:
        rows = list(rows)
        arr = np.asarray([list(r.counts) if isinstance(r, CountVector) else list(r) for r in rows],
                         dtype=np.float64)
    if arr.ndim == 1 and arr.size:
        arr = arr[:, None]
    if arr.size == 0:
        raise EmptyInput(f"{name} is empty")
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be a list of vectors, got shape {arr.shape}")
    return arr


def _pair(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    p = _as_matrix(predictions, "predictions")
    t = _as_matrix(targets, "targets")
    if len(p) != len(t):
        raise LengthMismatch(f"{len(p)} predictions vs {len(t)} targets")
    if p.shape[1] != t.shape[1]:
        raise DimensionMismatch(f"prediction dim {p.shape[1]} vs target dim {t.shape[1]}")
    return p, t


def count_mse(predictions, targets) -> float:
    """Mean over samples and classes of the squared count error."""
    p, t = _pair(predictions, targets)
    return float(np.mean((p - t) ** 2))


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def discretize(predictions, max_count: int) -> np.ndarray:
    """Round half away from zero, then clamp to ``[0, max_count]``."""
    return np.clip(round_half_away(predictions), 0, max_count).astype(np.int64)


def count_accuracy(predictions, targets, max_count: int) -> tuple[np.ndarray, float]:
    """Per-class fraction of exactly recovered counts, and its mean over classes."""
    p, t = _pair(predictions, targets)
    hit = discretize(p, max_count) == t
    per_class = hit.mean(axis=0)
    return per_class, float(per_class.mean())


def accuracy_breakdown(predictions, targets, max_count: int) -> dict:
    """The three readings of "average count accuracy".

    ``per_class_mean`` averages classes, ``per_sample`` requires every class of
    a sample to be right, ``per_count_value`` averages per true count value.
    """
    p, t = _pair(predictions, targets)
    hit = discretize(p, max_count) == t
    per_value = {}
    for v in range(max_count + 1):
        mask = t == v
        if mask.any():
            per_value[v] = float(hit[mask].mean())
    return {
        "per_class_mean": float(hit.mean(axis=0).mean()),
        "per_sample": float(hit.all(axis=1).mean()),
        "per_count_value": per_value,
        "per_count_value_mean": float(np.mean(list(per_value.values()))),
    }


def count_histograms(predictions, targets, max_count: int) -> np.ndarray:
    """Tallies ``h[class, true, predicted]`` of discretized predictions."""
    p, t = _pair(predictions, targets)
    d = discretize(p, max_count)
    n = p.shape[1]
    hist = np.zeros((n, max_count + 1, max_count + 1), dtype=np.int64)
    ti = np.clip(t, 0, max_count).astype(np.int64)
    for k in range(n):
        np.add.at(hist[k], (ti[:, k], d[:, k]), 1)
    return hist


# --------------------------------------------------------------------------- Frechet distance

@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        self.validate()

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def validate(self) -> None:
        d = self.mu.shape[0]
        if self.mu.ndim != 1 or self.sigma.shape != (d, d):
            raise DimensionMismatch(f"mu {self.mu.shape} and sigma {self.sigma.shape} disagree")
        if self.sample_count < 2:
            raise ValidationError("FeatureStats needs sample_count >= 2")
        scale = max(np.linalg.norm(self.sigma), 1e-300)
        if np.abs(self.sigma - self.sigma.T).max() > 1e-9 * scale:
            raise ValidationError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.sigma).min() < -PSD_TOL * scale:
            raise ValidationError("covariance is not positive semi-definite")

    @classmethod
    def from_features(cls, features) -> "FeatureStats":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or len(f) < 2:
            raise InsufficientSamples(f"need at least 2 feature rows, got shape {f.shape}")
        sigma = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
        return cls(f.mean(axis=0), (sigma + sigma.T) / 2, len(f))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> tuple[float, float]:
    """Tr((s1 s2)^{1/2}) via the symmetric form s1^{1/2} s2 s1^{1/2}, plus its residual."""
    a = _psd_sqrt(s1)
    m = a @ s2 @ a
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0, None)
    root = (v * np.sqrt(w)) @ v.T
    norm = np.linalg.norm(m)
    residual = 0.0 if norm == 0 else float(np.linalg.norm(root @ root - m) / norm)
    return float(np.sqrt(w).sum()), residual


def gaussian_frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussians given by their feature statistics."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dims {a.dim} and {b.dim} differ")
    s1, s2 = a.sigma, b.sigma
    tr_sqrt, residual = _trace_sqrt_product(s1, s2)
    if not np.isfinite(tr_sqrt) or residual > RESIDUAL_TOL:
        eps = PSD_TOL * max(np.trace(s1), np.trace(s2), 1e-12)
        eye = np.eye(a.dim)
        tr_sqrt, residual = _trace_sqrt_product(s1 + eps * eye, s2 + eps * eye)
        if not np.isfinite(tr_sqrt) or residual > RESIDUAL_TOL:
            raise NumericalFailure(f"matrix square root residual {residual:.3g} after jitter")
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def _as_image_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.float()
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        if arr.ndim == 3:
            arr = arr[..., None]
        return images_to_tensor(arr)
    return torch.as_tensor(arr, dtype=torch.float32)


def extract_features(featurizer: CountPredictor, images) -> np.ndarray:
    x = _as_image_tensor(images)
    return predict_counts(featurizer.features, x).double().numpy()


def mini_fid(featurizer: CountPredictor, real_images, fake_images) -> float:
    """Frechet distance between count-predictor features of two image sets."""
    fr = extract_features(featurizer, real_images)
    ff = extract_features(featurizer, fake_images)
    need = fr.shape[1] + 1
    if len(fr) < need or len(ff) < need:
        raise InsufficientSamples(
            f"need at least {need} images per side for a full-rank covariance, "
            f"got {len(fr)} real and {len(ff)} fake")
    return gaussian_frechet_distance(FeatureStats.from_features(fr), FeatureStats.from_features(ff))


# --------------------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    count_mse: float
    per_class_accuracy: list[float]
    average_accuracy: float
    per_sample_accuracy: float
    per_count_value_accuracy: dict
    histograms: list
    class_names: list[str]
    max_count: int
    fid: float | None = None
    self_count_mse: float | None = None
    self_average_accuracy: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        accs = [*self.per_class_accuracy, self.average_accuracy, self.per_sample_accuracy]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValidationError("accuracies must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_count_value_accuracy"] = {str(k): v for k, v in self.per_count_value_accuracy.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def histograms_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "true_count", "predicted_count", "tally"])
        for k, name in enumerate(self.class_names):
            for t, row in enumerate(self.histograms[k]):
                for p, tally in enumerate(row):
                    w.writerow([name, t, p, tally])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "metrics.json", self.to_json())
        atomic_write_text(out / "histograms.csv", self.histograms_csv())
        return out / "metrics.json"


def _entry_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_grid(generator: Callable, latent_dim: int, count_grid: Sequence, samples_per_count: int,
                  seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Generate ``samples_per_count`` images per grid entry; entry ``i`` draws noise from its own seed."""
    images, conds = [], []
    with torch.no_grad():
        for i, c in enumerate(count_grid):
            counts = torch.tensor(list(c), dtype=torch.float32).repeat(samples_per_count, 1)
            rng = torch.Generator().manual_seed(_entry_seed(seed, i))
            z = torch.randn(samples_per_count, latent_dim, generator=rng)
            images.append(generator(z, counts))
            conds.append(counts)
    return torch.cat(images), torch.cat(conds)


def _module_hash(obj) -> str:
    return params_hash(obj) if isinstance(obj, torch.nn.Module) else type(obj).__name__


def evaluate_generation(gen_checkpoint, judge, count_grid: Sequence, samples_per_count: int, seed: int,
                        max_count: int | None = None, class_names: Sequence[str] | None = None,
                        real_reference=None, featurizer: CountPredictor | None = None) -> MetricsReport:
    """Generate images for each grid entry, judge them, and aggregate count metrics.

    Args:
        gen_checkpoint: a ``GanState``, a checkpoint path, or any generator module
            with a ``config.latent_dim`` and a ``(z, counts)`` forward.
        judge: independently trained count predictor (or any image -> counts callable).
        count_grid: CountVectors (or int sequences) to condition on.
        samples_per_count: images generated per grid entry.
        seed: noise seed; each grid entry derives its own stream from it.
        real_reference: optional real images for mini-FID against the generated set.
        featurizer: mini-FID feature network; defaults to ``judge``.
    """
    grid = list(count_grid)
    if not grid:
        raise GridEmpty("count grid is empty")
    if samples_per_count < 1:
        raise ValidationError("samples_per_count must be >= 1")
    state = GanState.load(gen_checkpoint) if isinstance(gen_checkpoint, (str, Path)) else gen_checkpoint
    generator = state.sampler if isinstance(state, GanState) else state
    if isinstance(generator, torch.nn.Module):
        generator.eval()
    cfg = generator.config
    max_count = cfg.max_count if max_count is None else max_count
    if class_names is None:
        first = grid[0]
        class_names = first.class_names if isinstance(first, CountVector) else \
            [str(k) for k in range(len(first))]
    images, conds = generate_grid(generator, cfg.latent_dim, grid, samples_per_count, seed)
    if isinstance(judge, torch.nn.Module):
        judge.eval()
    preds = predict_counts(judge, images)
    per_class, avg = count_accuracy(preds, conds, max_count)
    br = accuracy_breakdown(preds, conds, max_count)
    report = MetricsReport(
        count_mse=count_mse(preds, conds),
        per_class_accuracy=[float(a) for a in per_class],
        average_accuracy=avg,
        per_sample_accuracy=br["per_sample"],
        per_count_value_accuracy=br["per_count_value"],
        histograms=count_histograms(preds, conds, max_count).tolist(),
        class_names=list(class_names),
        max_count=int(max_count),
        provenance={
            "checkpoint_hash": _module_hash(generator),
            "predictor_hash": _module_hash(judge),
            "sample_count": int(len(images)),
            "samples_per_count": int(samples_per_count),
            "grid": [list(map(int, c)) for c in grid],
            "seed": int(seed),
        },
    )
    if isinstance(state, GanState):
        state.discriminator.eval()
        head = predict_counts(count_head(state.discriminator), images)
        report.self_count_mse = count_mse(head, conds)
        report.self_average_accuracy = count_accuracy(head, conds, max_count)[1]
    if real_reference is not None:
        report.fid = mini_fid(featurizer or judge, real_reference, images)
    return report


# --------------------------------------------------------------------------- contact sheets

def contact_sheet(images, captions: Sequence[str] | str, columns: int = 8, scale: int = 2,
                  caption_height: int = 12) -> Image.Image:
    """Tile images into one labeled sheet; ``images`` are uint8 (N, H, W, C) or a [-1, 1] tensor."""
    if isinstance(images, torch.Tensor):
        images = tensor_to_images(images)
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    n, h, w, c = images.shape
    if n == 0:
        raise EmptyInput("no images for contact sheet")
    if isinstance(captions, str):
        captions = [captions] * n
    if len(captions) != n:
        raise LengthMismatch(f"{n} images but {len(captions)} captions")
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    cw, ch = w * scale, h * scale + caption_height
    sheet = Image.new("RGB", (columns * cw, rows * ch), "white")
    draw = ImageDraw.Draw(sheet)
    for i in range(n):
        tile = images[i] if c == 3 else np.repeat(images[i], 3, axis=2)
        tile = Image.fromarray(tile, "RGB").resize((cw, h * scale), Image.NEAREST)
        x, y = (i % columns) * cw, (i // columns) * ch
        sheet.paste(tile, (x, y + caption_height))
        draw.text((x + 2, y), captions[i], fill="black")
    return sheet


def histogram_chart(histograms, class_names: Sequence[str], cell: int = 28) -> Image.Image:
    """One true-vs-predicted count heatmap per class, rows normalized, tallies printed in cells."""
    h = np.asarray(histograms, dtype=np.int64)
    if h.ndim != 3 or h.shape[1] != h.shape[2] or len(class_names) != h.shape[0]:
        raise DimensionMismatch(f"histograms of shape {h.shape} do not fit {len(class_names)} classes")
    n, k, _ = h.shape
    margin, gap = 18, 12
    width = n * (k * cell + margin + gap) + gap
    height = k * cell + 2 * margin + gap
    img = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(img)
    for c in range(n):
        x0 = gap + c * (k * cell + margin + gap) + margin
        y0 = margin + gap
        draw.text((x0, 2), f"class {class_names[c]}", fill="black")
        rows = h[c].sum(axis=1, keepdims=True)
        frac = np.divide(h[c], rows, out=np.zeros((k, k)), where=rows > 0)
        for t in range(k):
            draw.text((x0 - margin + 4, y0 + t * cell + cell // 3), str(t), fill="black")
            for q in range(k):
                shade = int(255 * (1 - frac[t, q]))
                box = (x0 + q * cell, y0 + t * cell, x0 + (q + 1) * cell - 1, y0 + (t + 1) * cell - 1)
                draw.rectangle(box, fill=(shade, shade, 255), outline="gray")
                draw.text((box[0] + 3, box[1] + cell // 3), str(h[c, t, q]),
                          fill="white" if shade < 128 else "black")
        for q in range(k):
            draw.text((x0 + q * cell + cell // 3, y0 + k * cell + 2), str(q), fill="black")
    return img


def table_image(csv_text: str, pad: int = 6) -> Image.Image:
    """Render a CSV table as a plain monospaced grid image."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        raise EmptyInput("empty table")
    cells = [[_fmt_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) if i < len(r) else 0 for r in cells) for i in range(len(cells[0]))]
    char_w, line_h = 6, 14
    width = sum(w * char_w + 2 * pad for w in widths)
    img = Image.new("RGB", (width + 1, len(cells) * line_h + 2 * pad), "white")
    draw = ImageDraw.Draw(img)
    for r, row in enumerate(cells):
        x = 0
        for i, w in enumerate(widths):
            text = row[i] if i < len(row) else ""
            draw.text((x + pad, pad + r * line_h), text, fill="black")
            x += w * char_w + 2 * pad
        if r == 0:
            draw.line((0, pad + line_h - 1, width, pad + line_h - 1), fill="black")
    return img


def _fmt_cell(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    return v if f.is_integer() and "." not in v else f"{f:.4f}"


__all__ = [
    "count_mse", "count_accuracy", "accuracy_breakdown", "count_histograms", "round_half_away",
    "discretize", "FeatureStats", "gaussian_frechet_distance", "extract_features", "mini_fid",
    "MetricsReport", "evaluate_generation", "generate_grid", "contact_sheet", "histogram_chart",
    "table_image",
]
