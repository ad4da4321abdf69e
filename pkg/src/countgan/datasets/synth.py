"""Synthetic count-labeled datasets: Multi-MNIST and 2-D ShapeCount.

Every image is rendered from its own random stream derived from
``(seed, item_index)``; objects are placed by rejection sampling so that
tight bounding boxes never intersect, and the placement log is stored in the
item's ``source`` record.
"""

from __future__ import annotations

import colorsys
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from ..errors import InvalidSpec, PlacementInfeasible
from .core import (
    CountVector, DatasetItem, DatasetManifest, admissible_combinations, item_rng, save_png,
    write_manifest,
)
from .glyphs import GlyphBank

log = logging.getLogger(__name__)

SHAPE_CLASSES = ("circle", "square", "triangle")
FIXED_COLORS = {"circle": (255, 0, 0), "square": (0, 255, 0), "triangle": (0, 0, 255)}


def boxes_overlap(a, b) -> bool:
    """Half-open boxes (x0, y0, x1, y1); touching edges do not overlap."""
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def place_boxes(sizes: Sequence[tuple[int, int]], height: int, width: int,
                rng: np.random.Generator, retry_budget: int = 1000,
                draws_per_object: int = 10) -> list[tuple[int, int, int, int]]:
    """Place (h, w) rectangles at uniform random positions without overlap.

    Objects are placed in order; if one cannot be placed within
    ``draws_per_object`` draws the whole layout is restarted. ``retry_budget``
    caps the number of restarts for the image.
    """
    for h, w in sizes:
        if h > height or w > width:
            raise PlacementInfeasible(f"object of size {h}x{w} does not fit {height}x{width}")
    for _ in range(retry_budget + 1):
        placed: list[tuple[int, int, int, int]] = []
        for h, w in sizes:
            for _ in range(draws_per_object):
                y = int(rng.integers(0, height - h + 1))
                x = int(rng.integers(0, width - w + 1))
                box = (x, y, x + w, y + h)
                if not any(boxes_overlap(box, other) for other in placed):
                    placed.append(box)
                    break
            else:
                break
        if len(placed) == len(sizes):
            return placed
    raise PlacementInfeasible(
        f"could not place {len(sizes)} objects in {height}x{width} within {retry_budget} retries")


def _instance_classes(counts: Sequence[int], rng: np.random.Generator) -> list[int]:
    classes = [k for k, c in enumerate(counts) for _ in range(c)]
    rng.shuffle(classes)
    return classes


def _run_items(render: Callable[[int], tuple[np.ndarray, DatasetItem]], n: int, workers: int | None):
    workers = workers or int(os.environ.get("MC2_NUM_WORKERS", "1"))
    if workers <= 1 or n < 2 * workers:
        return [render(i) for i in range(n)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(render, range(n), chunksize=max(1, n // (4 * workers))))


# --------------------------------------------------------------------------- Multi-MNIST

@dataclass
class MultiMnistSpec:
    class_subset: tuple[int, ...] = tuple(range(10))
    max_count: int = 2
    images_per_combination: int = 1000
    resolution: tuple[int, int] = (64, 64)
    seed: int = 0
    min_total: int = 0
    max_total: int | None = None
    # native glyph size is multiplied by glyph_scale, then by U(scale_jitter)
    glyph_scale: float = 1.0
    scale_jitter: tuple[float, float] = (0.8, 1.1)
    retry_budget: int = 1000

    def __post_init__(self):
        self.class_subset = tuple(int(k) for k in self.class_subset)
        self.resolution = tuple(int(v) for v in self.resolution)
        self.scale_jitter = tuple(float(v) for v in self.scale_jitter)
        if len(set(self.class_subset)) != len(self.class_subset) or not self.class_subset:
            raise InvalidSpec("class_subset must be non-empty without repeats")
        if self.images_per_combination < 1:
            raise InvalidSpec("images_per_combination must be >= 1")
        if self.max_count < 0 or self.glyph_scale <= 0:
            raise InvalidSpec("max_count must be >= 0 and glyph_scale > 0")
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise InvalidSpec(f"bad scale_jitter {self.scale_jitter}")

    def combinations(self):
        return admissible_combinations(len(self.class_subset), self.max_count,
                                       self.min_total, self.max_total)


def _resize_glyph(glyph: np.ndarray, scale: float) -> np.ndarray:
    h, w = glyph.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    out = np.asarray(Image.fromarray(glyph).resize((nw, nh), Image.BILINEAR), dtype=np.uint8)
    if not out.any():
        out = out.copy()
        out[nh // 2, nw // 2] = glyph.max()
    # re-tighten: bilinear can leave empty border rows
    ys, xs = np.nonzero(out)
    return out[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def render_multi_mnist(glyphs: GlyphBank, counts: Sequence[int], spec: MultiMnistSpec,
                       rng: np.random.Generator) -> tuple[np.ndarray, list[list]]:
    """Render one image with ``counts[i]`` glyphs of class ``spec.class_subset[i]``.

    Returns the (H, W) uint8 image and the placement log
    ``[class_index, x0, y0, x1, y1, glyph_index]`` per instance.
    """
    height, width = spec.resolution
    bitmaps, meta = [], []
    for k in _instance_classes(counts, rng):
        pool = glyphs.glyphs[spec.class_subset[k]]
        gi = int(rng.integers(len(pool)))
        scale = spec.glyph_scale * rng.uniform(*spec.scale_jitter)
        bitmaps.append(_resize_glyph(pool[gi], scale))
        meta.append((k, gi))
    boxes = place_boxes([b.shape for b in bitmaps], height, width, rng, spec.retry_budget)
    canvas = np.zeros((height, width), dtype=np.uint8)
    log_ = []
    for bmp, (k, gi), (x0, y0, x1, y1) in zip(bitmaps, meta, boxes):
        canvas[y0:y1, x0:x1] = bmp
        log_.append([k, x0, y0, x1, y1, gi])
    return canvas, log_


class _MnistRenderer:
    def __init__(self, glyphs, spec, combos, out_dir):
        self.glyphs, self.spec, self.combos, self.out_dir = glyphs, spec, combos, out_dir
        self.names = tuple(glyphs.class_names[k] for k in spec.class_subset)

    def __call__(self, index):
        spec = self.spec
        counts = self.combos[index // spec.images_per_combination]
        rng = item_rng(spec.seed, index)
        image, placements = render_multi_mnist(self.glyphs, counts, spec, rng)
        rel = f"images/{index:06d}.png"
        if self.out_dir is not None:
            save_png(image, Path(self.out_dir) / rel)
        item = DatasetItem(rel, CountVector(counts, self.names),
                           {"seed": spec.seed, "index": index, "placements": placements})
        return image, item


def generate_multi_mnist(glyphs: GlyphBank, spec: MultiMnistSpec, out_dir=None,
                         workers: int | None = None) -> DatasetManifest:
    """Generate ``images_per_combination`` images for every admissible count vector.

    With ``out_dir`` the PNGs and ``manifest.jsonl`` are written there (the
    manifest last, atomically).
    """
    glyphs.require(spec.class_subset)
    combos = spec.combinations()
    if not combos:
        raise InvalidSpec("no admissible count combinations")
    renderer = _MnistRenderer(glyphs, spec, combos, out_dir)
    results = _run_items(renderer, len(combos) * spec.images_per_combination, workers)
    manifest = DatasetManifest(
        items=[item for _, item in results],
        class_names=renderer.names,
        max_count=spec.max_count,
        resolution=(spec.resolution[0], spec.resolution[1], 1),
        seed=spec.seed,
        root=Path(out_dir) if out_dir is not None else None,
        extra={"kind": "multi_mnist"},
    )
    if out_dir is not None:
        write_manifest(manifest, Path(out_dir))
    log.info("generated %d Multi-MNIST images over %d combinations", len(manifest), len(combos))
    return manifest


# --------------------------------------------------------------------------- ShapeCount

@dataclass
class ShapeCountSpec:
    shape_classes: tuple[str, ...] = ("circle", "square")
    max_count: int = 3
    color_mode: str = "fixed_per_class"
    images_per_combination: int = 100
    resolution: tuple[int, int] = (32, 32)
    seed: int = 0
    min_total: int = 0
    max_total: int | None = None
    # side length of the shape's bounding square, inclusive range in pixels
    size_range: tuple[int, int] = (4, 7)
    retry_budget: int = 1000
    background: tuple[int, int, int] = field(default=(0, 0, 0))

    def __post_init__(self):
        self.shape_classes = tuple(self.shape_classes)
        self.resolution = tuple(int(v) for v in self.resolution)
        self.size_range = tuple(int(v) for v in self.size_range)
        unknown = [s for s in self.shape_classes if s not in SHAPE_CLASSES]
        if unknown or not self.shape_classes:
            raise InvalidSpec(f"unknown shape classes {unknown}; choose from {SHAPE_CLASSES}")
        if len(set(self.shape_classes)) != len(self.shape_classes):
            raise InvalidSpec("repeated shape class")
        if self.color_mode not in ("fixed_per_class", "random"):
            raise InvalidSpec(f"unknown color_mode {self.color_mode!r}")
        lo, hi = self.size_range
        if not 2 <= lo <= hi or hi > min(self.resolution):
            raise InvalidSpec(f"size_range {self.size_range} does not fit {self.resolution}")
        if self.images_per_combination < 1:
            raise InvalidSpec("images_per_combination must be >= 1")

    def combinations(self):
        return admissible_combinations(len(self.shape_classes), self.max_count,
                                       self.min_total, self.max_total)


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, box, color):
    x0, y0, x1, y1 = box
    # PIL coordinates are inclusive
    xy = (x0, y0, x1 - 1, y1 - 1)
    if kind == "circle":
        draw.ellipse(xy, fill=color)
    elif kind == "square":
        draw.rectangle(xy, fill=color)
    else:
        draw.polygon([(x0, y1 - 1), (x1 - 1, y1 - 1), ((x0 + x1 - 1) / 2, y0)], fill=color)


def render_shapecount(counts: Sequence[int], spec: ShapeCountSpec,
                      rng: np.random.Generator) -> tuple[np.ndarray, list[list]]:
    """Render one RGB image; log entries are ``[class_index, x0, y0, x1, y1, r, g, b]``."""
    height, width = spec.resolution
    classes = _instance_classes(counts, rng)
    lo, hi = spec.size_range
    sizes = [int(rng.integers(lo, hi + 1)) for _ in classes]
    boxes = place_boxes([(s, s) for s in sizes], height, width, rng, spec.retry_budget)
    im = Image.new("RGB", (width, height), spec.background)
    draw = ImageDraw.Draw(im)
    log_ = []
    for k, box in zip(classes, boxes):
        kind = spec.shape_classes[k]
        if spec.color_mode == "fixed_per_class":
            color = FIXED_COLORS[kind]
        else:
            hue = rng.uniform()
            color = tuple(int(round(255 * v)) for v in colorsys.hsv_to_rgb(hue, 1.0, 1.0))
        _draw_shape(draw, kind, box, color)
        log_.append([k, *box, *color])
    return np.asarray(im, dtype=np.uint8), log_


class _ShapeRenderer:
    def __init__(self, spec, combos, out_dir):
        self.spec, self.combos, self.out_dir = spec, combos, out_dir

    def __call__(self, index):
        spec = self.spec
        counts = self.combos[index // spec.images_per_combination]
        image, placements = render_shapecount(counts, spec, item_rng(spec.seed, index))
        rel = f"images/{index:06d}.png"
        if self.out_dir is not None:
            save_png(image, Path(self.out_dir) / rel)
        item = DatasetItem(rel, CountVector(counts, spec.shape_classes),
                           {"seed": spec.seed, "index": index, "placements": placements})
        return image, item


def generate_shapecount(spec: ShapeCountSpec, out_dir=None, workers: int | None = None) -> DatasetManifest:
    combos = spec.combinations()
    if not combos:
        raise InvalidSpec("no admissible count combinations")
    renderer = _ShapeRenderer(spec, combos, out_dir)
    results = _run_items(renderer, len(combos) * spec.images_per_combination, workers)
    manifest = DatasetManifest(
        items=[item for _, item in results],
        class_names=spec.shape_classes,
        max_count=spec.max_count,
        resolution=(spec.resolution[0], spec.resolution[1], 3),
        seed=spec.seed,
        root=Path(out_dir) if out_dir is not None else None,
        extra={"kind": "shapecount", "color_mode": spec.color_mode},
    )
    if out_dir is not None:
        write_manifest(manifest, Path(out_dir))
    return manifest
