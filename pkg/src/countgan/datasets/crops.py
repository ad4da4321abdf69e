"""Exact-count patch cropping from bounding-box annotations."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from ..errors import InsufficientSamplesWarning, InvalidAnnotation, InvalidSpec, MissingImage
from .core import (
    CountVector, DatasetItem, DatasetManifest, admissible_combinations, save_png, write_manifest,
)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")


@dataclass(frozen=True)
class BoxAnnotation:
    image_id: str
    boxes: tuple[tuple[int, float, float, float, float], ...]

    def __post_init__(self):
        boxes = []
        for b in self.boxes:
            if len(b) != 5:
                raise InvalidAnnotation(f"{self.image_id}: box {b} needs 5 fields")
            k, x0, y0, x1, y1 = int(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4])
            if k < 0:
                raise InvalidAnnotation(f"{self.image_id}: negative class id in {b}")
            if not (x0 < x1 and y0 < y1):
                raise InvalidAnnotation(f"{self.image_id}: degenerate box {b}")
            boxes.append((k, x0, y0, x1, y1))
        object.__setattr__(self, "boxes", tuple(boxes))

    def as_array(self) -> np.ndarray:
        return np.array(self.boxes, dtype=np.float64).reshape(-1, 5)

    def check_bounds(self, width: int, height: int) -> None:
        for b in self.boxes:
            if b[1] < 0 or b[2] < 0 or b[3] > width or b[4] > height:
                raise InvalidAnnotation(f"{self.image_id}: box {b} outside {width}x{height} image")


def read_annotations(path) -> list[BoxAnnotation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(BoxAnnotation(str(rec["image_id"]), tuple(tuple(b) for b in rec["boxes"])))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise InvalidAnnotation(f"{path}:{lineno}: {exc}") from exc
    return out


def write_annotations(annotations: Sequence[BoxAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            rec = {"image_id": ann.image_id, "boxes": [list(b) for b in ann.boxes]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def visible_fractions(boxes: np.ndarray, window) -> np.ndarray:
    """Fraction of each box's area inside the window (x0, y0, x1, y1)."""
    wx0, wy0, wx1, wy1 = window
    iw = np.clip(np.minimum(boxes[:, 3], wx1) - np.maximum(boxes[:, 1], wx0), 0, None)
    ih = np.clip(np.minimum(boxes[:, 4], wy1) - np.maximum(boxes[:, 2], wy0), 0, None)
    area = (boxes[:, 3] - boxes[:, 1]) * (boxes[:, 4] - boxes[:, 2])
    return iw * ih / area


def _check_window(window, tau):
    x0, y0, x1, y1 = window
    if not (x0 < x1 and y0 < y1):
        raise InvalidSpec(f"empty window {window}")
    if not 0 < tau <= 1:
        raise InvalidSpec(f"tau must be in (0, 1], got {tau}")


def count_in_window(annotation: BoxAnnotation, window, class_names: Sequence[str],
                    min_visible_fraction: float = 0.5) -> CountVector:
    """Per class, the number of boxes with at least ``min_visible_fraction`` of their area in window.

    Boxes whose class id is not below ``len(class_names)`` are ignored.
    """
    _check_window(window, min_visible_fraction)
    num_classes = len(class_names)
    counts = [0] * num_classes
    boxes = annotation.as_array()
    if len(boxes):
        # tolerance absorbs rounding when a fraction equals tau exactly
        hit = visible_fractions(boxes, window) >= min_visible_fraction - 1e-12
        for k in boxes[hit, 0].astype(int):
            if k < num_classes:
                counts[k] += 1
    return CountVector(tuple(counts), tuple(class_names))


def window_is_ambiguous(annotation: BoxAnnotation, window, tau: float, tau_lo: float) -> bool:
    """True if some box is cut with a visible fraction strictly between tau_lo and tau."""
    boxes = annotation.as_array()
    if not len(boxes):
        return False
    f = visible_fractions(boxes, window)
    return bool(np.any((f > tau_lo + 1e-12) & (f < tau - 1e-12)))


@dataclass
class CropSpec:
    class_names: tuple[str, ...] = ("car", "person")
    patch_size: int = 64
    max_count: int = 5
    target_per_combination: int = 1000
    stride: int = 16
    tau: float = 0.5
    tau_lo: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if self.patch_size < 1 or self.stride < 1 or self.target_per_combination < 1:
            raise InvalidSpec("patch_size, stride and target_per_combination must be positive")
        if not 0 <= self.tau_lo < self.tau <= 1:
            raise InvalidSpec(f"need 0 <= tau_lo < tau <= 1, got {self.tau_lo}, {self.tau}")


def _resolve_image(image_store, image_id: str) -> Path:
    if isinstance(image_store, Mapping):
        if image_id not in image_store:
            raise MissingImage(f"no image for {image_id!r}")
        return Path(image_store[image_id])
    root = Path(image_store)
    direct = root / image_id
    if direct.suffix and direct.is_file():
        return direct
    for suffix in IMAGE_SUFFIXES:
        candidate = root / f"{image_id}{suffix}"
        if candidate.is_file():
            return candidate
    raise MissingImage(f"no image for {image_id!r} under {root}")


def _open_rgb(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except OSError as exc:
        raise MissingImage(f"cannot open {path}: {exc}") from exc


def crop_count_patches(annotations: Sequence[BoxAnnotation], image_store, spec: CropSpec,
                       out_dir=None) -> DatasetManifest:
    """Cut fixed-size patches whose per-class counts are unambiguous and bounded.

    Windows are enumerated on a stride grid over each source image. A window
    is dropped if any box is cut with visible fraction in (tau_lo, tau) or
    any class exceeds max_count. Up to ``target_per_combination`` windows are
    kept per count vector, chosen by a seeded shuffle. Combinations that fall
    short are reported with an :class:`InsufficientSamplesWarning`, also
    recorded under ``manifest.extra["shortfall"]``.
    """
    n = len(spec.class_names)
    p = spec.patch_size
    candidates: dict[tuple[int, ...], list[tuple[str, tuple[int, int, int, int]]]] = {}
    sources: dict[str, Path] = {}
    for ann in annotations:
        path = _resolve_image(image_store, ann.image_id)
        sources[ann.image_id] = path
        width, height = _image_size(path)
        if p > width or p > height:
            raise InvalidSpec(f"patch_size {p} exceeds image {ann.image_id} ({width}x{height})")
        ann.check_bounds(width, height)
        for y in range(0, height - p + 1, spec.stride):
            for x in range(0, width - p + 1, spec.stride):
                window = (x, y, x + p, y + p)
                if window_is_ambiguous(ann, window, spec.tau, spec.tau_lo):
                    continue
                counts = count_in_window(ann, window, spec.class_names, spec.tau).counts
                if max(counts) > spec.max_count:
                    continue
                candidates.setdefault(counts, []).append((ann.image_id, window))

    rng = np.random.default_rng(spec.seed)
    combos = admissible_combinations(n, spec.max_count)
    items: list[DatasetItem] = []
    shortfall = {}
    opened: dict[str, Image.Image] = {}
    for combo in combos:
        pool = candidates.get(combo, [])
        order = rng.permutation(len(pool)) if pool else []
        chosen = [pool[i] for i in order[:spec.target_per_combination]]
        if len(chosen) < spec.target_per_combination:
            shortfall[combo] = len(chosen)
        for image_id, window in chosen:
            rel = f"images/{len(items):06d}.png"
            if out_dir is not None:
                if image_id not in opened:
                    opened[image_id] = _open_rgb(sources[image_id])
                patch = np.asarray(opened[image_id].crop(window), dtype=np.uint8)
                save_png(patch, Path(out_dir) / rel)
            items.append(DatasetItem(rel, CountVector(combo, spec.class_names),
                                     {"image_id": image_id, "window": list(window)}))
    if shortfall:
        warnings.warn(InsufficientSamplesWarning(shortfall), stacklevel=2)
    manifest = DatasetManifest(
        items=items,
        class_names=spec.class_names,
        max_count=spec.max_count,
        resolution=(p, p, 3),
        seed=spec.seed,
        root=Path(out_dir) if out_dir is not None else None,
        extra={"kind": "crops", "tau": spec.tau, "tau_lo": spec.tau_lo,
               "shortfall": {" ".join(map(str, k)): v for k, v in sorted(shortfall.items())}},
    )
    if out_dir is not None:
        write_manifest(manifest, Path(out_dir))
    return manifest


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except OSError as exc:
        raise MissingImage(f"cannot open {path}: {exc}") from exc
