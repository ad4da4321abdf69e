"""Count vectors, manifests and their line-delimited file format."""

from __future__ import annotations

import itertools
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image

from ..errors import DataError, InvalidSpec, ValidationError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class CountVector:
    """Per-class object multiplicities, e.g. ``[2, 1]`` for 2 cars and 1 person."""

    counts: tuple[int, ...]
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        # without names, classes are labeled by index
        names = tuple(str(n) for n in self.class_names) or tuple(str(k) for k in range(len(counts)))
        if len(counts) != len(names):
            raise ValidationError(
                f"count vector has {len(counts)} entries for {len(names)} classes")
        if any(c < 0 for c in counts):
            raise ValidationError(f"negative count in {list(counts)}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", names)

    def __len__(self):
        return len(self.counts)

    def __iter__(self):
        return iter(self.counts)

    def __getitem__(self, i):
        return self.counts[i]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def check_bounds(self, max_count: int) -> None:
        if any(c > max_count for c in self.counts):
            raise ValidationError(f"count vector {list(self.counts)} exceeds max_count={max_count}")

    def normalized(self, max_count: int) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float32) / float(max_count)

    def __str__(self):
        return "[" + " ".join(str(c) for c in self.counts) + "]"


@dataclass(frozen=True)
class DatasetItem:
    image_path: str
    counts: CountVector
    source: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"file": self.image_path, "counts": list(self.counts.counts), "source": self.source}


@dataclass
class DatasetManifest:
    """A count-labeled image corpus.

    ``root`` is where ``image_path`` entries resolve; it is not serialized.
    """

    items: list[DatasetItem]
    class_names: tuple[str, ...]
    max_count: int
    resolution: tuple[int, int, int]
    seed: int
    schema_version: int = SCHEMA_VERSION
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.resolution = tuple(int(v) for v in self.resolution)
        self.validate()

    def __len__(self):
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        seen = set()
        for item in self.items:
            if item.image_path in seen:
                raise ValidationError(f"duplicate image_path {item.image_path!r}")
            seen.add(item.image_path)
            if item.counts.class_names != self.class_names:
                raise ValidationError(f"{item.image_path}: class names differ from manifest")
            item.counts.check_bounds(self.max_count)

    def header(self) -> dict:
        h = {
            "class_names": list(self.class_names),
            "max_count": self.max_count,
            "resolution": list(self.resolution),
            "schema_version": self.schema_version,
            "seed": self.seed,
        }
        if self.extra:
            h["extra"] = self.extra
        return h

    def count_matrix(self) -> np.ndarray:
        return np.array([it.counts.counts for it in self.items], dtype=np.int64).reshape(
            len(self.items), self.num_classes)

    def combinations(self) -> list[tuple[int, ...]]:
        return sorted({it.counts.counts for it in self.items})

    def subset(self, items: Iterable[DatasetItem]) -> "DatasetManifest":
        return replace(self, items=list(items))

    def resolve(self, item: DatasetItem) -> Path:
        root = self.root if self.root is not None else Path(".")
        return root / item.image_path

    def count_vector(self, counts: Sequence[int]) -> CountVector:
        return CountVector(tuple(counts), self.class_names)


def admissible_combinations(num_classes: int, max_count: int,
                            min_total: int = 0, max_total: int | None = None) -> list[tuple[int, ...]]:
    """All count vectors with entries in [0, max_count] and total in [min_total, max_total]."""
    if num_classes < 1 or max_count < 0:
        raise InvalidSpec("need at least one class and max_count >= 0")
    hi = num_classes * max_count if max_total is None else max_total
    return [c for c in itertools.product(range(max_count + 1), repeat=num_classes)
            if min_total <= sum(c) <= hi]


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_text(manifest: DatasetManifest) -> str:
    lines = [_dumps(manifest.header())]
    lines.extend(_dumps(item.to_record()) for item in manifest.items)
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    """Write a manifest; ``path`` may be a directory (then ``manifest.jsonl`` inside it)."""
    path = Path(path)
    if path.is_dir() or path.suffix == "":
        path = path / MANIFEST_NAME
    if manifest.root is not None:
        # re-express item paths relative to the new location
        new_root = path.parent.resolve()
        old_root = Path(manifest.root).resolve()
        if new_root != old_root:
            items = [replace(it, image_path=os.path.relpath(old_root / it.image_path, new_root))
                     for it in manifest.items]
            manifest = replace(manifest, items=items, root=new_root)
    atomic_write_text(path, manifest_text(manifest))
    return path


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    names = tuple(header["class_names"])
    items = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        items.append(DatasetItem(rec["file"], CountVector(tuple(rec["counts"]), names),
                                 rec.get("source", {})))
    return DatasetManifest(
        items=items,
        class_names=names,
        max_count=int(header["max_count"]),
        resolution=tuple(header["resolution"]),
        seed=int(header["seed"]),
        schema_version=int(header.get("schema_version", SCHEMA_VERSION)),
        root=path.parent,
        extra=header.get("extra", {}),
    )


def save_png(array: np.ndarray, path: str | os.PathLike) -> None:
    """Save an HxW or HxWx3 uint8 array as PNG."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValidationError(f"expected uint8 image, got {array.dtype}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def load_image(path: str | os.PathLike, channels: int | None = None) -> np.ndarray:
    """Load an image as uint8 array of shape (H, W, C)."""
    try:
        with Image.open(path) as im:
            if channels == 1:
                im = im.convert("L")
            elif channels == 3:
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_manifest_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """All images as uint8 (N, H, W, C) plus the (N, n) integer count matrix."""
    h, w, c = manifest.resolution
    images = np.empty((len(manifest), h, w, c), dtype=np.uint8)
    for i, item in enumerate(manifest.items):
        arr = load_image(manifest.resolve(item), channels=c)
        if arr.shape != (h, w, c):
            raise DataError(f"{manifest.resolve(item)}: shape {arr.shape}, manifest says {(h, w, c)}")
        images[i] = arr
    return images, manifest.count_matrix()


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-item stream, so parallel and serial generation agree."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))
