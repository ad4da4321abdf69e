"""IDX archive I/O and the per-class glyph bank used by Multi-MNIST."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DataError, EmptyGlyphClass, ValidationError

_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path: str | os.PathLike) -> np.ndarray:
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DataError(f"{path}: not an IDX file")
    code, ndim = data[2], data[3]
    if code not in _IDX_DTYPES:
        raise DataError(f"{path}: unknown IDX type code {code:#x}")
    shape = tuple(int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    offset = 4 + 4 * ndim
    arr = np.frombuffer(data, dtype=_IDX_DTYPES[code], offset=offset)
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{path}: payload size {arr.size} does not match shape {shape}")
    return arr.reshape(shape).astype(arr.dtype.newbyteorder("="), copy=True)


def write_idx(array: np.ndarray, path: str | os.PathLike) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype not in _IDX_CODES:
        raise ValidationError(f"unsupported IDX dtype {array.dtype}")
    header = bytes([0, 0, _IDX_CODES[array.dtype], array.ndim])
    header += b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    payload = header + array.tobytes()
    path = str(path)
    if path.endswith(".gz"):
        # mtime=0 keeps the archive byte-stable
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def tight_crop(bitmap: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(bitmap)
    if ys.size == 0:
        raise ValidationError("glyph has no foreground pixels")
    return bitmap[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


@dataclass
class GlyphBank:
    """Tightly cropped grayscale glyphs, grouped by class index."""

    glyphs: list[list[np.ndarray]]
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if len(self.glyphs) != len(self.class_names):
            raise ValidationError("one glyph list per class required")
        for k, group in enumerate(self.glyphs):
            for g in group:
                if g.dtype != np.uint8 or g.ndim != 2 or not g.any():
                    raise ValidationError(f"class {k}: glyphs must be non-empty 2-D uint8 bitmaps")

    @property
    def num_classes(self):
        return len(self.class_names)

    def require(self, classes: Sequence[int]) -> None:
        for k in classes:
            if not 0 <= k < self.num_classes:
                raise ValidationError(f"class {k} not in glyph bank")
            if not self.glyphs[k]:
                raise EmptyGlyphClass(f"no glyphs for class {self.class_names[k]!r}")

    @classmethod
    def from_arrays(cls, images: np.ndarray, labels: np.ndarray,
                    class_names: Sequence[str] | None = None) -> "GlyphBank":
        labels = np.asarray(labels).astype(np.int64)
        n = int(labels.max()) + 1 if class_names is None else len(class_names)
        if class_names is None:
            class_names = [str(k) for k in range(n)]
        if labels.min() < 0 or labels.max() >= n:
            raise ValidationError("labels outside [0, n)")
        groups: list[list[np.ndarray]] = [[] for _ in range(n)]
        for img, lab in zip(images, labels):
            img = np.asarray(img, dtype=np.uint8)
            if img.any():
                groups[lab].append(tight_crop(img))
        return cls(groups, tuple(class_names))

    @classmethod
    def from_idx(cls, images_path, labels_path) -> "GlyphBank":
        images = read_idx(images_path)
        labels = read_idx(labels_path)
        if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
            raise DataError("IDX images must be (N, H, W) with N matching labels")
        return cls.from_arrays(images, labels)

    @classmethod
    def from_dir(cls, directory) -> "GlyphBank":
        """Load ``*images-idx3-ubyte[.gz]`` / ``*labels-idx1-ubyte[.gz]`` from a directory."""
        directory = Path(directory)
        imgs = sorted(directory.glob("*images-idx3-ubyte*"))
        labs = sorted(directory.glob("*labels-idx1-ubyte*"))
        if not imgs or not labs:
            raise DataError(f"{directory}: no IDX image/label archives found")
        return cls.from_idx(imgs[0], labs[0])
