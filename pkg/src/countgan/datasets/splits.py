"""Held-out count-combination splits for interpolation/extrapolation studies."""

from __future__ import annotations

from typing import Sequence

from ..errors import InvalidExclusion, ModeViolation
from .core import DatasetManifest

MODES = ("interpolation", "extrapolation")


def split_holdout(manifest: DatasetManifest, excluded: Sequence[tuple[int, int]],
                  mode: str = "interpolation") -> tuple[DatasetManifest, DatasetManifest]:
    """Move every item with ``counts[class_id] == count_value`` for any excluded pair out of train.

    In extrapolation mode each excluded count must be the manifest's max_count.
    """
    if mode not in MODES:
        raise ModeViolation(f"unknown mode {mode!r}; expected one of {MODES}")
    pairs = [(int(k), int(v)) for k, v in excluded]
    for k, v in pairs:
        if not 0 <= k < manifest.num_classes:
            raise InvalidExclusion(f"class {k} out of range for {manifest.num_classes} classes")
        if not 0 <= v <= manifest.max_count:
            raise InvalidExclusion(f"count {v} outside [0, {manifest.max_count}]")
        if mode == "extrapolation" and v != manifest.max_count:
            raise ModeViolation(
                f"extrapolation exclusions must use max_count={manifest.max_count}, got {v}")
        if not any(item.counts[k] == v for item in manifest.items):
            raise InvalidExclusion(f"exclusion (class {k}, count {v}) matches no items")

    train, heldout = [], []
    for item in manifest.items:
        if any(item.counts[k] == v for k, v in pairs):
            heldout.append(item)
        else:
            train.append(item)
    return manifest.subset(train), manifest.subset(heldout)
