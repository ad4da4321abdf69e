from .core import (
    MANIFEST_NAME, SCHEMA_VERSION, CountVector, DatasetItem, DatasetManifest, admissible_combinations,
    load_image, load_manifest_arrays, read_manifest, save_png, write_manifest,
)
from .crops import (
    BoxAnnotation, CropSpec, count_in_window, crop_count_patches, read_annotations,
    visible_fractions, window_is_ambiguous, write_annotations,
)
from .glyphs import GlyphBank, read_idx, write_idx
from .splits import split_holdout
from .synth import (
    MultiMnistSpec, ShapeCountSpec, generate_multi_mnist, generate_shapecount, place_boxes,
    render_multi_mnist, render_shapecount,
)

__all__ = [
    "MANIFEST_NAME", "SCHEMA_VERSION", "CountVector", "DatasetItem", "DatasetManifest",
    "admissible_combinations", "load_image", "load_manifest_arrays", "read_manifest", "save_png",
    "write_manifest", "BoxAnnotation", "CropSpec", "count_in_window", "crop_count_patches",
    "read_annotations", "visible_fractions", "window_is_ambiguous", "write_annotations",
    "GlyphBank", "read_idx", "write_idx", "split_holdout", "MultiMnistSpec", "ShapeCountSpec",
    "generate_multi_mnist", "generate_shapecount", "place_boxes", "render_multi_mnist",
    "render_shapecount",
]
