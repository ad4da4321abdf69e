import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from countgan.datasets import GlyphBank, MultiMnistSpec, generate_multi_mnist

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def glyphs() -> GlyphBank:
    return GlyphBank.from_dir(MNIST_DIR)


@pytest.fixture(scope="session")
def toy_glyphs() -> GlyphBank:
    """Two classes of tiny solid blocks; fast and easy to reason about."""
    rng = np.random.default_rng(0)
    images = np.zeros((20, 6, 6), dtype=np.uint8)
    labels = np.repeat([0, 1], 10)
    for i in range(20):
        h, w = rng.integers(3, 6, size=2)
        images[i, :h, :w] = 200 + labels[i] * 50
    return GlyphBank.from_arrays(images, labels)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory, toy_glyphs):
    """64 images at 16x16, two classes, counts <= 1."""
    out = tmp_path_factory.mktemp("toy")
    spec = MultiMnistSpec(class_subset=(0, 1), max_count=1, images_per_combination=16,
                          resolution=(16, 16), seed=3)
    return generate_multi_mnist(toy_glyphs, spec, out_dir=out)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
