"""Convert the 5000-digit MNIST subset bundled with mlxtend into IDX archives.

The output in data/mnist5k/ is checked in, so this only needs rerunning if the
files go missing:

    pip download --no-deps mlxtend
    python scripts/build_mnist5k_idx.py mlxtend-*.whl data/mnist5k
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from countgan.datasets.glyphs import write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", help="mlxtend wheel, or the mnist_5k.csv.gz file itself")
    parser.add_argument("out", type=Path)
    args = parser.parse_args()

    if args.wheel.endswith(".whl"):
        raw = zipfile.ZipFile(args.wheel).read(CSV_MEMBER)
    else:
        raw = Path(args.wheel).read_bytes()
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(images, args.out / "train-images-idx3-ubyte.gz")
    write_idx(labels, args.out / "train-labels-idx1-ubyte.gz")
    print(f"wrote {len(images)} digits, per-class counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
