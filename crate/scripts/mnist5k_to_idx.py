"""Convert mlxtend's 5000-sample MNIST CSV into gzipped IDX files.

Usage: python3 scripts/mnist5k_to_idx.py path/to/mnist_5k.csv.gz OUT_DIR

The source rows are grouped by digit (500 each). Per digit, the first 400
rows go to the training files and the last 100 to the test files; each file
is then put in a fixed pseudo-random order.
"""

import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, images, labels):
    n, rows, cols = images.shape
    with gzip.GzipFile(path / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(path / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    table = np.loadtxt(src, delimiter=",", dtype=np.int64)
    x = table[:, :-1].reshape(-1, 28, 28)
    y = table[:, -1]
    assert x.min() >= 0 and x.max() <= 255 and len(x) == 5000
    rng = np.random.default_rng(0)
    for name, lo, hi in (("train", 0, 400), ("test", 400, 500)):
        idx = np.concatenate([np.flatnonzero(y == k)[lo:hi] for k in range(10)])
        idx = idx[rng.permutation(len(idx))]
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        write_idx(d, x[idx], y[idx])
        print(name, len(idx), np.bincount(y[idx], minlength=10).tolist())


if __name__ == "__main__":
    main()
