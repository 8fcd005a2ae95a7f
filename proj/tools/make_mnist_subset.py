#!/usr/bin/env python3
"""Build the bundled 10k-digit MNIST subset as gzipped IDX files.

Source: the `mnist` npm package (MIT, https://github.com/cazala/mnist), which
ships 10000 MNIST digits as per-class JSON arrays of [0,1] pixel values.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist

The digits are shuffled with a fixed seed and split 8000 / 2000 into
train-* and t10k-* files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

PIXELS = 28 * 28


def load_digits(src: Path):
    samples = []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        if len(data) % PIXELS:
            raise SystemExit(f"{label}.json: length {len(data)} is not a multiple of {PIXELS}")
        for k in range(len(data) // PIXELS):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[k * PIXELS:(k + 1) * PIXELS])
            samples.append((px, label))
    return samples


def write_idx(path: Path, samples):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for px, _ in samples:
            f.write(px)


def write_labels(path: Path, samples):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = load_digits(src)
    random.Random(20231016).shuffle(samples)
    train, test = samples[:8000], samples[8000:]
    write_idx(dst / "train-images-idx3-ubyte.gz", train)
    write_labels(dst / "train-labels-idx1-ubyte.gz", train)
    write_idx(dst / "t10k-images-idx3-ubyte.gz", test)
    write_labels(dst / "t10k-labels-idx1-ubyte.gz", test)
    print(f"wrote {len(train)} train / {len(test)} test samples to {dst}")


if __name__ == "__main__":
    main()
