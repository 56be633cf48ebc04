#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into gzipped IDX files.

Usage: prepare_mnist_subset.py <path/to/mnist/package> <out_dir> [n_test]

The package ships 10000 real MNIST digits grouped by class as JSON arrays of
grey levels in [0, 1]. They are shuffled with a fixed seed and split into a
train part and a test part of `n_test` images (default 2000).
"""
import gzip
import json
import os
import random
import struct
import sys


def write_idx_images(path, images):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    n_test = int(sys.argv[3]) if len(sys.argv) > 3 else 2000
    samples = []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            data = json.load(f)["data"]
        for k in range(len(data) // 784):
            pixels = [min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784]]
            samples.append((pixels, digit))
    random.Random(20200205).shuffle(samples)
    test, train = samples[:n_test], samples[n_test:]
    os.makedirs(out, exist_ok=True)
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte.gz"), [s[0] for s in train])
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte.gz"), [s[1] for s in train])
    write_idx_images(os.path.join(out, "t10k-images-idx3-ubyte.gz"), [s[0] for s in test])
    write_idx_labels(os.path.join(out, "t10k-labels-idx1-ubyte.gz"), [s[1] for s in test])
    print(f"train {len(train)} test {len(test)}")


if __name__ == "__main__":
    main()
