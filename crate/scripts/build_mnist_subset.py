#!/usr/bin/env python3
"""Assemble the bundled MNIST subset as gzipped IDX files.

Source: npm package `mnist` 1.1.0 (MIT), src/digits/<d>.json, which carries
10,000 genuine MNIST digits stored as pixel/255 rounded to 3 decimals. A step of
0.001 is finer than 1/255, so the original bytes are recovered exactly.
(The 5,000-digit subset shipped inside mlxtend is fully contained in it.)

Usage:
  npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
  python3 scripts/build_mnist_subset.py package data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 8_000


def npm_digits(root):
    for label in range(10):
        flat = json.loads((Path(root) / "src" / "digits" / f"{label}.json").read_text())["data"]
        for i in range(0, len(flat), 784):
            yield bytes(round(v * 255) for v in flat[i : i + 784]), label


def write_idx(path, images, labels):
    with gzip.GzipFile(path.with_suffix(".gz").with_name(path.name + ".gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(img)
    lpath = Path(str(path).replace("images-idx3", "labels-idx1"))
    with gzip.GzipFile(lpath.with_name(lpath.name + ".gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    npm_root, out = sys.argv[1], Path(sys.argv[2])
    seen = set()
    samples = []
    for img, label in npm_digits(npm_root):
        if img in seen:
            continue
        seen.add(img)
        samples.append((img, label))
    random.Random(20170401).shuffle(samples)
    train, test = samples[:TRAIN], samples[TRAIN:]
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", [s[0] for s in train], [s[1] for s in train])
    write_idx(out / "t10k-images-idx3-ubyte", [s[0] for s in test], [s[1] for s in test])
    print(f"unique={len(samples)} train={len(train)} test={len(test)}")


if __name__ == "__main__":
    main()
