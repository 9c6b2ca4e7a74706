#!/usr/bin/env python3
"""Convert the MNIST digits shipped in the npm package `mnist` into IDX files.

Usage: make_mnist_subset.py <package_dir> <out_dir> [--train N] [--test N]

The npm package stores 28x28 images as floats in [0, 1], one JSON file per
digit. Samples are interleaved by class with a fixed seed so the subsets are
reproducible.
"""
import argparse
import json
import random
import struct
from pathlib import Path


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=512)
    ap.add_argument("--test", type=int, default=1024)
    ap.add_argument("--seed", type=int, default=2023)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        data = json.loads((Path(args.package_dir) / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for i in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            samples.append((px, digit))
    random.Random(args.seed).shuffle(samples)
    if args.train + args.test > len(samples):
        raise SystemExit("not enough samples")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = samples[:args.train]
    test = samples[args.train:args.train + args.test]
    write_idx_images(out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_idx_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_idx_images(out / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", [s[1] for s in test])


if __name__ == "__main__":
    main()
