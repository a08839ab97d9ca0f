#!/usr/bin/env python3
"""Build the desk-scale MNIST subset used by the tests and the sweep.

Source: the 5,000-digit MNIST sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 digits per class, 784 pixels + label
per row). The rows are shuffled with a fixed seed and split into 2,000 training
and 1,000 test digits, written as big-endian IDX files. The first 100 test
digits are also written as plain CSV so the IDX reader can be checked against
an independent source.

Usage: python3 tools/make_mnist_subset.py [--out data/mnist] [--wheel path.whl]
"""
import argparse
import glob
import gzip
import os
import random
import struct
import subprocess
import tempfile
import zipfile

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TRAIN_COUNT = 2000
TEST_COUNT = 1000
SEED = 20240101


def fetch_wheel(tmp):
    subprocess.run(["pip", "download", "--no-deps", "mlxtend==0.24.0", "-d", tmp],
                   check=True)
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))


def write_labels(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--wheel")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        raw = zipfile.ZipFile(wheel).read(MEMBER)
    lines = gzip.decompress(raw).decode().splitlines()

    rows = []
    for line in lines:
        values = [int(v) for v in line.split(",")]
        assert len(values) == 785
        rows.append((values[:784], values[784]))

    random.Random(SEED).shuffle(rows)
    train = rows[:TRAIN_COUNT]
    test = rows[TRAIN_COUNT:TRAIN_COUNT + TEST_COUNT]

    os.makedirs(args.out, exist_ok=True)
    write_images(os.path.join(args.out, "train-images-idx3-ubyte"), train)
    write_labels(os.path.join(args.out, "train-labels-idx1-ubyte"), train)
    write_images(os.path.join(args.out, "t10k-images-idx3-ubyte"), test)
    write_labels(os.path.join(args.out, "t10k-labels-idx1-ubyte"), test)
    with open(os.path.join(args.out, "t10k-first100.csv"), "w") as f:
        for pixels, label in test[:100]:
            f.write(",".join(map(str, pixels + [label])) + "\n")


if __name__ == "__main__":
    main()
