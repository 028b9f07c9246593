#!/usr/bin/env python3
"""Build the desk-scale MNIST subset used by the trainer.

Source: the npm package `mnist@1.1.0`, which bundles 10,000 MNIST digits as
28x28 float arrays (values in [0, 1], three decimals). The tarball is fetched
with `npm pack`, checked against a pinned sha256, and converted to gzipped
IDX files. Every fifth sample of each class goes to the test split.

Usage: scripts/fetch_mnist.py [--out data/mnist] [--tarball path.tgz]
"""
import argparse
import gzip
import hashlib
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

PACKAGE = "mnist@1.1.0"
SHA256 = "3fb5bb119c556ae7d1aa647653ca603a1b3abf001aae410732cc55d923c5a390"


def fetch(tmp: pathlib.Path) -> pathlib.Path:
    out = subprocess.run(["npm", "pack", PACKAGE, "--silent"], cwd=tmp,
                         check=True, capture_output=True, text=True)
    return tmp / out.stdout.strip().splitlines()[-1]


def load_digits(tarball: pathlib.Path):
    digest = hashlib.sha256(tarball.read_bytes()).hexdigest()
    if digest != SHA256:
        raise SystemExit(f"checksum mismatch: {digest}")
    per_class = {}
    with tarfile.open(tarball) as tf:
        for d in range(10):
            member = tf.extractfile(f"package/src/digits/{d}.json")
            data = json.load(member)["data"]
            n = len(data) // 784
            per_class[d] = [data[i * 784:(i + 1) * 784] for i in range(n)]
    return per_class


def to_u8(pixels):
    return bytes(min(255, max(0, int(v * 255 + 0.5))) for v in pixels)


def write_idx(path, images, labels):
    with gzip.GzipFile(path[0], "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(path[1], "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--tarball")
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tarball = pathlib.Path(args.tarball) if args.tarball else fetch(pathlib.Path(tmp))
        per_class = load_digits(tarball)

    train, test = ([], []), ([], [])
    longest = max(len(v) for v in per_class.values())
    # Interleave classes so both splits are class-balanced in file order.
    for i in range(longest):
        for d in range(10):
            if i < len(per_class[d]):
                split = test if i % 5 == 4 else train
                split[0].append(to_u8(per_class[d][i]))
                split[1].append(d)

    write_idx((out / "train-images-idx3-ubyte.gz", out / "train-labels-idx1-ubyte.gz"), *train)
    write_idx((out / "t10k-images-idx3-ubyte.gz", out / "t10k-labels-idx1-ubyte.gz"), *test)
    print(f"train {len(train[1])}  test {len(test[1])}  -> {out}")


if __name__ == "__main__":
    main()
